use std::fs;
use std::path::{Path, PathBuf};

use mardtn::dataio::{split_by_patient, Catalog, DatasetKind, Split};
use mardtn::experiments::*;
use mardtn::losses::{LossSpec, LossTerm};
use mardtn::model::ModelConfig;
use mardtn::phantom::{generate_cohort, PhantomSpec};
use mardtn::preprocess::run_preprocess;
use mardtn::trainer::{load_checkpoint, predict, TrainConfig, BEST_CHECKPOINT, LOG_FILE};

fn smoke_data(dir: &Path) -> PathBuf {
    let spec = PhantomSpec {
        image_size: 32,
        n_slices: 10,
        implant_slice_fraction: 0.3,
        ..PhantomSpec::default()
    };
    let (raw, data) = (dir.join("raw"), dir.join("data"));
    generate_cohort(&spec, 6, 8, &raw).unwrap();
    run_preprocess(&raw, &data, 4).unwrap();
    let catalog = Catalog::load(data.join("catalog.json")).unwrap();
    save_split(&split_by_patient(&catalog, [0.7, 0.2, 0.1], 8).unwrap(), &data.join(SPLIT_FILE)).unwrap();
    data
}

fn plan(dir: &Path, name: &str) -> ExperimentPlan {
    ExperimentPlan {
        name: name.into(),
        kind: StudyKind::Custom,
        grid: vec![
            GridEntry::new(LossSpec::new(&[LossTerm::L1w]), DatasetKind::All),
            GridEntry::new(LossSpec::new(&[LossTerm::L1w, LossTerm::Ssim]), DatasetKind::Art),
        ],
        model: ModelConfig {
            depth: 1,
            base_channels: 2,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            max_epochs: 1,
            patience: 1,
            batch_size: 16,
            ..TrainConfig::default()
        },
        output_dir: dir.join(name),
    }
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            fs::copy(e.path(), target).unwrap();
        }
    }
}

#[test]
fn reports_and_panels_come_from_stored_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = smoke_data(tmp.path());
    let mut data = DataSource::open(&data_dir, None).unwrap();
    let base = plan(tmp.path(), "weights");
    let study = run_weight_ablation(&base, &mut data).unwrap();
    let dir = &base.output_dir;
    assert_eq!(study.runs.len(), 4);
    assert_eq!(Study::load(dir).unwrap().runs, study.runs);

    // regenerating the report touches nothing but the report files
    let files = write_report(dir).unwrap();
    assert!(files.iter().any(|f| f == "weights.csv"));
    let snapshot: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
    let logs: Vec<Vec<u8>> = study.runs.iter().map(|r| fs::read(dir.join(&r.dir).join(LOG_FILE)).unwrap()).collect();
    for f in &files {
        fs::remove_file(dir.join(f)).unwrap();
    }
    assert_eq!(write_report(dir).unwrap(), files);
    for (f, before) in files.iter().zip(&snapshot) {
        assert_eq!(&fs::read(dir.join(f)).unwrap(), before, "{f}");
    }
    for (r, before) in study.runs.iter().zip(&logs) {
        assert_eq!(&fs::read(dir.join(&r.dir).join(LOG_FILE)).unwrap(), before);
    }

    // a run and its byte-for-byte copy render identical rows
    let run = dir.join(&study.runs[0].dir);
    let twin = tmp.path().join("twin");
    copy_dir(&run, &twin);
    let png = tmp.path().join("panel.png");
    let out = render_reconstruction_panel(&[run.clone(), twin], &mut data, &SliceSelector::FirstArtifact, &png).unwrap();
    assert_eq!((out.rows, out.cols), (3, 2));
    assert_eq!(out.cells.len(), 6);
    for col in 0..2 {
        let (a, b) = (&out.cells[2 + col], &out.cells[4 + col]);
        assert!(!a.missing && !b.missing);
        assert_eq!((a.mean, a.std, a.min, a.max, a.psnr_db, a.ssim), (b.mean, b.std, b.min, b.max, b.psnr_db, b.ssim));
    }
    let stored: PanelOutput = serde_json::from_slice(&fs::read(png.with_extension("json")).unwrap()).unwrap();
    assert_eq!(stored, out);

    // prediction statistics agree with a prediction made here
    let test = data.pairs(DatasetKind::All, Split::Test).unwrap();
    let pair = test
        .iter()
        .find(|p| p.patient_id == out.patient_id && p.slice_index == out.slice_index)
        .unwrap();
    let ck = load_checkpoint(run.join(BEST_CHECKPOINT), Some(&base.model)).unwrap();
    let pred = predict(&ck.params, std::slice::from_ref(pair), 1).unwrap().remove(0);
    let mean = pred.iter().map(|&v| v as f64).sum::<f64>() / pred.len() as f64;
    assert!((out.cells[2].mean.unwrap() - mean).abs() < 1e-9);
    let mv_mean = pair.mv.iter().map(|&v| v as f64).sum::<f64>() / pair.mv.len() as f64;
    assert!((out.cells[1].mean.unwrap() - mv_mean).abs() < 1e-9);

    let again = tmp.path().join("again.png");
    let repeat = render_reconstruction_panel(&[run.clone()], &mut data, &SliceSelector::FirstArtifact, &again).unwrap();
    assert_eq!(repeat.rows, 2);
    assert_eq!(repeat.cells[2], out.cells[2]);
}

#[test]
fn plans_are_validated_before_any_training() {
    let tmp = tempfile::tempdir().unwrap();
    let mut p = plan(tmp.path(), "dup");
    p.grid.push(p.grid[0].clone());
    assert!(p.validate().is_err());
    let mut empty = plan(tmp.path(), "empty");
    empty.grid.clear();
    assert!(empty.validate().is_err());
    let mut bad = plan(tmp.path(), "bad");
    bad.grid[0].name = "../escape".into();
    assert!(bad.validate().is_err());
    assert!(!tmp.path().join("dup").exists());
}

#[test]
fn study_grids_have_the_expected_shape() {
    let base = plan(Path::new("/unused"), "s");
    let w = ExperimentPlan::weight_ablation(&base);
    assert_eq!(w.grid.len(), 4);
    let f = ExperimentPlan::ffl_grid(&base);
    assert_eq!(f.grid.len(), 9);
    assert!(f.grid.iter().any(|e| e.name == "FFL_a1_b1"));
    let m = ExperimentPlan::loss_matrix(&base);
    assert_eq!(m.grid.len(), 14);
    for p in [&w, &f, &m] {
        p.validate().unwrap();
    }
    let arts = m.grid.iter().filter(|e| e.dataset == DatasetKind::Art).count();
    assert_eq!(arts, 7);
}
