//! Loss-configuration studies. Every grid entry trains one model into its own
//! run directory and evaluates it on the test split; reports are rebuilt
//! from the stored per-slice metrics alone.
//!
//! Layout of a study directory:
//!
//! ```text
//! study.json                  plan + run list
//! baseline/metrics.json       identity predictions (normalised kVCT)
//! runs/<id>/config.json       model + training configuration
//! runs/<id>/log.csv           per-epoch losses
//! runs/<id>/checkpoints/      best.ckpt, last.ckpt
//! runs/<id>/metrics.json      per-slice test metrics
//! runs/<id>/metrics.csv       aggregated row
//! report files                written by `write_report`
//! ```

pub mod chart;
pub mod panel;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataio::{build_datasets, Catalog, DatasetKind, Datasets, Split, SplitAssignment, CATALOG_FILE};
use crate::error::{Error, Result};
use crate::losses::{loss_matrix_specs, LossSpec, LossTerm, FFL_GRID, WEIGHT_GRID};
use crate::metrics::{aggregate, masked_psnr, masked_ssim, write_records_json, write_report_csv, MetricsRecord};
use crate::model::{ModelConfig, ModelParams};
use crate::preprocess::{load_pairs, SlicePair};
use crate::trainer::{load_checkpoint, predict, train, TrainConfig, TrainOptions, BEST_CHECKPOINT, CONFIG_FILE};

pub use panel::{render_reconstruction_panel, CellStats, PanelOutput, SliceSelector};
pub use report::{ffl_report, loss_matrix_report, weight_report, write_report, FflReport, MatrixReport, WeightReport};

pub const STUDY_FILE: &str = "study.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const BASELINE_DIR: &str = "baseline";
pub const RUNS_DIR: &str = "runs";
/// Loss-spec id carried by identity-baseline records.
pub const IDENTITY_ID: &str = "identity";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Custom,
    WeightAblation,
    FflGrid,
    LossMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub name: String,
    pub loss: LossSpec,
    pub dataset: DatasetKind,
}

impl GridEntry {
    pub fn new(loss: LossSpec, dataset: DatasetKind) -> Self {
        GridEntry {
            name: format!("{}__{}", loss.id(), dataset),
            loss,
            dataset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    pub kind: StudyKind,
    pub grid: Vec<GridEntry>,
    pub model: ModelConfig,
    /// Template for every run; `loss` and `dataset` are overridden per entry.
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::invalid("grid", "plan has no runs"));
        }
        let mut seen = BTreeSet::new();
        for e in &self.grid {
            if e.name.is_empty() || e.name.contains(['/', '\\']) || e.name.starts_with('.') {
                return Err(Error::invalid("grid", format!("{:?} is not usable as a directory name", e.name)));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::invalid("grid", format!("duplicate run name {:?}", e.name)));
            }
            e.loss.validate()?;
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn run_dir(&self, entry: &GridEntry) -> PathBuf {
        self.output_dir.join(RUNS_DIR).join(&entry.name)
    }

    /// Training configuration of one grid entry.
    pub fn train_config(&self, entry: &GridEntry) -> TrainConfig {
        TrainConfig {
            loss: entry.loss.clone(),
            dataset: entry.dataset,
            ..self.train.clone()
        }
    }

    fn with_grid(base: &ExperimentPlan, kind: StudyKind, grid: Vec<GridEntry>) -> Self {
        ExperimentPlan {
            kind,
            grid,
            ..base.clone()
        }
    }

    /// One L1^w run per w on D_All.
    pub fn weight_ablation(base: &ExperimentPlan) -> Self {
        let grid = WEIGHT_GRID
            .iter()
            .map(|&w| {
                GridEntry::new(
                    LossSpec {
                        w,
                        ..LossSpec::new(&[LossTerm::L1w])
                    },
                    DatasetKind::All,
                )
            })
            .collect();
        Self::with_grid(base, StudyKind::WeightAblation, grid)
    }

    /// FFL-only runs over alpha x beta on D_All.
    pub fn ffl_grid(base: &ExperimentPlan) -> Self {
        let mut grid = Vec::new();
        for &alpha in &FFL_GRID {
            for &beta in &FFL_GRID {
                let loss = LossSpec {
                    alpha,
                    beta,
                    ..LossSpec::new(&[LossTerm::Ffl])
                };
                // always spell out both exponents so every cell has a distinct id
                grid.push(GridEntry {
                    name: format!("FFL_a{alpha}_b{beta}"),
                    loss,
                    dataset: DatasetKind::All,
                });
            }
        }
        Self::with_grid(base, StudyKind::FflGrid, grid)
    }

    /// Seven loss combinations, each on D_Art and D_All.
    pub fn loss_matrix(base: &ExperimentPlan) -> Self {
        let mut grid = Vec::new();
        for spec in loss_matrix_specs() {
            for dataset in [DatasetKind::Art, DatasetKind::All] {
                grid.push(GridEntry::new(spec.clone(), dataset));
            }
        }
        Self::with_grid(base, StudyKind::LossMatrix, grid)
    }
}

/// Preprocessed slices plus the patient split, loaded once per study.
pub struct DataSource {
    pub data_dir: PathBuf,
    pub catalog: Catalog,
    pub split: SplitAssignment,
    datasets: Datasets,
    cache: BTreeMap<Split, Vec<SlicePair>>,
}

impl DataSource {
    /// `split_path` defaults to `split.json` inside `data_dir`.
    pub fn open(data_dir: &Path, split_path: Option<&Path>) -> Result<Self> {
        let catalog_path = data_dir.join(CATALOG_FILE);
        if !catalog_path.exists() {
            return Err(Error::Missing(format!(
                "no preprocessed dataset at {} (missing {CATALOG_FILE})",
                data_dir.display()
            )));
        }
        let catalog = Catalog::load(&catalog_path)?;
        if catalog.pairs.is_empty() {
            return Err(Error::Missing(format!("{} lists no preprocessed pairs", catalog_path.display())));
        }
        let split_path = split_path.map(Path::to_path_buf).unwrap_or_else(|| data_dir.join(SPLIT_FILE));
        let split = load_split(&split_path)?;
        let datasets = build_datasets(&catalog, &split)?;
        Ok(DataSource {
            data_dir: data_dir.to_path_buf(),
            catalog,
            split,
            datasets,
            cache: BTreeMap::new(),
        })
    }

    /// Slices of `kind` in `split`; D_Art is the artifact subset of D_All.
    pub fn pairs(&mut self, kind: DatasetKind, split: Split) -> Result<Vec<SlicePair>> {
        if !self.cache.contains_key(&split) {
            let refs = self.datasets.get(DatasetKind::All, split);
            let pairs = load_pairs(&self.data_dir, &self.catalog, refs)?;
            self.cache.insert(split, pairs);
        }
        let all = &self.cache[&split];
        Ok(match kind {
            DatasetKind::All => all.clone(),
            DatasetKind::Art => all.iter().filter(|p| p.is_artifact).cloned().collect(),
        })
    }
}

pub fn load_split(path: &Path) -> Result<SplitAssignment> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_split(split: &SplitAssignment, path: &Path) -> Result<()> {
    crate::dataio::write_atomic(path, serde_json::to_string_pretty(split)?.as_bytes())
}

/// Masked PSNR/SSIM of `preds` against each pair's MVCT.
pub fn evaluate_predictions(
    preds: &[Array2<f32>],
    pairs: &[SlicePair],
    loss_spec_id: &str,
    dataset_tag: DatasetKind,
    split: Split,
) -> Result<Vec<MetricsRecord>> {
    if preds.len() != pairs.len() {
        return Err(Error::Shape(format!("{} predictions for {} slices", preds.len(), pairs.len())));
    }
    preds
        .iter()
        .zip(pairs)
        .map(|(p, pair)| {
            let pred = p.mapv(|v| v as f64);
            let gt = pair.mv.mapv(|v| v as f64);
            let psnr = masked_psnr(&pred, &gt, &pair.body_mask, 2.0)?;
            Ok(MetricsRecord {
                patient_id: pair.patient_id.clone(),
                slice_index: pair.slice_index,
                is_artifact: pair.is_artifact,
                psnr_db: psnr.db,
                identical: psnr.identical,
                ssim: masked_ssim(&pred, &gt, &pair.body_mask)?,
                dataset_tag,
                split,
                loss_spec_id: loss_spec_id.to_string(),
            })
        })
        .collect()
}

/// Evaluates a model on `pairs`.
pub fn evaluate(
    params: &ModelParams<f32>,
    pairs: &[SlicePair],
    loss_spec_id: &str,
    dataset_tag: DatasetKind,
    batch_size: usize,
) -> Result<Vec<MetricsRecord>> {
    let preds = predict(params, pairs, batch_size)?;
    evaluate_predictions(&preds, pairs, loss_spec_id, dataset_tag, Split::Test)
}

/// Identity baseline: the normalised kVCT taken as the prediction.
pub fn identity_baseline(pairs: &[SlicePair]) -> Result<Vec<MetricsRecord>> {
    let preds: Vec<Array2<f32>> = pairs.iter().map(|p| p.kv.clone()).collect();
    evaluate_predictions(&preds, pairs, IDENTITY_ID, DatasetKind::All, Split::Test)
}

/// Writes `metrics.json` and the aggregated `metrics.csv` into `dir`.
pub fn write_metrics(records: &[MetricsRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_records_json(records, dir.join(METRICS_FILE))?;
    write_report_csv(&aggregate(records), dir.join(METRICS_CSV))
}

/// Re-evaluates a finished run directory from its best checkpoint on the
/// test split and rewrites its metrics files.
pub fn evaluate_run(run_dir: &Path, data: &mut DataSource) -> Result<Vec<MetricsRecord>> {
    let cfg = crate::trainer::RunConfig::load(run_dir.join(CONFIG_FILE))?;
    let ck = load_checkpoint(run_dir.join(BEST_CHECKPOINT), Some(&cfg.model))?;
    let test = data.pairs(DatasetKind::All, Split::Test)?;
    let records = evaluate(&ck.params, &test, &cfg.train.loss.id(), cfg.train.dataset, cfg.train.batch_size)?;
    write_metrics(&records, run_dir)?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub loss_spec_id: String,
    pub dataset: DatasetKind,
    /// Relative to the study directory.
    pub dir: String,
    pub epochs: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub plan: ExperimentPlan,
    pub runs: Vec<RunSummary>,
}

impl Study {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STUDY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save(&self) -> Result<()> {
        let path = self.plan.output_dir.join(STUDY_FILE);
        crate::dataio::write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Trains and evaluates every grid entry in order, then writes the report.
/// Each run is trained on its dataset's train split, early-stopped on the
/// same dataset's validation split and evaluated on all test slices.
pub fn run_plan(plan: &ExperimentPlan, data: &mut DataSource) -> Result<Study> {
    plan.validate()?;
    let out = &plan.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let test = data.pairs(DatasetKind::All, Split::Test)?;
    if test.is_empty() {
        return Err(Error::Missing("test split has no slices".into()));
    }
    write_metrics(&identity_baseline(&test)?, &out.join(BASELINE_DIR))?;

    let mut study = Study {
        plan: plan.clone(),
        runs: Vec::new(),
    };
    for (i, entry) in plan.grid.iter().enumerate() {
        info!("run {}/{}: {}", i + 1, plan.grid.len(), entry.name);
        let cfg = plan.train_config(entry);
        let train_set = data.pairs(entry.dataset, Split::Train)?;
        let val_set = data.pairs(entry.dataset, Split::Validation)?;
        let dir = plan.run_dir(entry);
        let outcome = train(
            &plan.model,
            &cfg,
            &train_set,
            &val_set,
            &TrainOptions {
                run_dir: Some(dir.clone()),
                ..TrainOptions::default()
            },
        )?;
        let records = evaluate(&outcome.best, &test, &entry.loss.id(), entry.dataset, cfg.batch_size)?;
        write_metrics(&records, &dir)?;
        study.runs.push(RunSummary {
            name: entry.name.clone(),
            loss_spec_id: entry.loss.id(),
            dataset: entry.dataset,
            dir: format!("{RUNS_DIR}/{}", entry.name),
            epochs: outcome.log.len(),
            best_epoch: outcome.best_epoch,
        });
        study.save()?;
    }
    write_report(out)?;
    Ok(study)
}

pub fn run_weight_ablation(base: &ExperimentPlan, data: &mut DataSource) -> Result<Study> {
    run_plan(&ExperimentPlan::weight_ablation(base), data)
}

pub fn run_ffl_grid(base: &ExperimentPlan, data: &mut DataSource) -> Result<Study> {
    run_plan(&ExperimentPlan::ffl_grid(base), data)
}

pub fn run_loss_matrix(base: &ExperimentPlan, data: &mut DataSource) -> Result<Study> {
    run_plan(&ExperimentPlan::loss_matrix(base), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentPlan {
        ExperimentPlan {
            name: "t".into(),
            kind: StudyKind::Custom,
            grid: vec![GridEntry::new(LossSpec::new(&[LossTerm::L1w]), DatasetKind::All)],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            output_dir: "out".into(),
        }
    }

    #[test]
    fn grid_cardinalities() {
        let b = base();
        assert_eq!(ExperimentPlan::weight_ablation(&b).grid.len(), 4);
        assert_eq!(ExperimentPlan::ffl_grid(&b).grid.len(), 9);
        let m = ExperimentPlan::loss_matrix(&b);
        assert_eq!(m.grid.len(), 14);
        for p in [ExperimentPlan::weight_ablation(&b), ExperimentPlan::ffl_grid(&b), m] {
            p.validate().unwrap();
        }
    }

    #[test]
    fn ffl_only_matrix_row_has_no_l1() {
        let m = ExperimentPlan::loss_matrix(&base());
        assert!(m.grid.iter().any(|e| e.loss.terms == [LossTerm::Ffl]));
    }

    #[test]
    fn empty_or_duplicate_grid_is_rejected() {
        let mut p = base();
        p.grid.clear();
        assert!(p.validate().unwrap_err().is_validation());
        let mut p = base();
        p.grid.push(p.grid[0].clone());
        assert!(p.validate().unwrap_err().is_validation());
    }

    #[test]
    fn entry_overrides_template() {
        let p = ExperimentPlan::weight_ablation(&base());
        let cfg = p.train_config(&p.grid[1]);
        assert_eq!(cfg.loss.w, 25.0);
        assert_eq!(cfg.dataset, DatasetKind::All);
        assert_eq!(cfg.max_epochs, p.train.max_epochs);
    }

    #[test]
    fn missing_dataset_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(DataSource::open(dir.path(), None), Err(Error::Missing(_))));
    }
}
