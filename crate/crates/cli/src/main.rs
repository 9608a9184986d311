use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;

use mardtn::dataio::{split_by_patient, Catalog, DatasetKind, Split, CATALOG_FILE};
use mardtn::experiments::{
    evaluate, evaluate_run, render_reconstruction_panel, run_ffl_grid, run_loss_matrix, run_weight_ablation,
    save_split, write_metrics, write_report, DataSource, ExperimentPlan, GridEntry, SliceSelector, StudyKind,
    SPLIT_FILE,
};
use mardtn::phantom::{generate_cohort, PhantomSpec};
use mardtn::preprocess::run_preprocess;
use mardtn::trainer::{train, RunConfig, TrainOptions};

/// Exit codes: 0 success, 2 invalid input, 3 runtime failure.
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "mardtn", version, about = "Synthetic kVCT to MVCT artifact-reduction pipeline")]
struct Cli {
    /// Master seed; overrides any seed in the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `panel` and `dataset split`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON configuration: a phantom spec for `phantom generate`, a run
    /// configuration (model + train) for training verbs.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic cohort generation.
    Phantom {
        #[command(subcommand)]
        action: PhantomCmd,
    },
    /// Patient-level train/validation/test assignment.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Resample, align, classify, normalise and mask a raw cohort.
    Preprocess {
        #[command(subcommand)]
        action: PreprocessCmd,
    },
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a run's best checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Run directory produced by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// L1^w runs for w in {1, 25, 50, 100}.
    AblateWeights(StudyArgs),
    /// FFL-only runs over alpha, beta in {0.5, 1, 1.5}.
    AblateFfl(StudyArgs),
    /// Seven loss combinations on D_Art and D_All.
    LossMatrix(StudyArgs),
    /// Rebuild a study's report files from its metrics.
    Report {
        /// Study directory; defaults to --out.
        #[arg(long)]
        study: Option<PathBuf>,
    },
    /// Reconstruction panel of one test slice across runs.
    Panel {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, requires = "slice")]
        patient: Option<String>,
        #[arg(long, requires = "patient")]
        slice: Option<usize>,
    },
}

#[derive(Subcommand)]
enum PhantomCmd {
    Generate {
        #[arg(long, default_value_t = 20)]
        patients: usize,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    Split {
        /// Directory holding catalog.json.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.7, 0.2, 0.1])]
        fractions: Vec<f64>,
    },
}

#[derive(Subcommand)]
enum PreprocessCmd {
    Run {
        /// Raw cohort directory.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        max_shift: usize,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Preprocessed data directory.
    #[arg(long)]
    data: PathBuf,
    /// Split file; defaults to split.json inside the data directory.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Continue an interrupted run in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Study name recorded in study.json.
    #[arg(long)]
    name: Option<String>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v = serde_json::from_str(&text).map_err(mardtn::Error::from)?;
    Ok(v)
}

fn out_dir(cli: &Cli) -> anyhow::Result<PathBuf> {
    match &cli.out {
        Some(p) => Ok(p.clone()),
        None => Err(mardtn::Error::Validation {
            field: "out",
            reason: "--out is required for this command".into(),
        }
        .into()),
    }
}

fn run_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg: RunConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn study(cli: &Cli, args: &StudyArgs, kind: StudyKind) -> anyhow::Result<()> {
    let cfg = run_config(cli)?;
    let out = out_dir(cli)?;
    let mut data = DataSource::open(&args.data.data, args.data.split.as_deref())?;
    let base = ExperimentPlan {
        name: args.name.clone().unwrap_or_else(|| format!("{kind:?}")),
        kind,
        grid: vec![GridEntry::new(cfg.train.loss.clone(), cfg.train.dataset)],
        model: cfg.model,
        train: cfg.train,
        output_dir: out.clone(),
    };
    let s = match kind {
        StudyKind::WeightAblation => run_weight_ablation(&base, &mut data)?,
        StudyKind::FflGrid => run_ffl_grid(&base, &mut data)?,
        StudyKind::LossMatrix => run_loss_matrix(&base, &mut data)?,
        StudyKind::Custom => bail!("custom studies are not exposed on the command line"),
    };
    println!("{} runs written to {}", s.runs.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Phantom {
            action: PhantomCmd::Generate { patients },
        } => {
            let spec: PhantomSpec = match &cli.config {
                Some(p) => read_json(p)?,
                None => PhantomSpec::default(),
            };
            let out = out_dir(cli)?;
            let catalog = generate_cohort(&spec, *patients, cli.seed.unwrap_or(0), &out)?;
            println!("{} patients written to {}", catalog.patients().len(), out.display());
        }
        Command::Dataset {
            action: DatasetCmd::Split { data, fractions },
        } => {
            let catalog = Catalog::load(data.join(CATALOG_FILE))?;
            let fr = [fractions[0], fractions[1], fractions[2]];
            let split = split_by_patient(&catalog, fr, cli.seed.unwrap_or(0))?;
            let path = cli.out.clone().unwrap_or_else(|| data.join(SPLIT_FILE));
            save_split(&split, &path)?;
            println!(
                "train {} / val {} / test {} patients -> {}",
                split.count(Split::Train),
                split.count(Split::Validation),
                split.count(Split::Test),
                path.display()
            );
        }
        Command::Preprocess {
            action: PreprocessCmd::Run { input, max_shift },
        } => {
            let out = out_dir(cli)?;
            let report = run_preprocess(input, &out, *max_shift)?;
            println!("{} patients preprocessed into {}", report.shifts.len(), out.display());
        }
        Command::Train(args) => {
            let cfg = run_config(cli)?;
            let out = out_dir(cli)?;
            let mut data = DataSource::open(&args.data.data, args.data.split.as_deref())?;
            let train_set = data.pairs(cfg.train.dataset, Split::Train)?;
            let val_set = data.pairs(cfg.train.dataset, Split::Validation)?;
            let outcome = train(
                &cfg.model,
                &cfg.train,
                &train_set,
                &val_set,
                &TrainOptions {
                    run_dir: Some(out.clone()),
                    resume: args.resume,
                    stop_after_epoch: None,
                },
            )?;
            let test = data.pairs(DatasetKind::All, Split::Test)?;
            let records = evaluate(
                &outcome.best,
                &test,
                &cfg.train.loss.id(),
                cfg.train.dataset,
                cfg.train.batch_size,
            )?;
            write_metrics(&records, &out)?;
            println!(
                "{} epochs (best {}), run written to {}",
                outcome.log.len(),
                outcome.best_epoch,
                out.display()
            );
        }
        Command::Evaluate { data, run } => {
            let mut source = DataSource::open(&data.data, data.split.as_deref())?;
            let records = evaluate_run(run, &mut source)?;
            println!("{} test slices evaluated", records.len());
        }
        Command::AblateWeights(args) => study(cli, args, StudyKind::WeightAblation)?,
        Command::AblateFfl(args) => study(cli, args, StudyKind::FflGrid)?,
        Command::LossMatrix(args) => study(cli, args, StudyKind::LossMatrix)?,
        Command::Report { study } => {
            let dir = match study {
                Some(d) => d.clone(),
                None => out_dir(cli)?,
            };
            let files = write_report(&dir)?;
            info!("report files: {files:?}");
            println!("{} report files written to {}", files.len(), dir.display());
        }
        Command::Panel {
            data,
            runs,
            patient,
            slice,
        } => {
            let out = out_dir(cli)?;
            let mut source = DataSource::open(&data.data, data.split.as_deref())?;
            let selector = match (patient, slice) {
                (Some(p), Some(s)) => SliceSelector::Slice {
                    patient_id: p.clone(),
                    slice_index: *s,
                },
                _ => SliceSelector::FirstArtifact,
            };
            let panel = render_reconstruction_panel(runs, &mut source, &selector, &out)?;
            let missing = panel.cells.iter().filter(|c| c.missing && c.col == 0).count();
            println!(
                "{}x{} panel for {} slice {} -> {} ({missing} missing)",
                panel.rows,
                panel.cols,
                panel.patient_id,
                panel.slice_index,
                out.display()
            );
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mardtn::Error>() {
        Some(e) if e.is_validation() => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
