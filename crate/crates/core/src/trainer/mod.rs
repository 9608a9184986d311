//! AdamW training with paired augmentation, validation-loss early stopping,
//! checkpoints and resume.

mod augment;
mod checkpoint;
mod optim;

pub use augment::{apply_augment, augment_pair, sample_augment, Affine, AugmentDraw, AugmentSpec};
pub use checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, CheckpointMeta, ResumeState,
    TensorEntry, TensorKind, CHECKPOINT_FORMAT,
};
pub use optim::{AdamW, EarlyStopping};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{write_atomic, DatasetKind};
use crate::error::{Error, Result};
use crate::losses::{build_weight_map, combine, combine_grad, LossSpec, LossTerm};
use crate::metrics::masked_psnr;
use crate::model::{init_params, Architecture, Mode, ModelConfig, ModelParams, Tensor};
use crate::preprocess::SlicePair;
use crate::rng::{derive_seed, rng_for};

pub const BN_MOMENTUM: f64 = 0.1;
pub const LOG_FILE: &str = "log.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const BEST_CHECKPOINT: &str = "checkpoints/best.ckpt";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.ckpt";
pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,val_psnr_art";

// rng stream tags
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub augment: AugmentSpec,
    pub loss: LossSpec,
    pub dataset: DatasetKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            batch_size: 4,
            max_epochs: 20,
            patience: 5,
            seed: 0,
            augment: AugmentSpec::default(),
            loss: LossSpec::new(&[LossTerm::L1w, LossTerm::Ssim]),
            dataset: DatasetKind::All,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate", "must be a non-negative number"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid("weight_decay", "must be a non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs", "must be at least 1"));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::invalid(
                "patience",
                format!("{} not in 1..={}", self.patience, self.max_epochs),
            ));
        }
        self.augment.validate()?;
        self.loss.validate()
    }
}

/// Everything needed to reproduce a run; stored as the run's `config.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_psnr_art: Option<f64>,
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            crate::metrics::fmt_opt(r.val_psnr_art, 4)
        );
    }
    s
}

fn parse_log(text: &str, path: &Path) -> Result<Vec<EpochLog>> {
    let bad = |line: &str| Error::Format {
        path: path.into(),
        reason: format!("bad log line {line:?}"),
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(line));
            }
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad(line))?,
                train_loss: f[1].parse().map_err(|_| bad(line))?,
                val_loss: f[2].parse().map_err(|_| bad(line))?,
                val_psnr_art: if f[3].is_empty() {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| bad(line))?)
                },
            })
        })
        .collect()
}

fn batch_tensor(pairs: &[&SlicePair], pick: impl Fn(&SlicePair) -> &Array2<f32>) -> Tensor<f32> {
    let (h, w) = pairs[0].kv.dim();
    let mut data = Vec::with_capacity(pairs.len() * h * w);
    for p in pairs {
        data.extend(pick(p).iter().copied());
    }
    Tensor::from_vec([pairs.len(), 1, h, w], data)
}

fn plane(t: &Tensor<f32>, s: usize) -> Array2<f64> {
    let [_, _, h, w] = t.shape;
    Array2::from_shape_vec((h, w), t.sample(s).iter().map(|&v| v as f64).collect()).expect("shape")
}

/// Evaluation-mode predictions, in input order.
pub fn predict(params: &ModelParams<f32>, pairs: &[SlicePair], batch_size: usize) -> Result<Vec<Array2<f32>>> {
    let arch = Architecture::new(&params.config)?;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refs: Vec<&SlicePair> = chunk.iter().collect();
        let y = arch.forward(params, &batch_tensor(&refs, |p| &p.kv), Mode::Eval)?;
        let [_, _, h, w] = y.shape;
        for s in 0..chunk.len() {
            out.push(Array2::from_shape_vec((h, w), y.sample(s).to_vec()).expect("shape"));
        }
    }
    Ok(out)
}

/// Mean validation loss and mean masked PSNR over validation artifact slices.
pub fn validation_metrics(
    params: &ModelParams<f32>,
    loss: &LossSpec,
    pairs: &[SlicePair],
    batch_size: usize,
) -> Result<(f64, Option<f64>)> {
    let preds = predict(params, pairs, batch_size)?;
    let mut total = 0.0;
    let (mut psnr_sum, mut psnr_n) = (0.0, 0usize);
    for (p, pair) in preds.iter().zip(pairs) {
        let pred = p.mapv(|v| v as f64);
        let gt = pair.mv.mapv(|v| v as f64);
        let wm = build_weight_map(&pair.body_mask, pair.is_artifact, loss.w)?;
        total += combine(loss, &pred, &gt, &wm)?;
        if pair.is_artifact {
            let psnr = masked_psnr(&pred, &gt, &pair.body_mask, 2.0)?;
            if !psnr.identical {
                psnr_sum += psnr.db;
                psnr_n += 1;
            }
        }
    }
    Ok((total / pairs.len() as f64, (psnr_n > 0).then(|| psnr_sum / psnr_n as f64)))
}

/// One model plus its optimiser.
pub struct Trainer {
    arch: Architecture,
    pub params: ModelParams<f32>,
    pub opt: AdamW,
    pub loss: LossSpec,
}

impl Trainer {
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let params = init_params::<f32>(model, derive_seed(train.seed, &[STREAM_INIT]))?;
        Self::from_params(params, train)
    }

    pub fn from_params(params: ModelParams<f32>, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let opt = AdamW::new(&params, train.learning_rate as f32, train.weight_decay as f32);
        Ok(Trainer {
            arch: Architecture::new(&params.config)?,
            params,
            opt,
            loss: train.loss.clone(),
        })
    }

    /// One optimiser step on `batch`; returns the mean loss before the step.
    pub fn step(&mut self, batch: &[SlicePair]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("batch", "empty batch"));
        }
        let refs: Vec<&SlicePair> = batch.iter().collect();
        let x = batch_tensor(&refs, |p| &p.kv);
        let (y, tape) = self.arch.forward_tape(&self.params, &x, Mode::Train)?;
        let n = batch.len() as f64;
        let mut dy = Tensor::zeros(y.shape);
        let mut total = 0.0;
        for (s, pair) in batch.iter().enumerate() {
            let gt = pair.mv.mapv(|v| v as f64);
            let wm = build_weight_map(&pair.body_mask, pair.is_artifact, self.loss.w)?;
            let (b, g) = combine_grad(&self.loss, &plane(&y, s), &gt, &wm)?;
            total += b.total;
            for (d, &gv) in dy.sample_mut(s).iter_mut().zip(g.iter()) {
                *d = (gv / n) as f32;
            }
        }
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch: 0 });
        }
        let grads = self.arch.backward(&self.params, &tape, &dy)?;
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { epoch: 0 });
        }
        self.opt.update(&mut self.params, &grads);
        self.arch.update_running_stats(&mut self.params, &tape, BN_MOMENTUM);
        Ok(loss)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where config, log and checkpoints go; `None` keeps everything in memory.
    pub run_dir: Option<PathBuf>,
    /// Continue from `checkpoints/last.ckpt` when it exists.
    pub resume: bool,
    /// Stop after this epoch as if interrupted (resume testing).
    pub stop_after_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParams<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

struct RunFiles {
    dir: PathBuf,
}

impl RunFiles {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }
}

/// Trains on `train` and early-stops on the total loss over `val`.
pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    train: &[SlicePair],
    val: &[SlicePair],
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Missing("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Missing("validation set is empty".into()));
    }
    let run_config = RunConfig {
        model: model.clone(),
        train: config.clone(),
    };
    let files = options.run_dir.as_ref().map(|d| RunFiles { dir: d.clone() });
    if let Some(f) = &files {
        fs::create_dir_all(f.path("checkpoints")).map_err(|e| Error::io(f.path("checkpoints"), e))?;
    }

    let mut trainer = Trainer::new(model, config)?;
    let mut es = EarlyStopping::new(config.patience);
    let mut log: Vec<EpochLog> = Vec::new();
    let mut best = trainer.params.clone();
    let mut start = 1;

    let resume_from = files
        .as_ref()
        .map(|f| f.path(LAST_CHECKPOINT))
        .filter(|p| options.resume && p.exists());
    if let (Some(f), Some(last)) = (&files, resume_from) {
        let stored = RunConfig::load(f.path(CONFIG_FILE))?;
        if stored != run_config {
            return Err(Error::ConfigMismatch {
                expected: serde_json::to_string(&run_config)?,
                found: serde_json::to_string(&stored)?,
            });
        }
        let ck = load_checkpoint(&last, Some(model))?;
        let resume = ck
            .manifest
            .resume
            .clone()
            .ok_or_else(|| Error::Missing(format!("{} has no optimiser state", last.display())))?;
        trainer.params = ck.params;
        trainer.opt = ck.optimizer.expect("resume state implies optimiser");
        es.best = resume.best_val_loss;
        es.best_epoch = resume.best_epoch;
        es.last_epoch = ck.manifest.epoch;
        let log_path = f.path(LOG_FILE);
        let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        log = parse_log(&text, &log_path)?;
        log.truncate(ck.manifest.epoch);
        best = load_checkpoint(f.path(BEST_CHECKPOINT), Some(model))?.params;
        start = ck.manifest.epoch + 1;
        info!("resuming after epoch {}", ck.manifest.epoch);
        if es.should_stop() {
            return Ok(TrainOutcome {
                best,
                log,
                best_epoch: es.best_epoch,
                stopped_early: true,
            });
        }
    } else if let Some(f) = &files {
        run_config.save(f.path(CONFIG_FILE))?;
    }

    let mut stopped_early = false;
    for epoch in start..=config.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<SlicePair> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = rng_for(config.seed, &[STREAM_AUGMENT, epoch as u64, i as u64]);
                    augment_pair(&train[i], &config.augment, &mut rng)
                })
                .collect();
            let loss = trainer.step(&batch).map_err(|e| match e {
                Error::Divergence { .. } => Error::Divergence { epoch },
                other => other,
            })?;
            sum += loss * chunk.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let (val_loss, val_psnr_art) = validation_metrics(&trainer.params, &config.loss, val, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} psnr_art {val_psnr_art:?}");
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_psnr_art,
        });
        let meta = CheckpointMeta {
            epoch,
            step: trainer.opt.step,
            val_loss: Some(val_loss),
            val_psnr_art,
        };
        if es.observe(epoch, val_loss) {
            best = trainer.params.clone();
            if let Some(f) = &files {
                save_checkpoint(&best, &meta, None, f.path(BEST_CHECKPOINT))?;
            }
        }
        if let Some(f) = &files {
            save_checkpoint(&trainer.params, &meta, Some((&trainer.opt, &es)), f.path(LAST_CHECKPOINT))?;
            write_atomic(&f.path(LOG_FILE), log_csv(&log).as_bytes())?;
        }
        if es.should_stop() {
            stopped_early = true;
            break;
        }
        if options.stop_after_epoch == Some(epoch) {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        log,
        best_epoch: es.best_epoch,
        stopped_early,
    })
}
