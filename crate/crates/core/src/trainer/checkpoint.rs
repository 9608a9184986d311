//! Checkpoint file: one JSON manifest line, `\n`, then every tensor as raw
//! little-endian f32 in manifest order. The manifest carries a CRC32 of the
//! payload and a SHA-256 of the model configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamW, EarlyStopping};
use crate::dataio::write_atomic;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, NamedTensor};

pub const CHECKPOINT_FORMAT: &str = "mardtn-checkpoint-v1";

/// Hex SHA-256 of the canonical JSON of `config`.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("config serialises");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
}

/// Optimiser and early-stopping state needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub lr: f32,
    pub weight_decay: f32,
    pub adam_step: u64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub model_config: ModelConfig,
    pub config_hash: String,
    /// Completed epochs when written.
    pub epoch: usize,
    pub step: u64,
    pub val_loss: Option<f64>,
    pub val_psnr_art: Option<f64>,
    pub tensors: Vec<TensorEntry>,
    pub crc32: u32,
    pub resume: Option<ResumeState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamW>,
}

/// Metadata supplied by the caller; tensor list, hash and CRC are filled in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: u64,
    pub val_loss: Option<f64>,
    pub val_psnr_art: Option<f64>,
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    meta: &CheckpointMeta,
    resume: Option<(&AdamW, &EarlyStopping)>,
    path: impl AsRef<Path>,
) -> Result<CheckpointManifest> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut push = |kind: TensorKind, name: &str, shape: &[usize], data: &[f32]| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: shape.to_vec(),
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for t in &params.tensors {
        push(TensorKind::Param, &t.name, &t.shape, &t.data);
    }
    for t in &params.buffers {
        push(TensorKind::Buffer, &t.name, &t.shape, &t.data);
    }
    if let Some((opt, _)) = resume {
        for (t, m) in params.tensors.iter().zip(&opt.m) {
            push(TensorKind::AdamM, &t.name, &t.shape, m);
        }
        for (t, v) in params.tensors.iter().zip(&opt.v) {
            push(TensorKind::AdamV, &t.name, &t.shape, v);
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        model_config: params.config.clone(),
        config_hash: config_hash(&params.config),
        epoch: meta.epoch,
        step: meta.step,
        val_loss: meta.val_loss,
        val_psnr_art: meta.val_psnr_art,
        tensors,
        crc32: crc32fast::hash(&payload),
        resume: resume.map(|(opt, es)| ResumeState {
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            adam_step: opt.step,
            best_val_loss: es.best,
            best_epoch: es.best_epoch,
        }),
    };
    let mut bytes = serde_json::to_vec(&manifest)?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&payload);
    write_atomic(path.as_ref(), &bytes)?;
    Ok(manifest)
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corruption {
        path: path.into(),
        reason: reason.into(),
    }
}

/// Loads a checkpoint; with `expected`, the stored configuration hash must
/// match it.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format {
        path: path.into(),
        reason: "no manifest line".into(),
    })?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format {
        path: path.into(),
        reason: format!("manifest: {e}"),
    })?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("unknown format {:?}", manifest.format),
        });
    }
    let own_hash = config_hash(&manifest.model_config);
    if own_hash != manifest.config_hash {
        return Err(corrupt(path, "manifest config hash does not match its config"));
    }
    if let Some(cfg) = expected {
        let want = config_hash(cfg);
        if want != manifest.config_hash {
            return Err(Error::ConfigMismatch {
                expected: want,
                found: manifest.config_hash,
            });
        }
    }
    let payload = &bytes[nl + 1..];
    let expected_len: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != expected_len {
        return Err(corrupt(
            path,
            format!("payload is {} bytes, manifest implies {expected_len}", payload.len()),
        ));
    }
    if crc32fast::hash(payload) != manifest.crc32 {
        return Err(corrupt(path, "payload checksum mismatch"));
    }

    let arch = crate::model::Architecture::new(&manifest.model_config)?;
    let mut params = ModelParams {
        config: manifest.model_config.clone(),
        tensors: Vec::new(),
        buffers: Vec::new(),
    };
    let (mut m, mut v) = (Vec::new(), Vec::new());
    let mut offset = 0;
    for entry in &manifest.tensors {
        let len: usize = entry.shape.iter().product();
        let data: Vec<f32> = payload[offset..offset + 4 * len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += 4 * len;
        match entry.kind {
            TensorKind::Param => params.tensors.push(NamedTensor {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                data,
            }),
            TensorKind::Buffer => params.buffers.push(NamedTensor {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                data,
            }),
            TensorKind::AdamM => m.push(data),
            TensorKind::AdamV => v.push(data),
        }
    }
    let matches = |got: &[NamedTensor<f32>], specs: &[crate::model::ParamSpec]| {
        got.len() == specs.len() && got.iter().zip(specs).all(|(t, s)| t.name == s.name && t.shape == s.shape)
    };
    if !matches(&params.tensors, arch.param_specs()) || !matches(&params.buffers, arch.buffer_specs()) {
        return Err(corrupt(path, "tensor list does not match the stored architecture"));
    }
    let optimizer = match &manifest.resume {
        Some(r) => {
            if m.len() != params.tensors.len() || v.len() != params.tensors.len() {
                return Err(corrupt(path, "resume state without complete optimiser moments"));
            }
            Some(AdamW {
                lr: r.lr,
                weight_decay: r.weight_decay,
                step: r.adam_step,
                m,
                v,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        manifest,
        params,
        optimizer,
    })
}
