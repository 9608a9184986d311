use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_atomic, Modality, Region};
use crate::error::{Error, Result};

pub const CATALOG_FILE: &str = "catalog.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub patient_id: String,
    pub modality: Modality,
    /// Relative to the catalog's directory.
    pub path: String,
    pub n_slices: usize,
    pub region_labels: Vec<Region>,
    /// Filled in by preprocessing from raw HU.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_flags: Option<Vec<bool>>,
    pub checksum: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub patient_id: String,
    pub path: String,
    pub checksum: u32,
}

/// One preprocessed stack of head/neck slice pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub patient_id: String,
    pub path: String,
    pub checksum: u32,
    /// Slice index in the source volume for each stacked pair.
    pub slice_indices: Vec<usize>,
    pub regions: Vec<Region>,
    pub artifact_flags: Vec<bool>,
    /// Translation (z, y, x) applied to the MVCT volume during alignment.
    pub mv_shift: [i32; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
    #[serde(default)]
    pub labels: Vec<LabelEntry>,
    #[serde(default)]
    pub pairs: Vec<PairEntry>,
}

impl Catalog {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let catalog: Catalog = serde_json::from_slice(&text)?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        write_atomic(path.as_ref(), &serde_json::to_vec_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        for pid in self.patients() {
            let mods: Vec<Modality> = self
                .entries
                .iter()
                .filter(|e| e.patient_id == pid)
                .map(|e| e.modality)
                .collect();
            if mods.len() != 2 || !mods.contains(&Modality::Kvct) || !mods.contains(&Modality::Mvct) {
                return Err(Error::invalid(
                    "catalog",
                    format!("patient {pid} needs exactly one kVCT and one MVCT entry, found {mods:?}"),
                ));
            }
        }
        for e in &self.entries {
            if e.region_labels.len() != e.n_slices {
                return Err(Error::invalid(
                    "region_labels",
                    format!("{} {}: {} labels for {} slices", e.patient_id, e.modality, e.region_labels.len(), e.n_slices),
                ));
            }
            if let Some(flags) = &e.artifact_flags {
                if flags.len() != e.n_slices {
                    return Err(Error::invalid(
                        "artifact_flags",
                        format!("{} {}: {} flags for {} slices", e.patient_id, e.modality, flags.len(), e.n_slices),
                    ));
                }
            }
        }
        for p in &self.pairs {
            let n = p.slice_indices.len();
            if p.regions.len() != n || p.artifact_flags.len() != n {
                return Err(Error::invalid("pairs", format!("{}: inconsistent per-slice metadata", p.patient_id)));
            }
        }
        Ok(())
    }

    /// Sorted, de-duplicated patient ids.
    pub fn patients(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.patient_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn entry(&self, patient_id: &str, modality: Modality) -> Option<&CatalogEntry> {
        self.entries
            .iter()
            .find(|e| e.patient_id == patient_id && e.modality == modality)
    }

    pub fn labels_for(&self, patient_id: &str) -> Option<&LabelEntry> {
        self.labels.iter().find(|e| e.patient_id == patient_id)
    }

    pub fn pairs_for(&self, patient_id: &str) -> Option<&PairEntry> {
        self.pairs.iter().find(|e| e.patient_id == patient_id)
    }
}

/// Resolves a catalog-relative path.
pub fn resolve(catalog_dir: &Path, rel: &str) -> PathBuf {
    catalog_dir.join(rel)
}
