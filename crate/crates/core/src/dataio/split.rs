use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Catalog, Modality, Region};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "Tr")]
    Train,
    #[serde(rename = "Val")]
    Validation,
    #[serde(rename = "Ts")]
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "Tr",
            Split::Validation => "Val",
            Split::Test => "Ts",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "D_All")]
    All,
    #[serde(rename = "D_Art")]
    Art,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::All => "D_All",
            DatasetKind::Art => "D_Art",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitAssignment {
    pub fn patients_in(&self, split: Split) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|&&s| s == split).count()
    }
}

/// Patient counts for (train, validation, test).
///
/// Train and validation take `floor(fraction * n)`; the rounding remainder
/// lands in test, so 52 patients at (0.7, 0.2, 0.1) give 36/10/6. Every split
/// keeps at least one patient, borrowed from train if needed.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let floor = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
    let mut train = floor(fractions[0]).min(n);
    let mut val = floor(fractions[1]).min(n - train);
    if val == 0 {
        val = 1;
        train -= 1;
    }
    if n - train - val == 0 {
        train -= 1;
    }
    [train, val, n - train - val]
}

pub fn split_by_patient(catalog: &Catalog, fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "fractions",
            format!("need three positive fractions summing to 1, got {fractions:?}"),
        ));
    }
    let mut patients = catalog.patients();
    if patients.len() < 3 {
        return Err(Error::invalid(
            "catalog",
            format!("{} patients cannot populate train/validation/test", patients.len()),
        ));
    }
    let [n_train, n_val, _] = split_counts(patients.len(), fractions);
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = patients
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
            (p, s)
        })
        .collect();
    Ok(SplitAssignment {
        assignment,
        fractions,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceRef {
    pub patient_id: String,
    pub slice_index: usize,
    pub is_artifact: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Datasets {
    sets: BTreeMap<(DatasetKind, Split), Vec<SliceRef>>,
}

impl Datasets {
    pub fn get(&self, kind: DatasetKind, split: Split) -> &[SliceRef] {
        self.sets.get(&(kind, split)).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Partitions head/neck slices into D_All and its artifact subset D_Art,
/// per split. Body-region slices are dropped.
pub fn build_datasets(catalog: &Catalog, split: &SplitAssignment) -> Result<Datasets> {
    let mut sets: BTreeMap<(DatasetKind, Split), Vec<SliceRef>> = BTreeMap::new();
    for kind in [DatasetKind::All, DatasetKind::Art] {
        for s in [Split::Train, Split::Validation, Split::Test] {
            sets.insert((kind, s), Vec::new());
        }
    }
    for pid in catalog.patients() {
        let Some(&s) = split.assignment.get(&pid) else {
            return Err(Error::Missing(format!("patient {pid} has no split assignment")));
        };
        let entry = catalog
            .entry(&pid, Modality::Kvct)
            .ok_or_else(|| Error::Missing(format!("kVCT entry for {pid}")))?;
        let flags = entry
            .artifact_flags
            .as_ref()
            .ok_or_else(|| Error::Missing(format!("artifact flags for {pid}; run preprocessing first")))?;
        for (i, (&region, &flag)) in entry.region_labels.iter().zip(flags).enumerate() {
            if region == Region::Body {
                continue;
            }
            let r = SliceRef {
                patient_id: pid.clone(),
                slice_index: i,
                is_artifact: flag,
            };
            if flag {
                sets.get_mut(&(DatasetKind::Art, s)).unwrap().push(r.clone());
            }
            sets.get_mut(&(DatasetKind::All, s)).unwrap().push(r);
        }
    }
    Ok(Datasets { sets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::CatalogEntry;

    fn catalog(n: usize) -> Catalog {
        let regions = vec![Region::Head, Region::Head, Region::Neck, Region::Body];
        let flags = vec![false, true, true, true];
        let entries = (0..n)
            .flat_map(|i| {
                [Modality::Kvct, Modality::Mvct].map(|m| CatalogEntry {
                    patient_id: format!("P{i:03}"),
                    modality: m,
                    path: format!("P{i:03}_{m}.vol"),
                    n_slices: 4,
                    region_labels: regions.clone(),
                    artifact_flags: Some(flags.clone()),
                    checksum: 0,
                })
            })
            .collect();
        Catalog {
            entries,
            ..Default::default()
        }
    }

    #[test]
    fn table_counts() {
        assert_eq!(split_counts(52, [0.7, 0.2, 0.1]), [36, 10, 6]);
        assert_eq!(split_counts(10, [0.7, 0.2, 0.1]), [7, 2, 1]);
        assert_eq!(split_counts(3, [0.7, 0.2, 0.1]), [1, 1, 1]);
    }

    #[test]
    fn deterministic_per_seed() {
        let c = catalog(10);
        let a = split_by_patient(&c, [0.7, 0.2, 0.1], 5).unwrap();
        let b = split_by_patient(&c, [0.7, 0.2, 0.1], 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(Split::Train), 7);
        assert_eq!(a.count(Split::Validation), 2);
        assert_eq!(a.count(Split::Test), 1);
    }

    #[test]
    fn too_few_patients() {
        assert!(split_by_patient(&catalog(2), [0.7, 0.2, 0.1], 0).is_err());
    }

    #[test]
    fn bad_fractions() {
        assert!(split_by_patient(&catalog(5), [0.7, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn body_excluded_and_art_subset() {
        let c = catalog(6);
        let s = split_by_patient(&c, [0.5, 0.3, 0.2], 1).unwrap();
        let d = build_datasets(&c, &s).unwrap();
        for split in [Split::Train, Split::Validation, Split::Test] {
            let all = d.get(DatasetKind::All, split);
            let art = d.get(DatasetKind::Art, split);
            assert!(all.iter().all(|r| r.slice_index != 3));
            assert!(art.iter().all(|r| all.contains(r)));
            // slice 2 is an artifact-flagged neck slice
            assert!(art.iter().any(|r| r.slice_index == 2));
            assert_eq!(all.len(), 3 * s.count(split));
            assert_eq!(art.len(), 2 * s.count(split));
        }
    }

    #[test]
    fn missing_flags_rejected() {
        let mut c = catalog(3);
        c.entries[0].artifact_flags = None;
        let s = split_by_patient(&c, [0.4, 0.3, 0.3], 1).unwrap();
        assert!(build_datasets(&c, &s).is_err());
    }
}
