//! Synthetic paired kVCT/MVCT head-and-neck phantoms with dental implants.

pub mod radon;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    self, write_atomic, Catalog, CatalogEntry, HUVolume, LabelEntry, LabelVolume, Modality, Region,
};
use crate::error::{Error, Result};
use crate::preprocess::translate_volume;
use crate::rng::{derive_seed, rng_for};

pub use radon::{corrupt_and_reconstruct, fbp_reconstruct, forward_project, CorruptedSlice, Reconstruction, Sinogram};

pub const AIR_HU: f64 = -1000.0;
pub const SOFT_TISSUE_HU: f64 = 40.0;
/// MVCT streaks are this fraction of the kVCT severity.
pub const MV_SEVERITY_SCALE: f64 = 0.1;
/// Highest non-metal value an MVCT voxel may take.
pub const MV_TISSUE_CEILING_HU: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub n_slices: usize,
    /// Fractions of slices labelled (head, neck, body), top to bottom.
    pub region_fractions: [f64; 3],
    /// Metal inserts per implant-bearing slice.
    pub n_implants: usize,
    pub implant_hu: f64,
    pub artifact_severity: f64,
    pub anatomy_seed_jitter: f64,
    pub noise_sigma_hu: f64,
    /// Fraction of head+neck slices that carry implants.
    pub implant_slice_fraction: f64,
    /// Projection count for the streak simulation; `3 * image_size` if unset.
    pub n_angles: Option<usize>,
    /// Largest in-plane offset injected between written kVCT and MVCT volumes.
    pub max_misalignment_px: usize,
    pub pixel_spacing_mm: f64,
    pub slice_thickness_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            image_size: 64,
            n_slices: 30,
            region_fractions: [0.5, 0.2, 0.3],
            n_implants: 2,
            implant_hu: 3500.0,
            artifact_severity: 0.8,
            anatomy_seed_jitter: 0.05,
            noise_sigma_hu: 10.0,
            implant_slice_fraction: 0.15,
            n_angles: None,
            max_misalignment_px: 3,
            pixel_spacing_mm: 1.074,
            slice_thickness_mm: 2.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.region_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.region_fractions.iter().any(|&f| f < 0.0) {
            return Err(Error::invalid(
                "region_fractions",
                format!("must be non-negative and sum to 1, got {:?}", self.region_fractions),
            ));
        }
        if self.image_size < 16 || self.image_size % 2 != 0 {
            return Err(Error::invalid("image_size", format!("{} must be even and >= 16", self.image_size)));
        }
        if self.n_slices == 0 {
            return Err(Error::invalid("n_slices", "must be positive"));
        }
        if !(self.implant_hu > 2000.0) {
            return Err(Error::invalid("implant_hu", format!("{} must exceed 2000 HU", self.implant_hu)));
        }
        if !(0.0..=1.0).contains(&self.artifact_severity) {
            return Err(Error::invalid("artifact_severity", format!("{} outside [0, 1]", self.artifact_severity)));
        }
        if !(0.0..=0.5).contains(&self.anatomy_seed_jitter) {
            return Err(Error::invalid("anatomy_seed_jitter", "must lie in [0, 0.5]"));
        }
        if !(self.noise_sigma_hu >= 0.0) {
            return Err(Error::invalid("noise_sigma_hu", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.implant_slice_fraction) {
            return Err(Error::invalid("implant_slice_fraction", "must lie in [0, 1]"));
        }
        if self.n_angles == Some(0) {
            return Err(Error::invalid("n_angles", "must be positive"));
        }
        if !(self.pixel_spacing_mm > 0.0) || !(self.slice_thickness_mm > 0.0) {
            return Err(Error::invalid("pixel_spacing_mm", "spacing and thickness must be positive"));
        }
        Ok(())
    }

    pub fn angles(&self) -> usize {
        self.n_angles.unwrap_or(3 * self.image_size)
    }

    /// Per-slice region labels, head at slice 0.
    pub fn region_labels(&self) -> Vec<Region> {
        let n = self.n_slices;
        let head = ((self.region_fractions[0] * n as f64).round() as usize).min(n);
        let neck = ((self.region_fractions[1] * n as f64).round() as usize).min(n - head);
        (0..n)
            .map(|z| {
                if z < head {
                    Region::Head
                } else if z < head + neck {
                    Region::Neck
                } else {
                    Region::Body
                }
            })
            .collect()
    }

    /// Indices of implant-bearing slices: the lowest head slices (dentition).
    pub fn implant_slices(&self) -> Vec<usize> {
        if self.n_implants == 0 {
            return Vec::new();
        }
        let labels = self.region_labels();
        let head = labels.iter().filter(|&&r| r == Region::Head).count();
        let head_neck = labels.iter().filter(|&&r| r != Region::Body).count();
        let n = ((self.implant_slice_fraction * head_neck as f64).round() as usize).min(head);
        (head - n..head).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientVolumePair {
    pub patient_id: String,
    pub kv: HUVolume,
    pub mv: HUVolume,
    pub body_mask: Array3<bool>,
    pub region_labels: Vec<Region>,
    pub implant_masks: Array3<bool>,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    hu: f64,
}

impl Ellipse {
    fn contains(&self, r: usize, q: usize) -> bool {
        let x = (q as f64 - self.cx) / self.ax;
        let y = (r as f64 - self.cy) / self.ay;
        x * x + y * y <= 1.0
    }

    fn shrunk(&self, by: f64, hu: f64) -> Ellipse {
        Ellipse {
            ax: (self.ax - by).max(0.5),
            ay: (self.ay - by).max(0.5),
            hu,
            ..*self
        }
    }
}

fn paint(img: &mut Array2<f64>, e: &Ellipse) {
    for ((r, q), v) in img.indexed_iter_mut() {
        if e.contains(r, q) {
            *v = e.hu;
        }
    }
}

/// Per-patient anatomy parameters drawn once from the seed.
struct Anatomy {
    d: f64,
    cx: f64,
    cy: f64,
    sx: f64,
    sy: f64,
    skull_hu: f64,
    tooth_hu: f64,
    vertebra_hu: f64,
    brain_hu: f64,
    soft_hu: f64,
    fat_hu: f64,
    implant_teeth: Vec<usize>,
}

const N_TEETH: usize = 10;

impl Anatomy {
    fn draw(spec: &PhantomSpec, rng: &mut impl Rng) -> Self {
        let d = spec.image_size as f64;
        let j = spec.anatomy_seed_jitter;
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let scale = |lo: f64, hi: f64, rng: &mut _| (1.0 + j * unit.sample(rng)).clamp(lo, hi);
        let sx = scale(0.88, 1.06, rng);
        let sy = scale(0.88, 1.06, rng);
        let offset = |rng: &mut _| (j * 0.2 * d * unit.sample(rng)).clamp(-0.02 * d, 0.02 * d);
        let cx = (d - 1.0) / 2.0 + offset(rng);
        let cy = (d - 1.0) / 2.0 + offset(rng);
        let mut teeth: Vec<usize> = (0..N_TEETH).collect();
        for i in 0..N_TEETH {
            let k = rng.random_range(i..N_TEETH);
            teeth.swap(i, k);
        }
        teeth.truncate(spec.n_implants.min(N_TEETH));
        teeth.sort_unstable();
        Anatomy {
            d,
            cx,
            cy,
            sx,
            sy,
            skull_hu: rng.random_range(1000.0..1400.0),
            tooth_hu: rng.random_range(1300.0..1500.0),
            vertebra_hu: rng.random_range(700.0..1000.0),
            brain_hu: rng.random_range(30.0..45.0),
            soft_hu: rng.random_range(35.0..50.0),
            fat_hu: rng.random_range(-110.0..-80.0),
            implant_teeth: teeth,
        }
    }

    fn at(&self, dx: f64, dy: f64, ax: f64, ay: f64, hu: f64) -> Ellipse {
        Ellipse {
            cx: self.cx + dx * self.d,
            cy: self.cy + dy * self.d,
            ax: ax * self.d,
            ay: ay * self.d,
            hu,
        }
    }

    fn tooth(&self, k: usize) -> (f64, f64) {
        // anterior arc, from the left molars round to the right molars
        let t = PI * (1.1 + 0.8 * k as f64 / (N_TEETH - 1) as f64);
        (0.19 * self.sx * t.cos(), -0.03 + 0.21 * self.sy * t.sin())
    }

    /// Returns (clean HU image, body outline, implant mask).
    fn slice(&self, region: Region, u: f64, jaw: bool, implants: bool, implant_hu: f64) -> (Array2<f64>, Array2<bool>, Array2<bool>) {
        let n = self.d as usize;
        let mut img = Array2::from_elem((n, n), AIR_HU);
        let mut implant = Array2::from_elem((n, n), false);
        let outline = match region {
            Region::Head if !jaw => {
                let f = 0.78 + 0.22 * (u / 0.6).min(1.0);
                let outer = self.at(0.0, 0.0, 0.36 * self.sx * f, 0.43 * self.sy * f, self.skull_hu);
                paint(&mut img, &outer);
                paint(&mut img, &outer.shrunk(0.045 * self.d, self.brain_hu));
                if (0.3..0.65).contains(&u) {
                    paint(&mut img, &self.at(-0.05, 0.0, 0.03, 0.08, 10.0));
                    paint(&mut img, &self.at(0.05, 0.0, 0.03, 0.08, 10.0));
                }
                if u > 0.5 {
                    paint(&mut img, &self.at(0.0, -0.22 * f, 0.07, 0.05, AIR_HU));
                }
                outer
            }
            Region::Head => {
                let outer = self.at(0.0, 0.0, 0.33 * self.sx, 0.38 * self.sy, self.soft_hu);
                paint(&mut img, &outer);
                let ring = self.at(0.0, -0.03, 0.25 * self.sx, 0.27 * self.sy, self.skull_hu);
                let inner = ring.shrunk(0.05 * self.d, self.soft_hu);
                for ((r, q), v) in img.indexed_iter_mut() {
                    if ring.contains(r, q) && !inner.contains(r, q) && (r as f64) < ring.cy + 0.02 * self.d {
                        *v = ring.hu;
                    }
                }
                paint(&mut img, &self.at(0.0, -0.02, 0.1, 0.06, AIR_HU));
                paint(&mut img, &self.at(0.0, 0.2, 0.07, 0.06, self.vertebra_hu));
                paint(&mut img, &self.at(0.0, 0.09, 0.05, 0.03, AIR_HU));
                for k in 0..N_TEETH {
                    let (dx, dy) = self.tooth(k);
                    let metal = implants && self.implant_teeth.contains(&k);
                    let e = if metal {
                        self.at(dx, dy, 0.03, 0.03, implant_hu)
                    } else {
                        self.at(dx, dy, 0.025, 0.025, self.tooth_hu)
                    };
                    paint(&mut img, &e);
                    if metal {
                        for ((r, q), m) in implant.indexed_iter_mut() {
                            if e.contains(r, q) {
                                *m = true;
                            }
                        }
                    }
                }
                outer
            }
            Region::Neck => {
                let outer = self.at(0.0, 0.0, 0.27 * self.sx, 0.25 * self.sy, self.soft_hu);
                paint(&mut img, &outer);
                paint(&mut img, &self.at(-0.15, 0.02, 0.06, 0.1, self.fat_hu));
                paint(&mut img, &self.at(0.15, 0.02, 0.06, 0.1, self.fat_hu));
                paint(&mut img, &self.at(0.0, 0.1, 0.07 - 0.01 * u, 0.06, self.vertebra_hu));
                paint(&mut img, &self.at(0.0, 0.1, 0.025, 0.02, 30.0));
                paint(&mut img, &self.at(0.0, -0.1, 0.045, 0.04, AIR_HU));
                outer
            }
            Region::Body => {
                let outer = self.at(0.0, 0.0, 0.45 * self.sx.min(1.0), 0.3 * self.sy, self.soft_hu);
                paint(&mut img, &outer);
                paint(&mut img, &self.at(-0.2, -0.02, 0.13, 0.18 + 0.02 * u, -800.0));
                paint(&mut img, &self.at(0.2, -0.02, 0.13, 0.18 + 0.02 * u, -800.0));
                paint(&mut img, &self.at(0.0, 0.2, 0.06, 0.05, self.vertebra_hu));
                outer
            }
        };
        let body = Array2::from_shape_fn((n, n), |(r, q)| outline.contains(r, q));
        (img, body, implant)
    }
}

/// Maps kVCT tissue values to MVCT: soft tissue contrast reduced around
/// 40 HU, bone compressed, air preserved. Monotone and continuous.
pub fn mvct_contrast(hu: f64) -> f64 {
    let soft = |v: f64| 0.85 * (v - SOFT_TISSUE_HU) + SOFT_TISSUE_HU;
    if hu < -200.0 {
        let lo = soft(-200.0);
        AIR_HU + (hu - AIR_HU) * (lo - AIR_HU) / (-200.0 - AIR_HU)
    } else if hu <= 200.0 {
        soft(hu)
    } else {
        soft(200.0) + 0.5 * (hu - 200.0)
    }
}

fn to_hu(v: f64) -> i16 {
    v.round().clamp(dataio::HU_MIN as f64, i16::MAX as f64) as i16
}

/// Builds one synthetic patient. Pure function of `(spec, seed)`.
pub fn generate_patient(spec: &PhantomSpec, seed: u64) -> Result<PatientVolumePair> {
    spec.validate()?;
    let mut rng = rng_for(seed, &[0]);
    let anatomy = Anatomy::draw(spec, &mut rng);
    let d = spec.image_size;
    let n = spec.n_slices;
    let labels = spec.region_labels();
    let implant_slices = spec.implant_slices();
    let head = labels.iter().filter(|&&r| r == Region::Head).count();
    let neck = labels.iter().filter(|&&r| r == Region::Neck).count();
    let jaw_from = head - ((0.35 * head as f64).ceil() as usize).max(implant_slices.len()).min(head);
    let noise = Normal::new(0.0, spec.noise_sigma_hu.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let mut kv = Array3::<i16>::zeros((n, d, d));
    let mut mv = Array3::<i16>::zeros((n, d, d));
    let mut body_mask = Array3::from_elem((n, d, d), false);
    let mut implant_masks = Array3::from_elem((n, d, d), false);

    for z in 0..n {
        let region = labels[z];
        let (u, jaw) = match region {
            Region::Head if z >= jaw_from => ((z - jaw_from) as f64 / (head - jaw_from).max(1) as f64, true),
            Region::Head => (z as f64 / jaw_from.max(1) as f64, false),
            Region::Neck => ((z - head) as f64 / neck.max(1) as f64, false),
            Region::Body => ((z - head - neck) as f64 / (n - head - neck).max(1) as f64, false),
        };
        let has_implant = implant_slices.contains(&z);
        let (clean, body, implant) = anatomy.slice(region, u, jaw, has_implant, spec.implant_hu);

        let mut kv_slice = clean.clone();
        let mut mv_slice = clean.mapv(mvct_contrast);
        ndarray::Zip::from(&mut mv_slice).and(&implant).and(&clean).for_each(|m, &metal, &c| {
            if metal {
                *m = 0.85 * (c - SOFT_TISSUE_HU) + SOFT_TISSUE_HU;
            }
        });

        if has_implant && spec.artifact_severity > 0.0 {
            let attenuation = clean.mapv(|v| v - AIR_HU);
            let n_angles = spec.angles();
            let reference = corrupt_and_reconstruct(&attenuation, &implant, 0.0, n_angles)?.image;
            let kv_streaks = corrupt_and_reconstruct(&attenuation, &implant, spec.artifact_severity, n_angles)?.image - &reference;
            let mv_streaks = corrupt_and_reconstruct(
                &attenuation,
                &implant,
                spec.artifact_severity * MV_SEVERITY_SCALE,
                n_angles,
            )?
            .image
                - &reference;
            kv_slice += &kv_streaks;
            mv_slice.scaled_add(0.85, &mv_streaks);
        }

        if spec.noise_sigma_hu > 0.0 {
            for ((k, m), &b) in kv_slice.iter_mut().zip(mv_slice.iter_mut()).zip(body.iter()) {
                if b {
                    *k += noise.sample(&mut rng);
                    *m += noise.sample(&mut rng);
                }
            }
        }
        ndarray::Zip::from(&mut mv_slice).and(&implant).for_each(|m, &metal| {
            if !metal {
                *m = m.min(MV_TISSUE_CEILING_HU);
            }
        });

        kv.slice_mut(s![z, .., ..]).assign(&kv_slice.mapv(to_hu));
        mv.slice_mut(s![z, .., ..]).assign(&mv_slice.mapv(to_hu));
        body_mask.slice_mut(s![z, .., ..]).assign(&body);
        implant_masks.slice_mut(s![z, .., ..]).assign(&implant);
    }

    let patient_id = format!("S{seed:016x}");
    let volume = |modality, voxels| HUVolume {
        patient_id: patient_id.clone(),
        modality,
        voxels,
        pixel_spacing_mm: [spec.pixel_spacing_mm; 2],
        slice_thickness_mm: spec.slice_thickness_mm,
    };
    Ok(PatientVolumePair {
        kv: volume(Modality::Kvct, kv),
        mv: volume(Modality::Mvct, mv),
        patient_id: patient_id.clone(),
        body_mask,
        region_labels: labels,
        implant_masks,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub spec: PhantomSpec,
    pub seed: u64,
    /// Ground-truth (z, y, x) offsets applied to each written MVCT volume.
    pub injected_shifts: BTreeMap<String, [i32; 3]>,
}

pub fn patient_id(index: usize) -> String {
    format!("P{index:03}")
}

/// Generates `n_patients` phantoms into `out_dir` with a catalog.
///
/// The MVCT volume of each patient is written with a random in-plane rigid
/// offset so that alignment has something to recover.
pub fn generate_cohort(spec: &PhantomSpec, n_patients: usize, seed: u64, out_dir: &Path) -> Result<Catalog> {
    spec.validate()?;
    if n_patients == 0 {
        return Err(Error::invalid("patients", "must be positive"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut catalog = Catalog::default();
    let mut shifts = BTreeMap::new();
    let m = spec.max_misalignment_px as i32;
    for i in 0..n_patients {
        let pid = patient_id(i);
        let mut pair = generate_patient(spec, derive_seed(seed, &[i as u64]))?;
        pair.kv.patient_id = pid.clone();
        pair.mv.patient_id = pid.clone();
        let mut rng = rng_for(seed, &[i as u64, 1]);
        let shift = [0, rng.random_range(-m..=m), rng.random_range(-m..=m)];
        pair.mv.voxels = translate_volume(&pair.mv.voxels, shift, AIR_HU as i16);
        shifts.insert(pid.clone(), shift);

        for vol in [&pair.kv, &pair.mv] {
            let rel = format!("{pid}_{}.vol", vol.modality);
            let checksum = dataio::write_volume(vol, out_dir.join(&rel))?;
            catalog.entries.push(CatalogEntry {
                patient_id: pid.clone(),
                modality: vol.modality,
                path: rel,
                n_slices: vol.n_slices(),
                region_labels: pair.region_labels.clone(),
                artifact_flags: None,
                checksum,
            });
        }
        let rel = format!("{pid}_labels.vol");
        let labels = LabelVolume::from_masks(&pid, &pair.body_mask, &pair.implant_masks);
        let checksum = dataio::write_labels(&labels, pair.kv.pixel_spacing_mm, pair.kv.slice_thickness_mm, out_dir.join(&rel))?;
        catalog.labels.push(LabelEntry {
            patient_id: pid,
            path: rel,
            checksum,
        });
    }
    catalog.save(out_dir.join(dataio::CATALOG_FILE))?;
    let manifest = CohortManifest {
        spec: spec.clone(),
        seed,
        injected_shifts: shifts,
    };
    write_atomic(&out_dir.join("cohort.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(catalog)
}
