//! Alignment, HU normalization, background masking and artifact flags.

mod align;
mod pipeline;
mod resample;

pub use align::{rigid_align, translate_volume};
pub use pipeline::{load_pairs, run_preprocess, PreprocessReport};
pub use resample::{resample_to_grid, GridSpec};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataio::{Modality, Region};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub lower_hu: f64,
    pub upper_hu_kv: f64,
    pub upper_hu_mv: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        NormalizationSpec {
            lower_hu: -1000.0,
            upper_hu_kv: 2000.0,
            upper_hu_mv: 1000.0,
        }
    }
}

impl NormalizationSpec {
    pub fn upper(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Kvct => self.upper_hu_kv,
            Modality::Mvct => self.upper_hu_mv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lower_hu < self.upper_hu_kv && self.lower_hu < self.upper_hu_mv) {
            return Err(Error::invalid("normalization", "lower threshold must be below both upper thresholds"));
        }
        Ok(())
    }

    /// Clips to `[lower, upper]` and maps affinely onto `[-1, 1]`.
    pub fn normalize_value(&self, hu: f64, modality: Modality) -> f64 {
        let upper = self.upper(modality);
        let v = hu.clamp(self.lower_hu, upper);
        2.0 * (v - self.lower_hu) / (upper - self.lower_hu) - 1.0
    }
}

/// Artifact threshold on raw HU for each modality.
pub fn artifact_threshold(modality: Modality) -> f64 {
    match modality {
        Modality::Kvct => 2000.0,
        Modality::Mvct => 1000.0,
    }
}

pub fn normalize(slice_hu: &Array2<f64>, modality: Modality) -> Result<Array2<f64>> {
    normalize_with(&NormalizationSpec::default(), slice_hu, modality)
}

pub fn normalize_with(spec: &NormalizationSpec, slice_hu: &Array2<f64>, modality: Modality) -> Result<Array2<f64>> {
    spec.validate()?;
    if slice_hu.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("slice_hu", "NaN in input"));
    }
    Ok(slice_hu.mapv(|v| spec.normalize_value(v, modality)))
}

/// Sets every pixel outside `body_mask` to -1.
pub fn apply_body_mask(slice: &Array2<f64>, body_mask: &Array2<bool>) -> Result<Array2<f64>> {
    if slice.dim() != body_mask.dim() {
        return Err(Error::Shape(format!("slice {:?} vs mask {:?}", slice.dim(), body_mask.dim())));
    }
    let mut out = slice.clone();
    ndarray::Zip::from(&mut out).and(body_mask).for_each(|v, &m| {
        if !m {
            *v = -1.0;
        }
    });
    Ok(out)
}

/// True iff the slice's maximum strictly exceeds the modality threshold.
/// Operates on raw integer HU only.
pub fn classify_artifact(slice_hu: ArrayView2<'_, i16>, modality: Modality) -> bool {
    let threshold = artifact_threshold(modality);
    slice_hu.iter().any(|&v| v as f64 > threshold)
}

/// An aligned, normalized and masked (kVCT, MVCT) slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub kv: Array2<f32>,
    pub mv: Array2<f32>,
    pub body_mask: Array2<bool>,
    pub region: Region,
    pub is_artifact: bool,
    pub patient_id: String,
    pub slice_index: usize,
}

impl SlicePair {
    pub fn side(&self) -> usize {
        self.kv.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kv.dim() != self.mv.dim() || self.kv.dim() != self.body_mask.dim() {
            return Err(Error::Shape("slice pair components differ in shape".into()));
        }
        if self.region == Region::Body {
            return Err(Error::invalid("region", "body-region slices are not part of the dataset"));
        }
        for ((&k, &m), &b) in self.kv.iter().zip(self.mv.iter()).zip(self.body_mask.iter()) {
            if !(-1.0..=1.0).contains(&k) || !(-1.0..=1.0).contains(&m) {
                return Err(Error::invalid("pixels", "value outside [-1, 1]"));
            }
            if !b && (k != -1.0 || m != -1.0) {
                return Err(Error::invalid("background", "pixel outside the body is not -1"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn kv_endpoints() {
        let img = array![[-1000.0, 2000.0], [500.0, -3000.0]];
        let n = normalize(&img, Modality::Kvct).unwrap();
        assert_eq!(n, array![[-1.0, 1.0], [0.0, -1.0]]);
    }

    #[test]
    fn mv_endpoints() {
        let img = array![[0.0, 3000.0], [1000.0, -1000.0]];
        let n = normalize(&img, Modality::Mvct).unwrap();
        assert_eq!(n, array![[0.0, 1.0], [1.0, -1.0]]);
    }

    #[test]
    fn nan_rejected() {
        assert!(normalize(&array![[f64::NAN]], Modality::Kvct).is_err());
    }

    #[test]
    fn mask_extremes() {
        let img = Array2::from_elem((4, 4), 0.5);
        let none = apply_body_mask(&img, &Array2::from_elem((4, 4), false)).unwrap();
        assert!(none.iter().all(|&v| v == -1.0));
        let all = apply_body_mask(&img, &Array2::from_elem((4, 4), true)).unwrap();
        assert_eq!(all, img);
    }

    #[test]
    fn half_mask_mean() {
        let img = Array2::from_elem((4, 4), 0.5);
        let mask = Array2::from_shape_fn((4, 4), |(r, _)| r < 2);
        let out = apply_body_mask(&img, &mask).unwrap();
        let a = 8.0;
        let n = 16.0;
        assert!((out.mean().unwrap() - (0.5 * a - (n - a)) / n).abs() < 1e-15);
    }

    #[test]
    fn mask_shape_mismatch() {
        assert!(matches!(
            apply_body_mask(&Array2::zeros((3, 3)), &Array2::from_elem((3, 4), true)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn strict_thresholds() {
        let mut s = Array2::<i16>::from_elem((4, 4), 40);
        s[[1, 1]] = 2500;
        assert!(classify_artifact(s.view(), Modality::Kvct));
        s[[1, 1]] = 2000;
        assert!(!classify_artifact(s.view(), Modality::Kvct));
        s[[1, 1]] = 1200;
        assert!(classify_artifact(s.view(), Modality::Mvct));
        s[[1, 1]] = 1000;
        assert!(!classify_artifact(s.view(), Modality::Mvct));
    }

    proptest! {
        #[test]
        fn normalize_monotone_and_bounded(a in -5000.0f64..5000.0, b in -5000.0f64..5000.0) {
            let spec = NormalizationSpec::default();
            for m in [Modality::Kvct, Modality::Mvct] {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let (nl, nh) = (spec.normalize_value(lo, m), spec.normalize_value(hi, m));
                prop_assert!(nl <= nh);
                prop_assert!((-1.0..=1.0).contains(&nl) && (-1.0..=1.0).contains(&nh));
            }
        }

        #[test]
        fn normalize_idempotent_after_clip(v in -5000.0f64..5000.0) {
            let spec = NormalizationSpec::default();
            let clipped = v.clamp(-1000.0, 2000.0);
            prop_assert_eq!(spec.normalize_value(v, Modality::Kvct), spec.normalize_value(clipped, Modality::Kvct));
        }
    }
}
