//! Paired geometric augmentation. Sampling is separate from application so
//! a draw can be inspected, forced in tests, or replayed.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::SlicePair;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub hflip_prob: f64,
    /// Probability of the joint shift/scale/rotate transform.
    pub ssr_prob: f64,
    /// Maximum shift as a fraction of the image side.
    pub shift_limit: f64,
    /// Maximum relative zoom, scale drawn from [1 - l, 1 + l].
    pub scale_limit: f64,
    pub rotate_limit_deg: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            hflip_prob: 0.5,
            ssr_prob: 0.8,
            shift_limit: 0.0625,
            scale_limit: 0.1,
            rotate_limit_deg: 5.0,
        }
    }
}

impl AugmentSpec {
    /// No augmentation at all.
    pub fn none() -> Self {
        AugmentSpec {
            hflip_prob: 0.0,
            ssr_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, p) in [("hflip_prob", self.hflip_prob), ("ssr_prob", self.ssr_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(field, format!("{p} not in [0, 1]")));
            }
        }
        for (field, l) in [
            ("shift_limit", self.shift_limit),
            ("scale_limit", self.scale_limit),
            ("rotate_limit_deg", self.rotate_limit_deg),
        ] {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::invalid(field, format!("{l} must be a non-negative number")));
            }
        }
        if self.scale_limit >= 1.0 {
            return Err(Error::invalid("scale_limit", "must be below 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    /// (row, col) shift as a fraction of the side.
    pub shift: [f64; 2],
    pub scale: f64,
    /// Counter-clockwise in image display coordinates.
    pub angle_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub affine: Option<Affine>,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        hflip: false,
        affine: None,
    };
}

/// Always consumes the same number of random values, whatever is drawn.
pub fn sample_augment(spec: &AugmentSpec, rng: &mut impl Rng) -> AugmentDraw {
    let flip_u: f64 = rng.random();
    let ssr_u: f64 = rng.random();
    let mut sym = |limit: f64| limit * (2.0 * rng.random::<f64>() - 1.0);
    let shift = [sym(spec.shift_limit), sym(spec.shift_limit)];
    let scale = 1.0 + sym(spec.scale_limit);
    let angle_deg = sym(spec.rotate_limit_deg);
    AugmentDraw {
        hflip: flip_u < spec.hflip_prob,
        affine: (ssr_u < spec.ssr_prob).then_some(Affine {
            shift,
            scale,
            angle_deg,
        }),
    }
}

fn hflip<T: Copy>(a: &Array2<T>) -> Array2<T> {
    let (_, w) = a.dim();
    Array2::from_shape_fn(a.dim(), |(r, c)| a[[r, w - 1 - c]])
}

/// Source coordinate (row, col) for every output pixel under `t`: the output
/// is the input rotated by `angle`, scaled by `scale` about the centre, then
/// shifted.
fn source_coords(t: &Affine, h: usize, w: usize) -> Vec<(f64, f64)> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = t.angle_deg.to_radians().sin_cos();
    let (ty, tx) = (t.shift[0] * h as f64, t.shift[1] * w as f64);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            // invert: subtract shift, unrotate, unscale (rows grow downwards)
            let (y, x) = (r as f64 - cy - ty, c as f64 - cx - tx);
            let xs = (cos * x - sin * y) / t.scale;
            let ys = (sin * x + cos * y) / t.scale;
            out.push((ys + cy, xs + cx));
        }
    }
    out
}

fn bilinear(a: &Array2<f32>, coords: &[(f64, f64)], fill: f32) -> Array2<f32> {
    let (h, w) = a.dim();
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            fill as f64
        } else {
            a[[r as usize, c as usize]] as f64
        }
    };
    let v: Vec<f32> = coords
        .iter()
        .map(|&(y, x)| {
            if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
                return fill;
            }
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (r, c) = (y0 as isize, x0 as isize);
            let top = at(r, c) * (1.0 - fx) + at(r, c + 1) * fx;
            let bottom = at(r + 1, c) * (1.0 - fx) + at(r + 1, c + 1) * fx;
            (top * (1.0 - fy) + bottom * fy) as f32
        })
        .collect();
    Array2::from_shape_vec((h, w), v).expect("shape")
}

fn nearest(a: &Array2<bool>, coords: &[(f64, f64)]) -> Array2<bool> {
    let (h, w) = a.dim();
    let v: Vec<bool> = coords
        .iter()
        .map(|&(y, x)| {
            let (r, c) = (y.round(), x.round());
            r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64 && a[[r as usize, c as usize]]
        })
        .collect();
    Array2::from_shape_vec((h, w), v).expect("shape")
}

/// Applies one draw identically to kVCT, MVCT and mask; images resample
/// bilinearly with fill -1, the mask by nearest neighbour with fill false,
/// and the images are then re-masked so the background stays at -1.
pub fn apply_augment(pair: &SlicePair, draw: &AugmentDraw) -> SlicePair {
    if *draw == AugmentDraw::IDENTITY {
        return pair.clone();
    }
    let mut kv = pair.kv.clone();
    let mut mv = pair.mv.clone();
    let mut mask = pair.body_mask.clone();
    if draw.hflip {
        kv = hflip(&kv);
        mv = hflip(&mv);
        mask = hflip(&mask);
    }
    if let Some(t) = &draw.affine {
        let (h, w) = kv.dim();
        let coords = source_coords(t, h, w);
        kv = bilinear(&kv, &coords, -1.0);
        mv = bilinear(&mv, &coords, -1.0);
        mask = nearest(&mask, &coords);
        for ((k, m), &inside) in kv.iter_mut().zip(mv.iter_mut()).zip(mask.iter()) {
            if !inside {
                *k = -1.0;
                *m = -1.0;
            }
        }
    }
    SlicePair {
        kv,
        mv,
        body_mask: mask,
        ..pair.clone()
    }
}

pub fn augment_pair(pair: &SlicePair, spec: &AugmentSpec, rng: &mut impl Rng) -> SlicePair {
    apply_augment(pair, &sample_augment(spec, rng))
}
