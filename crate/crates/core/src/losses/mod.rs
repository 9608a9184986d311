//! Training objectives on single normalised slices. Every term returns its
//! value and, through the `*_grad` variants, its gradient with respect to
//! the prediction.

pub mod ssim;

use std::fmt;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel weight outside the body.
pub const BACKGROUND_WEIGHT: f64 = 0.1;
/// Body weights studied in the weight ablation.
pub const WEIGHT_GRID: [f64; 4] = [1.0, 25.0, 50.0, 100.0];
/// FFL alpha and beta values of the spectral grid.
pub const FFL_GRID: [f64; 3] = [0.5, 1.0, 1.5];

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub w_pixels: Array2<f64>,
}

/// 0.1 outside the body; inside, `w` on artifact slices and 1 elsewhere.
pub fn build_weight_map(body_mask: &Array2<bool>, is_artifact: bool, w: f64) -> Result<WeightMap> {
    if !(w > 0.0) || !w.is_finite() {
        return Err(Error::invalid("w", format!("{w} must be positive and finite")));
    }
    let inside = if is_artifact { w } else { 1.0 };
    Ok(WeightMap {
        w_pixels: body_mask.mapv(|m| if m { inside } else { BACKGROUND_WEIGHT }),
    })
}

fn same_shape(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.dim(), gt.dim())));
    }
    Ok(())
}

/// Mean of `|pred - gt| * w`.
pub fn l1_weighted(pred: &Array2<f64>, gt: &Array2<f64>, weights: &WeightMap) -> Result<f64> {
    Ok(l1_weighted_grad(pred, gt, weights)?.0)
}

pub fn l1_weighted_grad(pred: &Array2<f64>, gt: &Array2<f64>, weights: &WeightMap) -> Result<(f64, Array2<f64>)> {
    same_shape(pred, gt)?;
    if weights.w_pixels.dim() != pred.dim() {
        return Err(Error::Shape(format!(
            "weight map {:?} vs prediction {:?}",
            weights.w_pixels.dim(),
            pred.dim()
        )));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Array2::zeros(pred.dim());
    Zip::from(&mut grad)
        .and(pred)
        .and(gt)
        .and(&weights.w_pixels)
        .for_each(|g, &p, &t, &w| {
            let d = p - t;
            total += d.abs() * w;
            *g = if d > 0.0 {
                w / n
            } else if d < 0.0 {
                -w / n
            } else {
                0.0
            };
        });
    Ok((total / n, grad))
}

pub fn mse(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    Ok(mse_grad(pred, gt)?.0)
}

pub fn mse_grad(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    same_shape(pred, gt)?;
    let n = pred.len() as f64;
    let diff = pred - gt;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff * (2.0 / n)))
}

/// Unnormalised 2-D DFT (or its unnormalised inverse) in place.
fn fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = data[i * w + j];
        }
        col.process(&mut column);
        for i in 0..h {
            data[i * w + j] = column[i];
        }
    }
}

fn spectrum_diff(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<(usize, Vec<Complex64>)> {
    same_shape(pred, gt)?;
    let (h, w) = pred.dim();
    if h != w {
        return Err(Error::Shape(format!("FFL needs square images, got {h}x{w}")));
    }
    // the DFT is linear, so transform the difference once
    let mut d: Vec<Complex64> = pred.iter().zip(gt.iter()).map(|(p, t)| Complex64::new(p - t, 0.0)).collect();
    fft2(&mut d, h, w, false);
    if d.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::invalid("spectrum", "non-finite DFT coefficient"));
    }
    Ok((h, d))
}

/// Focal frequency loss: `beta / d^2 * sum |F(pred) - F(gt)|^(2 + alpha)`
/// with the unnormalised DFT.
pub fn ffl(pred: &Array2<f64>, gt: &Array2<f64>, alpha: f64, beta: f64) -> Result<f64> {
    let (d, diff) = spectrum_diff(pred, gt)?;
    let s: f64 = diff.iter().map(|z| z.norm().powf(2.0 + alpha)).sum();
    Ok(beta * s / (d * d) as f64)
}

pub fn ffl_grad(pred: &Array2<f64>, gt: &Array2<f64>, alpha: f64, beta: f64) -> Result<(f64, Array2<f64>)> {
    let (d, mut diff) = spectrum_diff(pred, gt)?;
    let scale = beta / (d * d) as f64;
    let mut total = 0.0;
    for z in diff.iter_mut() {
        let m = z.norm();
        total += m.powf(2.0 + alpha);
        // d|D|^(2+a)/dD* direction: (2 + a) |D|^a D
        *z *= if m > 0.0 { (2.0 + alpha) * m.powf(alpha) } else { 0.0 };
    }
    fft2(&mut diff, d, d, true);
    let grad = Array2::from_shape_fn((d, d), |(i, j)| scale * diff[i * d + j].re);
    Ok((scale * total, grad))
}

/// `1 - SSIM` averaged over the SSIM map.
pub fn ssim_loss(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    let map = ssim::ssim_map(pred, gt)?;
    Ok(1.0 - map.mean().expect("non-empty"))
}

pub fn ssim_loss_grad(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let (s, g) = ssim::mean_ssim_grad(pred, gt)?;
    Ok((1.0 - s, -g))
}

/// `1 - MS-SSIM` with uniform weights over `ssim::ms_scales(d)` scales.
pub fn ms_ssim_loss(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    Ok(ms_ssim_loss_grad(pred, gt)?.0)
}

pub fn ms_ssim_loss_grad(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let (s, g) = ssim::ms_ssim_grad(pred, gt)?;
    Ok((1.0 - s, -g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LossTerm {
    L1w,
    #[serde(rename = "FFL")]
    Ffl,
    #[serde(rename = "MSE")]
    Mse,
    #[serde(rename = "SSIM")]
    Ssim,
    #[serde(rename = "MS-SSIM")]
    MsSsim,
}

impl LossTerm {
    pub fn name(self) -> &'static str {
        match self {
            LossTerm::L1w => "L1w",
            LossTerm::Ffl => "FFL",
            LossTerm::Mse => "MSE",
            LossTerm::Ssim => "SSIM",
            LossTerm::MsSsim => "MS-SSIM",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub terms: Vec<LossTerm>,
    /// Body weight on artifact slices for `L1w`.
    #[serde(default = "default_w")]
    pub w: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
}

fn default_w() -> f64 {
    100.0
}

fn one() -> f64 {
    1.0
}

impl LossSpec {
    pub fn new(terms: &[LossTerm]) -> Self {
        LossSpec {
            terms: terms.to_vec(),
            w: default_w(),
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::invalid("terms", "at least one loss term is required"));
        }
        let mut seen = self.terms.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.terms.len() {
            return Err(Error::invalid("terms", "duplicate loss term"));
        }
        for (field, v) in [("w", self.w), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(field, format!("{v} must be positive and finite")));
            }
        }
        Ok(())
    }

    /// Stable identifier used in file names and report rows, e.g.
    /// `L1w100+SSIM` or `FFL_a0.5_b1.5`.
    pub fn id(&self) -> String {
        self.terms
            .iter()
            .map(|t| match t {
                LossTerm::L1w => format!("L1w{}", self.w),
                LossTerm::Ffl if (self.alpha, self.beta) != (1.0, 1.0) => {
                    format!("FFL_a{}_b{}", self.alpha, self.beta)
                }
                other => other.name().to_string(),
            })
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|t| match t {
                LossTerm::L1w => format!("L1^{}", self.w),
                other => other.name().to_string(),
            })
            .collect();
        write!(f, "{}", parts.join(" + "))
    }
}

/// Per-term values of one evaluation, in `spec.terms` order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<(LossTerm, f64)>,
}

/// Unweighted sum of the selected terms.
pub fn combine(spec: &LossSpec, pred: &Array2<f64>, gt: &Array2<f64>, weights: &WeightMap) -> Result<f64> {
    spec.validate()?;
    let mut total = 0.0;
    for &t in &spec.terms {
        total += match t {
            LossTerm::L1w => l1_weighted(pred, gt, weights)?,
            LossTerm::Ffl => ffl(pred, gt, spec.alpha, spec.beta)?,
            LossTerm::Mse => mse(pred, gt)?,
            LossTerm::Ssim => ssim_loss(pred, gt)?,
            LossTerm::MsSsim => ms_ssim_loss(pred, gt)?,
        };
    }
    Ok(total)
}

/// [`combine`] plus its gradient and the per-term breakdown.
pub fn combine_grad(
    spec: &LossSpec,
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    weights: &WeightMap,
) -> Result<(LossBreakdown, Array2<f64>)> {
    spec.validate()?;
    let mut grad = Array2::zeros(pred.dim());
    let mut terms = Vec::with_capacity(spec.terms.len());
    for &t in &spec.terms {
        let (v, g) = match t {
            LossTerm::L1w => l1_weighted_grad(pred, gt, weights)?,
            LossTerm::Ffl => ffl_grad(pred, gt, spec.alpha, spec.beta)?,
            LossTerm::Mse => mse_grad(pred, gt)?,
            LossTerm::Ssim => ssim_loss_grad(pred, gt)?,
            LossTerm::MsSsim => ms_ssim_loss_grad(pred, gt)?,
        };
        grad += &g;
        terms.push((t, v));
    }
    Ok((
        LossBreakdown {
            total: terms.iter().map(|(_, v)| v).sum(),
            terms,
        },
        grad,
    ))
}

/// The seven loss combinations of the comparison table, with `L1w` at
/// w = 100.
pub fn loss_matrix_specs() -> Vec<LossSpec> {
    use LossTerm::*;
    [
        vec![L1w],
        vec![L1w, Ssim],
        vec![L1w, MsSsim],
        vec![L1w, Mse],
        vec![Ffl],
        vec![L1w, Ffl],
        vec![L1w, Ssim, Ffl],
    ]
    .iter()
    .map(|t| LossSpec::new(t))
    .collect()
}
