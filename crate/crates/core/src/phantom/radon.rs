//! Parallel-beam projection and filtered back-projection.
//!
//! Pixel centres sit at `(col - c, row - c)` with `c = (d - 1) / 2`; a ray at
//! angle `theta` hits detector coordinate `t = x cos(theta) + y sin(theta)`.
//! Detector bins are one pixel wide and centred on the rotation axis.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this many views the reconstruction is flagged as undersampled.
pub const MIN_WELL_SAMPLED_ANGLES: usize = 16;

/// Percentile of metal-trace line integrals above which values saturate.
pub const SATURATION_PERCENTILE: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sinogram {
    /// `[n_angles, n_detectors]` line integrals in HU * pixel.
    pub values: Array2<f64>,
    /// Radians, uniformly spaced in `[0, pi)`.
    pub angles: Vec<f64>,
}

impl Sinogram {
    pub fn n_angles(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_detectors(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: Array2<f64>,
    /// Set when fewer than [`MIN_WELL_SAMPLED_ANGLES`] views were available.
    pub undersampled: bool,
}

#[derive(Debug, Clone)]
pub struct CorruptedSlice {
    pub image: Array2<f64>,
    /// The implant mask was empty, so no saturation was applied.
    pub no_metal_trace: bool,
    pub undersampled: bool,
}

/// Detector count that covers the image diagonal for any view angle.
pub fn detector_count(image_size: usize) -> usize {
    (image_size as f64 * std::f64::consts::SQRT_2).ceil() as usize + 3
}

pub fn projection_angles(n_angles: usize) -> Vec<f64> {
    (0..n_angles)
        .map(|k| PI * k as f64 / n_angles as f64)
        .collect()
}

/// Pixel-driven discrete Radon transform with linear detector interpolation.
///
/// Every pixel deposits its full value on each view, so each sinogram row
/// sums to the image mass up to rounding.
pub fn forward_project(image: &Array2<f64>, n_angles: usize) -> Result<Sinogram> {
    let (rows, cols) = image.dim();
    if rows != cols {
        return Err(Error::Shape(format!(
            "forward projection needs a square image, got {rows}x{cols}"
        )));
    }
    if n_angles == 0 {
        return Err(Error::invalid("n_angles", "must be at least 1"));
    }
    let d = rows;
    let n_det = detector_count(d);
    let centre = (d as f64 - 1.0) / 2.0;
    let det_centre = (n_det as f64 - 1.0) / 2.0;
    let angles = projection_angles(n_angles);
    let mut values = Array2::<f64>::zeros((n_angles, n_det));

    for (a, &theta) in angles.iter().enumerate() {
        let (s, c) = theta.sin_cos();
        let mut row = values.row_mut(a);
        for ((r, q), &v) in image.indexed_iter() {
            if v == 0.0 {
                continue;
            }
            let x = q as f64 - centre;
            let y = r as f64 - centre;
            let pos = x * c + y * s + det_centre;
            let i0 = pos.floor();
            let frac = pos - i0;
            let i0 = i0 as usize;
            row[i0] += v * (1.0 - frac);
            row[i0 + 1] += v * frac;
        }
    }
    Ok(Sinogram { values, angles })
}

/// Ramp filter (spatial-domain Ram-Lak kernel) with Hann apodization, as the
/// frequency response for a zero-padded FFT of length `len`.
fn ramp_hann_response(len: usize) -> Vec<f64> {
    let mut kernel = vec![Complex64::new(0.0, 0.0); len];
    kernel[0].re = 0.25;
    for n in 1..len / 2 {
        if n % 2 == 1 {
            let v = -1.0 / (PI * PI * (n * n) as f64);
            kernel[n].re = v;
            kernel[len - n].re = v;
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(len).process(&mut kernel);
    kernel
        .iter()
        .enumerate()
        .map(|(k, h)| {
            let k = k.min(len - k) as f64;
            let hann = 0.5 * (1.0 + (2.0 * PI * k / len as f64).cos());
            h.re * hann
        })
        .collect()
}

fn filter_projections(sino: &Sinogram) -> Array2<f64> {
    let n_det = sino.n_detectors();
    let len = (2 * n_det).next_power_of_two();
    let response = ramp_hann_response(len);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);
    let mut out = Array2::<f64>::zeros(sino.values.dim());
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for (a, row) in sino.values.outer_iter().enumerate() {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        for (b, &v) in buf.iter_mut().zip(row.iter()) {
            b.re = v;
        }
        fwd.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(response.iter()) {
            *b *= h;
        }
        inv.process(&mut buf);
        for (o, b) in out.row_mut(a).iter_mut().zip(buf.iter()) {
            *o = b.re / len as f64;
        }
    }
    out
}

/// Ramp-filtered back-projection onto a `image_size` square grid.
pub fn fbp_reconstruct(sino: &Sinogram, image_size: usize) -> Result<Reconstruction> {
    if sino.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("sinogram", "contains non-finite values"));
    }
    if image_size == 0 {
        return Err(Error::invalid("image_size", "must be positive"));
    }
    if sino.angles.len() != sino.n_angles() {
        return Err(Error::Shape(format!(
            "{} angles for {} sinogram rows",
            sino.angles.len(),
            sino.n_angles()
        )));
    }
    let filtered = filter_projections(sino);
    let n_det = sino.n_detectors();
    let centre = (image_size as f64 - 1.0) / 2.0;
    let det_centre = (n_det as f64 - 1.0) / 2.0;
    let scale = PI / sino.n_angles() as f64;
    let mut image = Array2::<f64>::zeros((image_size, image_size));

    for (row, &theta) in filtered.outer_iter().zip(sino.angles.iter()) {
        let (s, c) = theta.sin_cos();
        for ((r, q), px) in image.indexed_iter_mut() {
            let x = q as f64 - centre;
            let y = r as f64 - centre;
            let pos = x * c + y * s + det_centre;
            if pos < 0.0 || pos > (n_det - 1) as f64 {
                continue;
            }
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            let v0 = row[i0];
            let v1 = if i0 + 1 < n_det { row[i0 + 1] } else { 0.0 };
            *px += v0 * (1.0 - frac) + v1 * frac;
        }
    }
    image.mapv_inplace(|v| v * scale);
    Ok(Reconstruction {
        image,
        undersampled: sino.n_angles() < MIN_WELL_SAMPLED_ANGLES,
    })
}

/// Nearest-rank percentile of an unsorted sample, `p` in `[0, 1]`.
fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// Simulates photon starvation along the metal trace and reconstructs.
///
/// Sinogram bins whose rays touch the implant are compressed above the
/// trace's 60th percentile `v_sat`: `v -> v_sat + (v - v_sat) * (1 - severity)`.
/// With `severity == 0` or an empty mask the result is exactly
/// `fbp_reconstruct(forward_project(image))`.
pub fn corrupt_and_reconstruct(
    image: &Array2<f64>,
    implant_mask: &Array2<bool>,
    severity: f64,
    n_angles: usize,
) -> Result<CorruptedSlice> {
    if image.dim() != implant_mask.dim() {
        return Err(Error::Shape(format!(
            "image {:?} vs implant mask {:?}",
            image.dim(),
            implant_mask.dim()
        )));
    }
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::invalid("severity", format!("{severity} outside [0, 1]")));
    }
    if image
        .iter()
        .zip(implant_mask.iter())
        .any(|(&v, &m)| m && v < 2000.0)
    {
        return Err(Error::invalid(
            "implant_mask",
            "implant pixels must be at least 2000 HU",
        ));
    }
    let d = image.nrows();
    let mut sino = forward_project(image, n_angles)?;
    let has_metal = implant_mask.iter().any(|&m| m);

    if severity > 0.0 && has_metal {
        let footprint = forward_project(&implant_mask.mapv(|m| if m { 1.0 } else { 0.0 }), n_angles)?;
        let trace: Vec<(usize, usize)> = footprint
            .values
            .indexed_iter()
            .filter(|(_, &v)| v > 1e-12)
            .map(|(idx, _)| idx)
            .collect();
        let mut trace_values: Vec<f64> = trace.iter().map(|&idx| sino.values[idx]).collect();
        let v_sat = percentile(&mut trace_values, SATURATION_PERCENTILE);
        for idx in trace {
            let v = &mut sino.values[idx];
            if *v > v_sat {
                *v = v_sat + (*v - v_sat) * (1.0 - severity);
            }
        }
    }

    let recon = fbp_reconstruct(&sino, d)?;
    Ok(CorruptedSlice {
        image: recon.image,
        no_metal_trace: !has_metal,
        undersampled: recon.undersampled,
    })
}

/// Mean value along each of `n_rays` lines through `centre`, skipping
/// pixels flagged in `exclude`. Used to quantify radial streaking.
pub fn ray_means(
    image: &Array2<f64>,
    centre: (f64, f64),
    n_rays: usize,
    exclude: &Array2<bool>,
) -> Array1<f64> {
    let (rows, cols) = image.dim();
    let reach = (rows.max(cols)) as f64;
    let mut means = Array1::<f64>::zeros(n_rays);
    for k in 0..n_rays {
        let theta = PI * k as f64 / n_rays as f64;
        let (s, c) = theta.sin_cos();
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut t = -reach;
        while t <= reach {
            let r = (centre.0 + t * s).round();
            let q = (centre.1 + t * c).round();
            if r >= 0.0 && q >= 0.0 && (r as usize) < rows && (q as usize) < cols {
                let (r, q) = (r as usize, q as usize);
                if !exclude[[r, q]] {
                    sum += image[[r, q]];
                    n += 1;
                }
            }
            t += 0.5;
        }
        means[k] = if n > 0 { sum / n as f64 } else { 0.0 };
    }
    means
}
