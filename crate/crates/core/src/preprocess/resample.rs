use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dataio::HUVolume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// (slices, rows, cols)
    pub dims: [usize; 3],
    /// (row, col) spacing in millimetres.
    pub spacing_mm: [f64; 2],
    pub thickness_mm: f64,
}

impl GridSpec {
    pub fn of(vol: &HUVolume) -> Self {
        let (n, r, c) = vol.voxels.dim();
        GridSpec {
            dims: [n, r, c],
            spacing_mm: vol.pixel_spacing_mm,
            thickness_mm: vol.slice_thickness_mm,
        }
    }
}

/// Source coordinate of target sample `i` when both grids share a centre.
fn source_coord(i: usize, n_out: usize, n_in: usize, step_out: f64, step_in: f64) -> f64 {
    (i as f64 - (n_out as f64 - 1.0) / 2.0) * step_out / step_in + (n_in as f64 - 1.0) / 2.0
}

/// Resamples onto a centred target grid: bilinear in-plane (edge values
/// replicated), nearest-neighbour across slices.
pub fn resample_to_grid(vol: &HUVolume, target: &GridSpec) -> Result<HUVolume> {
    if target.spacing_mm.iter().any(|&s| !(s > 0.0)) || !(target.thickness_mm > 0.0) {
        return Err(Error::invalid("target_spacing_mm", "spacing and thickness must be positive"));
    }
    if target.dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid("target_dims", "dimensions must be positive"));
    }
    if GridSpec::of(vol) == *target {
        return Ok(vol.clone());
    }
    let (n_in, r_in, c_in) = vol.voxels.dim();
    let [n_out, r_out, c_out] = target.dims;

    let slice_src: Vec<usize> = (0..n_out)
        .map(|z| {
            source_coord(z, n_out, n_in, target.thickness_mm, vol.slice_thickness_mm)
                .round()
                .clamp(0.0, (n_in - 1) as f64) as usize
        })
        .collect();
    let axis = |n_out: usize, n_in: usize, step_out: f64, step_in: f64| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let s = source_coord(i, n_out, n_in, step_out, step_in).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = axis(r_out, r_in, target.spacing_mm[0], vol.pixel_spacing_mm[0]);
    let cols = axis(c_out, c_in, target.spacing_mm[1], vol.pixel_spacing_mm[1]);

    let src = &vol.voxels;
    let voxels = Array3::from_shape_fn((n_out, r_out, c_out), |(z, r, c)| {
        let sz = slice_src[z];
        let (r0, r1, fr) = rows[r];
        let (c0, c1, fc) = cols[c];
        let v = |rr: usize, cc: usize| src[[sz, rr, cc]] as f64;
        let top = v(r0, c0) * (1.0 - fc) + v(r0, c1) * fc;
        let bottom = v(r1, c0) * (1.0 - fc) + v(r1, c1) * fc;
        (top * (1.0 - fr) + bottom * fr).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
    });
    Ok(HUVolume {
        voxels,
        pixel_spacing_mm: target.spacing_mm,
        slice_thickness_mm: target.thickness_mm,
        ..vol.clone()
    })
}
