use ndarray::Array3;

use crate::dataio::HUVolume;
use crate::error::{Error, Result};

/// Voxels above this HU in the fixed volume count as body for matching.
const BODY_HU: i16 = -500;
/// Candidate shifts must overlap at least this fraction of body voxels.
const MIN_OVERLAP: f64 = 0.5;

/// `out[x] = vol[x - shift]`, with `fill` where the source is out of bounds.
/// Shift order is (z, y, x).
pub fn translate_volume(vol: &Array3<i16>, shift: [i32; 3], fill: i16) -> Array3<i16> {
    let (n, r, c) = vol.dim();
    Array3::from_shape_fn((n, r, c), |(z, y, x)| {
        let sz = z as i64 - shift[0] as i64;
        let sy = y as i64 - shift[1] as i64;
        let sx = x as i64 - shift[2] as i64;
        if sz < 0 || sy < 0 || sx < 0 || sz >= n as i64 || sy >= r as i64 || sx >= c as i64 {
            fill
        } else {
            vol[[sz as usize, sy as usize, sx as usize]]
        }
    })
}

/// Integer 3-D translation of `moving` onto `fixed` by exhaustive
/// normalized cross-correlation over the fixed volume's body voxels.
///
/// Returns the aligned volume and the shift applied to `moving`
/// (see [`translate_volume`]). Ties keep the first candidate in
/// (z, y, x) lexicographic order.
pub fn rigid_align(moving: &HUVolume, fixed: &HUVolume, max_shift: usize) -> Result<(HUVolume, [i32; 3])> {
    let dims = fixed.voxels.dim();
    if moving.voxels.dim() != dims {
        return Err(Error::Shape(format!(
            "moving {:?} vs fixed {:?}",
            moving.voxels.dim(),
            dims
        )));
    }
    let (n, r, c) = dims;
    let moving_flat = moving.voxels.as_standard_layout();
    let moving_flat = moving_flat.as_slice().expect("standard layout");

    let body: Vec<(i32, i32, i32, f64)> = fixed
        .voxels
        .indexed_iter()
        .filter(|(_, &v)| v > BODY_HU)
        .map(|((z, y, x), &v)| (z as i32, y as i32, x as i32, v as f64))
        .collect();
    if body.len() < 2 {
        return Err(Error::ZeroVariance("fixed volume has no body voxels".into()));
    }
    if body.iter().all(|b| b.3 == body[0].3) {
        return Err(Error::ZeroVariance("fixed volume is constant over the body".into()));
    }
    if moving_flat.iter().all(|&v| v == moving_flat[0]) {
        return Err(Error::ZeroVariance("moving volume is constant".into()));
    }

    let m = max_shift as i32;
    let mz = m.min(n as i32 - 1);
    let my = m.min(r as i32 - 1);
    let mx = m.min(c as i32 - 1);
    let min_overlap = (MIN_OVERLAP * body.len() as f64) as usize;
    let mut best: Option<(f64, [i32; 3])> = None;

    for tz in -mz..=mz {
        for ty in -my..=my {
            for tx in -mx..=mx {
                let (mut k, mut sf, mut sm, mut sff, mut smm, mut sfm) = (0usize, 0.0, 0.0, 0.0, 0.0, 0.0);
                for &(z, y, x, f) in &body {
                    let (sz, sy, sx) = (z - tz, y - ty, x - tx);
                    if sz < 0 || sy < 0 || sx < 0 || sz >= n as i32 || sy >= r as i32 || sx >= c as i32 {
                        continue;
                    }
                    let mv = moving_flat[(sz as usize * r + sy as usize) * c + sx as usize] as f64;
                    k += 1;
                    sf += f;
                    sm += mv;
                    sff += f * f;
                    smm += mv * mv;
                    sfm += f * mv;
                }
                if k < min_overlap.max(2) {
                    continue;
                }
                let kf = k as f64;
                let cov = sfm - sf * sm / kf;
                let vf = sff - sf * sf / kf;
                let vm = smm - sm * sm / kf;
                if vf <= 0.0 || vm <= 0.0 {
                    continue;
                }
                let ncc = cov / (vf * vm).sqrt();
                if best.map_or(true, |(b, _)| ncc > b) {
                    best = Some((ncc, [tz, ty, tx]));
                }
            }
        }
    }
    let (_, shift) = best.ok_or_else(|| Error::ZeroVariance("no candidate shift had variance in both volumes".into()))?;
    let aligned = HUVolume {
        voxels: translate_volume(&moving.voxels, shift, -1000),
        ..moving.clone()
    };
    Ok((aligned, shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Modality;
    use crate::phantom::{generate_patient, PhantomSpec};
    use rand_distr::{Distribution, Normal};

    fn fixed() -> HUVolume {
        let spec = PhantomSpec {
            image_size: 32,
            n_slices: 12,
            noise_sigma_hu: 0.0,
            ..PhantomSpec::default()
        };
        generate_patient(&spec, 11).unwrap().kv
    }

    #[test]
    fn identity_is_zero_shift() {
        let f = fixed();
        let (aligned, shift) = rigid_align(&f, &f, 3).unwrap();
        assert_eq!(shift, [0, 0, 0]);
        assert_eq!(aligned.voxels, f.voxels);
    }

    #[test]
    fn recovers_inverse_shift() {
        let f = fixed();
        let moving = HUVolume {
            voxels: translate_volume(&f.voxels, [2, -3, 1], -1000),
            modality: Modality::Mvct,
            ..f.clone()
        };
        let (_, shift) = rigid_align(&moving, &f, 8).unwrap();
        assert_eq!(shift, [-2, 3, -1]);
    }

    #[test]
    fn constant_volume_rejected() {
        let f = fixed();
        let flat = HUVolume {
            voxels: Array3::from_elem(f.voxels.dim(), 40),
            ..f.clone()
        };
        assert!(matches!(rigid_align(&flat, &f, 2), Err(Error::ZeroVariance(_))));
        assert!(matches!(rigid_align(&f, &flat, 2), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn translate_fills_edges() {
        let v = Array3::from_shape_fn((1, 3, 3), |(_, y, x)| (y * 3 + x) as i16);
        let t = translate_volume(&v, [0, 1, 0], -7);
        assert_eq!(t[[0, 0, 0]], -7);
        assert_eq!(t[[0, 1, 2]], 2);
    }

    #[test]
    fn noisy_copy_still_aligns() {
        let f = fixed();
        let noise = Normal::new(0.0, 20.0).unwrap();
        let mut rng = crate::rng::rng_for(5, &[]);
        let mut moving = translate_volume(&f.voxels, [1, 4, -2], -1000);
        moving.mapv_inplace(|v| (v as f64 + noise.sample(&mut rng)).round().max(-1024.0) as i16);
        let moving = HUVolume {
            voxels: moving,
            ..f.clone()
        };
        assert_eq!(rigid_align(&moving, &f, 6).unwrap().1, [-1, -4, 2]);
    }
}
