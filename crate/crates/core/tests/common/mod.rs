//! Independent reference implementations used as test oracles. Deliberately
//! naive: direct sums, no FFTs, no separable filters.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(seed: u64, h: usize, w: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0))
}

/// Smooth image in [-0.8, 0.8] plus small noise, closer to real slices.
pub fn textured_image(seed: u64, d: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, c): (f64, f64, f64) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5), rng.random_range(0.0..6.0));
    Array2::from_shape_fn((d, d), |(i, j)| {
        0.6 * ((i as f64 * a + c).sin() * (j as f64 * b).cos()) + 0.2 * rng.random_range(-1.0..1.0)
    })
}

/// O(d^4) unnormalised forward DFT, returned as (re, im) pairs row-major.
pub fn dft_brute(x: &Array2<f64>) -> Vec<(f64, f64)> {
    let (h, w) = x.dim();
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let t = -2.0 * std::f64::consts::PI * ((u * i) as f64 / h as f64 + (v * j) as f64 / w as f64);
                    re += x[[i, j]] * t.cos();
                    im += x[[i, j]] * t.sin();
                }
            }
            out.push((re, im));
        }
    }
    out
}

pub fn ffl_oracle(pred: &Array2<f64>, gt: &Array2<f64>, alpha: f64, beta: f64) -> f64 {
    let fp = dft_brute(pred);
    let fg = dft_brute(gt);
    let d = pred.nrows() as f64;
    let s: f64 = fp
        .iter()
        .zip(&fg)
        .map(|(a, b)| {
            let m = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
            m.powf(alpha) * m * m
        })
        .sum();
    beta * s / (d * d)
}

/// Direct 2-D windowed SSIM map: 11x11 Gaussian (sigma 1.5) weights,
/// mirror padding that does not repeat the edge, L = 2.
pub fn ssim_map_oracle(x: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let r = 5isize;
    let mut weights = vec![0.0; 121];
    for a in -r..=r {
        for b in -r..=r {
            weights[((a + r) * 11 + b + r) as usize] = (-((a * a + b * b) as f64) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i.abs();
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        i as usize
    };
    let (c1, c2) = ((0.01f64 * 2.0).powi(2), (0.03f64 * 2.0).powi(2));
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for a in -r..=r {
            for b in -r..=r {
                let g = weights[((a + r) * 11 + b + r) as usize] / total;
                let p = x[[mirror(i as isize + a, h), mirror(j as isize + b, w)]];
                let q = y[[mirror(i as isize + a, h), mirror(j as isize + b, w)]];
                mx += g * p;
                my += g * q;
                sxx += g * p * p;
                syy += g * q * q;
                sxy += g * p * q;
            }
        }
        let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
        ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    })
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut x = x.clone();
    let mut g = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = x[[r, c]];
        x[[r, c]] = orig + h;
        let up = f(&x);
        x[[r, c]] = orig - h;
        let down = f(&x);
        x[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

/// Normwise relative error `max|a - b| / max|b|`.
pub fn rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    let num = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let den = numeric.iter().map(|b| b.abs()).fold(0.0, f64::max).max(1e-12);
    num / den
}
