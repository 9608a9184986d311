mod common;

use common::*;
use mardtn::losses::*;
use ndarray::{array, Array2};
use proptest::prelude::*;

fn uniform(d: usize, w: f64) -> WeightMap {
    WeightMap {
        w_pixels: Array2::from_elem((d, d), w),
    }
}

#[test]
fn ffl_matches_brute_force_dft() {
    for seed in 0..5 {
        let p = random_image(seed, 8, 8);
        let g = random_image(100 + seed, 8, 8);
        for (alpha, beta) in [(1.0, 1.0), (0.5, 1.5), (1.5, 0.5)] {
            let fast = ffl(&p, &g, alpha, beta).unwrap();
            let slow = ffl_oracle(&p, &g, alpha, beta);
            assert!((fast - slow).abs() / slow < 1e-9, "{fast} vs {slow}");
        }
    }
    let p = random_image(7, 4, 4);
    let g = random_image(8, 4, 4);
    let (fast, slow) = (ffl(&p, &g, 0.5, 1.5).unwrap(), ffl_oracle(&p, &g, 0.5, 1.5));
    assert!((fast - slow).abs() / slow < 1e-9);
}

#[test]
fn ffl_parseval() {
    for seed in 0..5 {
        let p = random_image(seed, 8, 8);
        let g = random_image(50 + seed, 8, 8);
        let v = ffl(&p, &g, 0.0, 1.0).unwrap();
        let m = 64.0 * mse(&p, &g).unwrap();
        assert!((v - m).abs() / m < 1e-9);
    }
}

#[test]
fn identical_images() {
    let x = textured_image(3, 16);
    assert_eq!(ssim_loss(&x, &x).unwrap(), 0.0);
    assert_eq!(ms_ssim_loss(&x, &x).unwrap(), 0.0);
    assert_eq!(ffl(&x, &x, 1.0, 1.0).unwrap(), 0.0);
    assert_eq!(l1_weighted(&x, &x, &uniform(16, 3.0)).unwrap(), 0.0);
    let spec = LossSpec::new(&[LossTerm::L1w, LossTerm::Ssim]);
    assert_eq!(combine(&spec, &x, &x, &uniform(16, 1.0)).unwrap(), 0.0);
}

#[test]
fn ssim_matches_direct_window_sum() {
    let x = textured_image(1, 20);
    let y = textured_image(2, 20);
    let fast = ssim::ssim_map(&x, &y).unwrap();
    let slow = ssim_map_oracle(&x, &y);
    for (a, b) in fast.iter().zip(slow.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn constant_image_ssim_closed_form() {
    let (c, delta) = (0.2, 0.3);
    let gt = Array2::from_elem((16, 16), c);
    let pred = Array2::from_elem((16, 16), c + delta);
    let c1 = (0.01f64 * 2.0).powi(2);
    let expected = (2.0 * c * (c + delta) + c1) / (c * c + (c + delta) * (c + delta) + c1);
    assert!((1.0 - ssim_loss(&pred, &gt).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn negated_image_is_anticorrelated() {
    // SSIM is windowed, so "zero mean" has to hold per window: a checkerboard
    // under a smooth random envelope
    for seed in 0..4 {
        let env = textured_image(seed, 16);
        let x = Array2::from_shape_fn((16, 16), |(i, j)| {
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            sign * (0.5 + 0.3 * env[[i / 4 * 4, j / 4 * 4]].tanh())
        });
        let loss = ssim_loss(&(-&x), &x).unwrap();
        assert!(loss >= 1.0, "{loss}");
    }
}

#[test]
fn combine_is_additive() {
    let p = array![[0.1, -0.2], [0.4, 0.0]];
    let g = array![[0.0, 0.3], [0.1, -0.5]];
    let w = WeightMap {
        w_pixels: array![[1.0, 100.0], [0.1, 1.0]],
    };
    let spec = LossSpec::new(&[LossTerm::L1w, LossTerm::Mse]);
    let both = combine(&spec, &p, &g, &w).unwrap();
    let sum = l1_weighted(&p, &g, &w).unwrap() + mse(&p, &g).unwrap();
    assert!((both - sum).abs() < 1e-15);
    let single = LossSpec::new(&[LossTerm::L1w]);
    assert_eq!(combine(&single, &p, &g, &w).unwrap(), l1_weighted(&p, &g, &w).unwrap());
}

fn check_grad(
    name: &str,
    d: usize,
    value: impl Fn(&Array2<f64>, &Array2<f64>) -> f64,
    grad: impl Fn(&Array2<f64>, &Array2<f64>) -> (f64, Array2<f64>),
) {
    for seed in 0..3 {
        let p = textured_image(seed, d);
        let g = textured_image(10 + seed, d);
        let (v, an) = grad(&p, &g);
        assert!((v - value(&p, &g)).abs() <= 1e-12 * v.abs().max(1.0), "{name}: value mismatch");
        let fd = finite_diff(|x| value(x, &g), &p, 1e-6);
        let e = rel_err(&an, &fd);
        assert!(e < 1e-4, "{name} d={d} seed={seed}: rel err {e}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mask = Array2::from_shape_fn((8, 8), |(i, j)| (i + j) % 3 != 0);
    let w = build_weight_map(&mask, true, 25.0).unwrap();
    check_grad("L1w", 8, |p, g| l1_weighted(p, g, &w).unwrap(), |p, g| l1_weighted_grad(p, g, &w).unwrap());
    check_grad("MSE", 8, |p, g| mse(p, g).unwrap(), |p, g| mse_grad(p, g).unwrap());
    for alpha in [0.5, 1.0] {
        check_grad("FFL", 8, |p, g| ffl(p, g, alpha, 1.5).unwrap(), |p, g| ffl_grad(p, g, alpha, 1.5).unwrap());
    }
    check_grad("SSIM", 16, |p, g| ssim_loss(p, g).unwrap(), |p, g| ssim_loss_grad(p, g).unwrap());
    check_grad("MS-SSIM", 32, |p, g| ms_ssim_loss(p, g).unwrap(), |p, g| ms_ssim_loss_grad(p, g).unwrap());
    let spec = LossSpec::new(&[LossTerm::L1w, LossTerm::Ssim, LossTerm::Ffl]);
    let wm = build_weight_map(&Array2::from_elem((16, 16), true), true, 100.0).unwrap();
    check_grad(
        "combined",
        16,
        |p, g| combine(&spec, p, g, &wm).unwrap(),
        |p, g| {
            let (b, grad) = combine_grad(&spec, p, g, &wm).unwrap();
            (b.total, grad)
        },
    );
}

proptest! {
    #[test]
    fn weight_scaling_is_linear(seed in 0u64..1000, k in 0.1f64..10.0) {
        let p = random_image(seed, 6, 6);
        let g = random_image(seed + 1, 6, 6);
        let w = WeightMap { w_pixels: random_image(seed + 2, 6, 6).mapv(f64::abs) };
        let scaled = WeightMap { w_pixels: &w.w_pixels * k };
        let a = l1_weighted(&p, &g, &scaled).unwrap();
        let b = k * l1_weighted(&p, &g, &w).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }

    #[test]
    fn terms_are_non_negative(seed in 0u64..1000) {
        let p = textured_image(seed, 16);
        let g = textured_image(seed + 7, 16);
        prop_assert!(mse(&p, &g).unwrap() > 0.0);
        prop_assert!(ffl(&p, &g, 1.0, 1.0).unwrap() > 0.0);
        prop_assert!(l1_weighted(&p, &g, &uniform(16, 1.0)).unwrap() > 0.0);
        prop_assert!(ssim_loss(&p, &g).unwrap() > 0.0);
    }
}
