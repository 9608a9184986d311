//! Gaussian-window SSIM with reflect padding, and its gradient with respect
//! to the first image.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
/// Dynamic range of data normalised to [-1, 1].
pub const DATA_RANGE: f64 = 2.0;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

fn c1() -> f64 {
    (K1 * DATA_RANGE).powi(2)
}

fn c2() -> f64 {
    (K2 * DATA_RANGE).powi(2)
}

fn taps() -> [f64; WINDOW] {
    let r = (WINDOW / 2) as f64;
    let mut g = [0.0; WINDOW];
    for (k, t) in g.iter_mut().enumerate() {
        let x = k as f64 - r;
        *t = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|t| t / s)
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let i = if i < 0 { -i } else { i };
    (if i >= n { 2 * (n - 1) - i } else { i }) as usize
}

/// Separable Gaussian filter and its adjoint on row-major `h x w` buffers.
struct Window {
    g: [f64; WINDOW],
    h: usize,
    w: usize,
}

impl Window {
    fn new(h: usize, w: usize) -> Self {
        Window { g: taps(), h, w }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (h, w, r) = (self.h, self.w, (WINDOW / 2) as isize);
        let mut tmp = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, &g) in self.g.iter().enumerate() {
                    acc += g * x[i * w + reflect(j as isize + k as isize - r, w)];
                }
                tmp[i * w + j] = acc;
            }
        }
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for (k, &g) in self.g.iter().enumerate() {
                let src = reflect(i as isize + k as isize - r, h);
                for j in 0..w {
                    out[i * w + j] += g * tmp[src * w + j];
                }
            }
        }
        out
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let (h, w, r) = (self.h, self.w, (WINDOW / 2) as isize);
        let mut tmp = vec![0.0; h * w];
        for i in 0..h {
            for (k, &g) in self.g.iter().enumerate() {
                let dst = reflect(i as isize + k as isize - r, h);
                for j in 0..w {
                    tmp[dst * w + j] += g * y[i * w + j];
                }
            }
        }
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let v = tmp[i * w + j];
                for (k, &g) in self.g.iter().enumerate() {
                    out[i * w + reflect(j as isize + k as isize - r, w)] += g * v;
                }
            }
        }
        out
    }
}

struct Parts {
    s: Vec<f64>,
    mx: Vec<f64>,
    my: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
}

fn check(x: &Array2<f64>, y: &Array2<f64>) -> Result<(usize, usize)> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("SSIM inputs {:?} vs {:?}", x.dim(), y.dim())));
    }
    let (h, w) = x.dim();
    if h < WINDOW || w < WINDOW {
        return Err(Error::Shape(format!("image {h}x{w} smaller than the {WINDOW}x{WINDOW} window")));
    }
    Ok((h, w))
}

fn parts(win: &Window, x: &[f64], y: &[f64]) -> Parts {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = win.apply(x);
    let my = win.apply(y);
    let exx = win.apply(&xx);
    let eyy = win.apply(&yy);
    let exy = win.apply(&xy);
    let (c1, c2) = (c1(), c2());
    let n = x.len();
    let mut p = Parts {
        s: vec![0.0; n],
        a1: vec![0.0; n],
        a2: vec![0.0; n],
        b1: vec![0.0; n],
        b2: vec![0.0; n],
        mx,
        my,
    };
    for i in 0..n {
        let (ux, uy) = (p.mx[i], p.my[i]);
        p.a1[i] = 2.0 * ux * uy + c1;
        p.a2[i] = 2.0 * (exy[i] - ux * uy) + c2;
        p.b1[i] = ux * ux + uy * uy + c1;
        p.b2[i] = (exx[i] - ux * ux) + (eyy[i] - uy * uy) + c2;
        p.s[i] = (p.a1[i] * p.a2[i]) / (p.b1[i] * p.b2[i]);
    }
    p
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// Per-pixel SSIM map, same size as the inputs.
pub fn ssim_map(x: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    let (h, w) = check(x, y)?;
    let p = parts(&Window::new(h, w), &flat(x), &flat(y));
    Ok(Array2::from_shape_vec((h, w), p.s).expect("shape"))
}

/// Mean SSIM and its gradient with respect to `x`.
pub fn mean_ssim_grad(x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let (h, w) = check(x, y)?;
    let win = Window::new(h, w);
    let xf = flat(x);
    let yf = flat(y);
    let p = parts(&win, &xf, &yf);
    let n = (h * w) as f64;
    let mean = p.s.iter().sum::<f64>() / n;
    let mut d_mu = vec![0.0; h * w];
    let mut d_exx = vec![0.0; h * w];
    let mut d_exy = vec![0.0; h * w];
    for i in 0..h * w {
        let s = p.s[i] / n;
        let (ux, uy) = (p.mx[i], p.my[i]);
        d_mu[i] = s * (2.0 * uy / p.a1[i] - 2.0 * uy / p.a2[i] - 2.0 * ux / p.b1[i] + 2.0 * ux / p.b2[i]);
        d_exy[i] = s * 2.0 / p.a2[i];
        d_exx[i] = -s / p.b2[i];
    }
    let g_mu = win.adjoint(&d_mu);
    let g_xx = win.adjoint(&d_exx);
    let g_xy = win.adjoint(&d_exy);
    let grad: Vec<f64> = (0..h * w)
        .map(|i| g_mu[i] + 2.0 * xf[i] * g_xx[i] + yf[i] * g_xy[i])
        .collect();
    Ok((mean, Array2::from_shape_vec((h, w), grad).expect("shape")))
}

/// Number of dyadic scales used for an image of side `d`.
pub fn ms_scales(d: usize) -> usize {
    if d < WINDOW {
        return 0;
    }
    ((d as f64 / WINDOW as f64).log2().floor() as usize + 1).min(5)
}

pub(crate) fn avg_pool2(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(i, j)| {
        0.25 * (x[[2 * i, 2 * j]] + x[[2 * i + 1, 2 * j]] + x[[2 * i, 2 * j + 1]] + x[[2 * i + 1, 2 * j + 1]])
    })
}

fn avg_pool2_adjoint(g: &Array2<f64>, h: usize, w: usize) -> Array2<f64> {
    let mut out = Array2::zeros((h, w));
    for ((i, j), &v) in g.indexed_iter() {
        for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            out[[2 * i + a, 2 * j + b]] += 0.25 * v;
        }
    }
    out
}

/// Uniformly weighted mean of per-scale mean SSIM, and its gradient.
pub fn ms_ssim_grad(x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    check(x, y)?;
    let (h, w) = x.dim();
    let scales = ms_scales(h.min(w));
    let mut xs = vec![x.clone()];
    let mut ys = vec![y.clone()];
    for s in 1..scales {
        xs.push(avg_pool2(&xs[s - 1]));
        ys.push(avg_pool2(&ys[s - 1]));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(scales);
    for s in 0..scales {
        let (v, g) = mean_ssim_grad(&xs[s], &ys[s])?;
        total += v;
        grads.push(g);
    }
    let k = scales as f64;
    // fold coarse-scale gradients back to full resolution
    let mut acc = grads.pop().expect("at least one scale");
    for s in (0..scales - 1).rev() {
        let (hs, ws) = xs[s].dim();
        acc = avg_pool2_adjoint(&acc, hs, ws) + &grads[s];
    }
    Ok((total / k, acc / k))
}
