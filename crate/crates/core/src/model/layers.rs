//! Layer kernels with explicit backward passes. All tensors are NCHW.

use super::tensor::{Scalar, Tensor};

/// Fills `col` (`c_in*k*k` rows by `h*w` columns) from one sample.
fn im2col<T: Scalar>(x: &[T], c_in: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c_in {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut col[row..row + hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let lo = (-dx).max(0) as usize;
                    let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    out[..lo.min(w)].fill(T::zero());
                    if lo < hi {
                        let s0 = (lo as isize + dx) as usize;
                        out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                    out[hi.max(lo).min(w)..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` into `dx`.
fn col2im<T: Scalar>(col: &[T], c_in: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c_in {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &col[row..row + hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let lo = (-dxo).max(0) as usize;
                    let hi = (w as isize - dxo).min(w as isize).max(0) as usize;
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in lo..hi {
                        let t = (x as isize + dxo) as usize;
                        dst[t] = dst[t] + src[y * w + x];
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution. `weight` is `[c_out, c_in, k, k]`.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: Option<&[T]>, c_out: usize, k: usize) -> Tensor<T> {
    let [n, c_in, h, w] = x.shape;
    let hw = h * w;
    let kk = c_in * k * k;
    debug_assert_eq!(weight.len(), c_out * kk);
    let mut y = Tensor::zeros([n, c_out, h, w]);
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for s in 0..n {
        let xs = x.sample(s);
        let b: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, c_in, h, w, k, &mut col);
            &col
        };
        let ys = y.sample_mut(s);
        T::gemm(
            c_out,
            kk,
            hw,
            T::one(),
            weight,
            kk as isize,
            1,
            b,
            hw as isize,
            1,
            T::zero(),
            ys,
            hw as isize,
            1,
        );
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                for v in &mut ys[co * hw..(co + 1) * hw] {
                    *v = *v + bv;
                }
            }
        }
    }
    y
}

/// Returns `dx`; accumulates into `dweight` and `dbias`.
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    k: usize,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let [n, c_in, h, w] = x.shape;
    let c_out = dy.shape[1];
    let hw = h * w;
    let kk = c_in * k * k;
    let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape));
    let mut dcol = if need_dx && k > 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
    let mut dbias = dbias;
    for s in 0..n {
        let xs = x.sample(s);
        let dys = dy.sample(s);
        let b: &[T] = if k == 1 {
            xs
        } else {
            im2col(xs, c_in, h, w, k, &mut col);
            &col
        };
        // dW += dY * col^T
        T::gemm(
            c_out,
            hw,
            kk,
            T::one(),
            dys,
            hw as isize,
            1,
            b,
            1,
            hw as isize,
            T::one(),
            dweight,
            kk as isize,
            1,
        );
        if let Some(db) = dbias.as_deref_mut() {
            for (co, g) in db.iter_mut().enumerate() {
                *g = dys[co * hw..(co + 1) * hw].iter().fold(*g, |a, &v| a + v);
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T * dY
            let target: &mut [T] = if k == 1 { dx.sample_mut(s) } else { &mut dcol };
            T::gemm(
                kk,
                c_out,
                hw,
                T::one(),
                weight,
                1,
                kk as isize,
                dys,
                hw as isize,
                1,
                T::zero(),
                target,
                hw as isize,
                1,
            );
            if k > 1 {
                col2im(&dcol, c_in, h, w, k, dx.sample_mut(s));
            }
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormGrouping {
    /// Statistics per channel over (N, H, W).
    Batch,
    /// Statistics per (sample, channel) over (H, W).
    Instance,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    /// 1/sqrt(var + eps) per group.
    pub inv_std: Vec<T>,
    /// Per-group batch means and biased variances (empty when running
    /// statistics were used).
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub grouping: NormGrouping,
    /// True when fixed statistics were used, so the normalisation is affine.
    pub frozen: bool,
}

pub const NORM_EPS: f64 = 1e-5;

/// Normalises with batch statistics, or with `running` (mean, var) when given.
pub fn norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    grouping: NormGrouping,
    running: Option<(&[T], &[T])>,
) -> (Tensor<T>, NormCache<T>) {
    let [n, c, h, w] = x.shape;
    let hw = h * w;
    let eps = T::of(NORM_EPS);
    let groups = match grouping {
        NormGrouping::Batch => c,
        NormGrouping::Instance => n * c,
    };
    let mut mean = vec![T::zero(); groups];
    let mut var = vec![T::zero(); groups];
    let group_of = |s: usize, ch: usize| match grouping {
        NormGrouping::Batch => ch,
        NormGrouping::Instance => s * c + ch,
    };
    let frozen = running.is_some();
    if let Some((rm, rv)) = running {
        mean.copy_from_slice(rm);
        var.copy_from_slice(rv);
    } else {
        let count = T::of((hw * n * c / groups) as f64);
        for s in 0..n {
            for ch in 0..c {
                let g = group_of(s, ch);
                let p = &x.data[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                mean[g] = p.iter().fold(mean[g], |a, &v| a + v);
            }
        }
        for m in &mut mean {
            *m = *m / count;
        }
        for s in 0..n {
            for ch in 0..c {
                let g = group_of(s, ch);
                let mu = mean[g];
                let p = &x.data[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                var[g] = p.iter().fold(var[g], |a, &v| a + (v - mu) * (v - mu));
            }
        }
        for v in &mut var {
            *v = *v / count;
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut y = Tensor::zeros(x.shape);
    for s in 0..n {
        for ch in 0..c {
            let g = group_of(s, ch);
            let (mu, is, ga, be) = (mean[g], inv_std[g], gamma[ch], beta[ch]);
            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            for ((xh, yo), &xi) in xhat[r.clone()].iter_mut().zip(&mut y.data[r.clone()]).zip(&x.data[r]) {
                *xh = (xi - mu) * is;
                *yo = ga * *xh + be;
            }
        }
    }
    let cache = NormCache {
        xhat,
        inv_std,
        mean: if frozen { Vec::new() } else { mean },
        var: if frozen { Vec::new() } else { var },
        grouping,
        frozen,
    };
    (y, cache)
}

/// Returns `dx`; accumulates into `dgamma` and `dbeta`.
pub fn norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &[T],
    dy: &Tensor<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let [n, c, h, w] = dy.shape;
    let hw = h * w;
    let groups = cache.inv_std.len();
    let group_of = |s: usize, ch: usize| match cache.grouping {
        NormGrouping::Batch => ch,
        NormGrouping::Instance => s * c + ch,
    };
    // per-group sums of dxhat and dxhat * xhat
    let mut sum_d = vec![T::zero(); groups];
    let mut sum_dx = vec![T::zero(); groups];
    for s in 0..n {
        for ch in 0..c {
            let g = group_of(s, ch);
            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            let (mut a, mut b) = (T::zero(), T::zero());
            for (&d, &xh) in dy.data[r.clone()].iter().zip(&cache.xhat[r]) {
                a = a + d;
                b = b + d * xh;
            }
            dbeta[ch] = dbeta[ch] + a;
            dgamma[ch] = dgamma[ch] + b;
            sum_d[g] = sum_d[g] + a * gamma[ch];
            sum_dx[g] = sum_dx[g] + b * gamma[ch];
        }
    }
    let count = T::of((n * c * hw / groups) as f64);
    let mut dx = Tensor::zeros(dy.shape);
    for s in 0..n {
        for ch in 0..c {
            let g = group_of(s, ch);
            let is = cache.inv_std[g];
            let ga = gamma[ch];
            let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
            if cache.frozen {
                for (o, &d) in dx.data[r.clone()].iter_mut().zip(&dy.data[r]) {
                    *o = d * ga * is;
                }
            } else {
                let md = sum_d[g] / count;
                let mdx = sum_dx[g] / count;
                for ((o, &d), &xh) in dx.data[r.clone()].iter_mut().zip(&dy.data[r.clone()]).zip(&cache.xhat[r]) {
                    *o = is * (d * ga - md - xh * mdx);
                }
            }
        }
    }
    dx
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// `dy` masked by the positive part of the ReLU output `y`.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    for (d, &o) in dy.data.iter_mut().zip(&y.data) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
}

/// 2x2 max-pool; returns output and flat argmax index within each plane.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape;
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                y.data[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool_backward<T: Scalar>(arg: &[u32], input_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let plane_out = dy.plane();
    let mut dx = Tensor::zeros(input_shape);
    for p in 0..n * c {
        for o in 0..plane_out {
            let i = p * h * w + arg[p * plane_out + o] as usize;
            dx.data[i] = dx.data[i] + dy.data[p * plane_out + o];
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape;
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = Tensor::zeros([n, c, ho, wo]);
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut y.data[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, ho, wo] = dy.shape;
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for p in 0..n * c {
        let src = &dy.data[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = (oy / 2) * w + ox / 2;
                dst[i] = dst[i] + src[oy * wo + ox];
            }
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape;
    let cb = b.shape[1];
    assert_eq!([n, h, w], [b.shape[0], b.shape[2], b.shape[3]], "concat shapes");
    let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
    for s in 0..n {
        out.extend_from_slice(a.sample(s));
        out.extend_from_slice(b.sample(s));
    }
    Tensor::from_vec([n, ca + cb, h, w], out)
}

pub fn split_channels<T: Scalar>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = d.shape;
    let cb = c - ca;
    let hw = h * w;
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * cb * hw);
    for s in 0..n {
        let x = d.sample(s);
        a.extend_from_slice(&x[..ca * hw]);
        b.extend_from_slice(&x[ca * hw..]);
    }
    (Tensor::from_vec([n, ca, h, w], a), Tensor::from_vec([n, cb, h, w], b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, wt: &[f64], c_out: usize, k: usize) -> Tensor<f64> {
        let [n, c_in, h, w] = x.shape;
        let p = (k / 2) as isize;
        let mut y = Tensor::zeros([n, c_out, h, w]);
        for s in 0..n {
            for co in 0..c_out {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = yy as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                        acc += wt[((co * c_in + ci) * k + ky) * k + kx]
                                            * x.data[((s * c_in + ci) * h + sy as usize) * w + sx as usize];
                                    }
                                }
                            }
                        }
                        y.data[((s * c_out + co) * h + yy) * w + xx] = acc;
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: [usize; 4], a: f64) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i as f64 * a).sin() * 3.0).round() / 3.0 + 0.1 * i as f64 % 1.3).collect())
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = ramp([2, 3, 5, 7], 0.37);
        let wt: Vec<f64> = (0..4 * 3 * 9).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let y = conv_forward(&x, &wt, None, 4, 3);
        let r = naive_conv(&x, &wt, 4, 3);
        for (a, b) in y.data.iter().zip(&r.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).cos()).collect();
        let z: Vec<f64> = (0..c * k * k * h * w).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut col = vec![0.0; z.len()];
        im2col(&x, c, h, w, k, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&z, c, h, w, k, &mut back);
        let lhs: f64 = col.iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn batch_norm_output_is_standardised() {
        let x = ramp([3, 2, 4, 4], 0.9);
        let (y, _) = norm_forward(&x, &[1.0, 1.0], &[0.0, 0.0], NormGrouping::Batch, None);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|s| y.data[(s * 2 + ch) * 16..(s * 2 + ch + 1) * 16].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = ramp([1, 2, 4, 6], 0.5);
        let (p, arg) = maxpool_forward(&x);
        assert_eq!(p.shape, [1, 2, 2, 3]);
        let dx = maxpool_backward(&arg, x.shape, &Tensor::from_vec(p.shape, vec![1.0; 12]));
        assert_eq!(dx.data.iter().sum::<f64>(), 12.0);
        let u = upsample_forward(&p);
        assert_eq!(u.shape, x.shape);
        assert_eq!(upsample_backward(&u).data, p.data.iter().map(|v| 4.0 * v).collect::<Vec<_>>());
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = ramp([2, 1, 3, 3], 0.2);
        let b = ramp([2, 3, 3, 3], 0.4);
        let (a2, b2) = split_channels(&concat(&a, &b), 1);
        assert_eq!((a2, b2), (a, b));
    }
}
