use super::layers::{
    concat, conv_backward, conv_forward, maxpool_backward, maxpool_forward, norm_backward, norm_forward, relu_backward,
    relu_inplace, split_channels, upsample_backward, upsample_forward, NormCache, NormGrouping,
};
use super::tensor::{Scalar, Tensor};
use super::{Mode, ModelConfig, ModelParams, NormKind};
use crate::error::{Error, Result};

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Kaiming-normal with the given fan-in.
    Kaiming(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: usize,
    beta: usize,
    /// Buffer indices of running mean and variance (batch norm only).
    running: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    weight: usize,
    c_out: usize,
    norm: Norm,
}

#[derive(Debug, Clone)]
struct Stage {
    first: ConvBlock,
    second: ConvBlock,
}

/// Layer graph of the encoder-decoder. Holds indices into a
/// [`ModelParams`], never the weights themselves.
#[derive(Debug, Clone)]
pub struct Architecture {
    config: ModelConfig,
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
    enc: Vec<Stage>,
    up: Vec<ConvBlock>,
    dec: Vec<Stage>,
    head_weight: usize,
    head_bias: usize,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::default();
        let c = |l: usize| config.base_channels << l;
        let mut enc = Vec::new();
        let mut prev = config.in_channels;
        for l in 0..=config.depth {
            enc.push(b.stage(&format!("enc{l}"), prev, c(l), config.norm));
            prev = c(l);
        }
        let mut up = vec![None; config.depth];
        let mut dec = vec![None; config.depth];
        for l in (0..config.depth).rev() {
            up[l] = Some(b.block(&format!("up{l}"), c(l + 1), c(l), config.norm));
            dec[l] = Some(b.stage(&format!("dec{l}"), 2 * c(l), c(l), config.norm));
        }
        let head_weight = b.param("head.weight", vec![config.out_channels, c(0), 1, 1], Init::Kaiming(c(0)));
        let head_bias = b.param("head.bias", vec![config.out_channels], Init::Zeros);
        Ok(Architecture {
            config: config.clone(),
            params: b.params,
            buffers: b.buffers,
            enc,
            up: up.into_iter().map(Option::unwrap).collect(),
            dec: dec.into_iter().map(Option::unwrap).collect(),
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn buffer_specs(&self) -> &[ParamSpec] {
        &self.buffers
    }

    fn check(&self, params: &ModelParams<impl Scalar>, x: &[usize; 4]) -> Result<()> {
        if params.tensors.len() != self.params.len()
            || params.tensors.iter().zip(&self.params).any(|(t, s)| t.shape != s.shape)
        {
            return Err(Error::Shape("parameters do not match the architecture".into()));
        }
        let [n, c, h, w] = *x;
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if c != self.config.in_channels {
            return Err(Error::Shape(format!("expected {} input channels, got {c}", self.config.in_channels)));
        }
        let f = 1usize << self.config.depth;
        if h != w || h < f || h % f != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be square and divisible by 2^depth = {f}"
            )));
        }
        Ok(())
    }

    /// Forward pass without keeping intermediates.
    pub fn forward<T: Scalar>(&self, params: &ModelParams<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.run(params, x, mode, false)?.0)
    }

    /// Forward pass that records everything [`Architecture::backward`] needs.
    pub fn forward_tape<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tape<T>)> {
        let (y, tape) = self.run(params, x, mode, true)?;
        Ok((y, tape.expect("tape requested")))
    }

    fn run<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        x: &Tensor<T>,
        mode: Mode,
        record: bool,
    ) -> Result<(Tensor<T>, Option<Tape<T>>)> {
        self.check(params, &x.shape)?;
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("input", "non-finite value in batch"));
        }
        let mut tape = Tape::default();
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for l in 0..=depth {
            if l > 0 {
                let (p, arg) = maxpool_forward(&h);
                if record {
                    tape.pools.push((arg, h.shape));
                }
                skips.push(h);
                h = p;
            }
            h = self.stage_forward(params, &self.enc[l], h, mode, record.then_some(&mut tape.enc))?;
        }
        for l in (0..depth).rev() {
            let u = upsample_forward(&h);
            let u = self.block_forward(params, &self.up[l], u, mode, record.then_some(&mut tape.up))?;
            let skip = skips.pop().expect("one skip per level");
            let cat = concat(&skip, &u);
            h = self.stage_forward(params, &self.dec[l], cat, mode, record.then_some(&mut tape.dec))?;
        }
        let mut y = conv_forward(
            &h,
            &params.tensors[self.head_weight].data,
            Some(&params.tensors[self.head_bias].data),
            self.config.out_channels,
            1,
        );
        for v in &mut y.data {
            *v = v.tanh();
        }
        if record {
            tape.head_input = h;
            tape.output = y.clone();
        }
        Ok((y, record.then_some(tape)))
    }

    fn stage_forward<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        stage: &Stage,
        x: Tensor<T>,
        mode: Mode,
        mut tape: Option<&mut Vec<BlockCache<T>>>,
    ) -> Result<Tensor<T>> {
        let h = self.block_forward(params, &stage.first, x, mode, tape.as_deref_mut())?;
        self.block_forward(params, &stage.second, h, mode, tape)
    }

    fn block_forward<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        block: &ConvBlock,
        x: Tensor<T>,
        mode: Mode,
        tape: Option<&mut Vec<BlockCache<T>>>,
    ) -> Result<Tensor<T>> {
        let z = conv_forward(&x, &params.tensors[block.weight].data, None, block.c_out, 3);
        let grouping = match self.config.norm {
            NormKind::Batch => NormGrouping::Batch,
            NormKind::Instance => NormGrouping::Instance,
        };
        let running = match (mode, block.norm.running) {
            (Mode::Eval, Some((m, v))) => Some((&params.buffers[m].data[..], &params.buffers[v].data[..])),
            _ => None,
        };
        if grouping == NormGrouping::Batch && running.is_none() && z.batch() * z.plane() < 2 {
            return Err(Error::Shape("batch statistics need more than one value per channel".into()));
        }
        let (mut y, norm) = norm_forward(
            &z,
            &params.tensors[block.norm.gamma].data,
            &params.tensors[block.norm.beta].data,
            grouping,
            running,
        );
        relu_inplace(&mut y);
        if let Some(t) = tape {
            t.push(BlockCache {
                input: x,
                norm,
                output: y.clone(),
            });
        }
        Ok(y)
    }

    /// Gradients of `sum(dy * output)` with respect to every parameter.
    pub fn backward<T: Scalar>(&self, params: &ModelParams<T>, tape: &Tape<T>, dy: &Tensor<T>) -> Result<Vec<Vec<T>>> {
        if dy.shape != tape.output.shape {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match output {:?}",
                dy.shape, tape.output.shape
            )));
        }
        let mut grads: Vec<Vec<T>> = params.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        // tanh
        let mut d = dy.clone();
        for (g, &o) in d.data.iter_mut().zip(&tape.output.data) {
            *g = *g * (T::one() - o * o);
        }
        let (wg, bg) = two_mut(&mut grads, self.head_weight, self.head_bias);
        let mut d = conv_backward(
            &tape.head_input,
            &params.tensors[self.head_weight].data,
            &d,
            1,
            wg,
            Some(bg),
            true,
        )
        .expect("dx requested");

        let depth = self.config.depth;
        let mut dec_i = tape.dec.len();
        let mut up_i = tape.up.len();
        let mut skip_grads = Vec::with_capacity(depth);
        // decoder ran for l = depth-1 ..= 0, so unwind in reverse: l = 0 first
        for l in 0..depth {
            dec_i -= 2;
            d = self.stage_backward(params, &self.dec[l], &tape.dec[dec_i..dec_i + 2], d, &mut grads);
            let skip_c = self.config.base_channels << l;
            let (dskip, du) = split_channels(&d, skip_c);
            skip_grads.push(dskip);
            up_i -= 1;
            let du = self.block_backward(params, &self.up[l], &tape.up[up_i], du, &mut grads, true);
            d = upsample_backward(&du.expect("dx requested"));
        }
        let mut enc_i = tape.enc.len();
        for l in (0..=depth).rev() {
            enc_i -= 2;
            let need_dx = l > 0;
            let dx = self.stage_backward_opt(params, &self.enc[l], &tape.enc[enc_i..enc_i + 2], d, &mut grads, need_dx);
            if l > 0 {
                let (arg, shape) = &tape.pools[l - 1];
                let mut g = maxpool_backward(arg, *shape, &dx.expect("dx requested"));
                let skip = skip_grads.pop().expect("skip gradient per level");
                for (a, &b) in g.data.iter_mut().zip(&skip.data) {
                    *a = *a + b;
                }
                d = g;
            } else {
                d = Tensor::zeros([0, 0, 0, 0]);
            }
        }
        Ok(grads)
    }

    fn stage_backward<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        stage: &Stage,
        caches: &[BlockCache<T>],
        d: Tensor<T>,
        grads: &mut [Vec<T>],
    ) -> Tensor<T> {
        self.stage_backward_opt(params, stage, caches, d, grads, true)
            .expect("dx requested")
    }

    fn stage_backward_opt<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        stage: &Stage,
        caches: &[BlockCache<T>],
        d: Tensor<T>,
        grads: &mut [Vec<T>],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let d = self
            .block_backward(params, &stage.second, &caches[1], d, grads, true)
            .expect("dx requested");
        self.block_backward(params, &stage.first, &caches[0], d, grads, need_dx)
    }

    fn block_backward<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        block: &ConvBlock,
        cache: &BlockCache<T>,
        mut d: Tensor<T>,
        grads: &mut [Vec<T>],
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        relu_backward(&cache.output, &mut d);
        let (gg, bg) = two_mut(grads, block.norm.gamma, block.norm.beta);
        let dz = norm_backward(&cache.norm, &params.tensors[block.norm.gamma].data, &d, gg, bg);
        conv_backward(
            &cache.input,
            &params.tensors[block.weight].data,
            &dz,
            3,
            &mut grads[block.weight],
            None,
            need_dx,
        )
    }

    /// Folds the batch statistics recorded in `tape` into the running
    /// buffers: `r <- (1 - momentum) r + momentum * batch` with the unbiased
    /// batch variance.
    pub fn update_running_stats<T: Scalar>(&self, params: &mut ModelParams<T>, tape: &Tape<T>, momentum: f64) {
        let m = T::of(momentum);
        let mut apply = |block: &ConvBlock, cache: &BlockCache<T>| {
            let Some((mi, vi)) = block.norm.running else { return };
            if cache.norm.frozen || cache.norm.mean.is_empty() {
                return;
            }
            let [n, _, h, w] = cache.input.shape;
            let count = (n * h * w) as f64;
            let unbias = T::of(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
            for (r, &b) in params.buffers[mi].data.iter_mut().zip(&cache.norm.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in params.buffers[vi].data.iter_mut().zip(&cache.norm.var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
        };
        let mut e = 0;
        for stage in &self.enc {
            apply(&stage.first, &tape.enc[e]);
            apply(&stage.second, &tape.enc[e + 1]);
            e += 2;
        }
        // decoder and upsampling blocks were recorded from the deepest level up
        for (i, l) in (0..self.config.depth).rev().enumerate() {
            apply(&self.up[l], &tape.up[i]);
            apply(&self.dec[l].first, &tape.dec[2 * i]);
            apply(&self.dec[l].second, &tape.dec[2 * i + 1]);
        }
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a != b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Tensor<T>,
    norm: NormCache<T>,
    output: Tensor<T>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    enc: Vec<BlockCache<T>>,
    up: Vec<BlockCache<T>>,
    dec: Vec<BlockCache<T>>,
    pools: Vec<(Vec<u32>, [usize; 4])>,
    head_input: Tensor<T>,
    output: Tensor<T>,
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Tape {
            enc: Vec::new(),
            up: Vec::new(),
            dec: Vec::new(),
            pools: Vec::new(),
            head_input: Tensor {
                shape: [0; 4],
                data: Vec::new(),
            },
            output: Tensor {
                shape: [0; 4],
                data: Vec::new(),
            },
        }
    }
}

#[derive(Default)]
struct Builder {
    params: Vec<ParamSpec>,
    buffers: Vec<ParamSpec>,
}

impl Builder {
    fn param(&mut self, name: &str, shape: Vec<usize>, init: Init) -> usize {
        self.params.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: &str, len: usize, init: Init) -> usize {
        self.buffers.push(ParamSpec {
            name: name.into(),
            shape: vec![len],
            init,
        });
        self.buffers.len() - 1
    }

    fn block(&mut self, name: &str, c_in: usize, c_out: usize, norm: NormKind) -> ConvBlock {
        let weight = self.param(&format!("{name}.conv.weight"), vec![c_out, c_in, 3, 3], Init::Kaiming(c_in * 9));
        let gamma = self.param(&format!("{name}.norm.weight"), vec![c_out], Init::Ones);
        let beta = self.param(&format!("{name}.norm.bias"), vec![c_out], Init::Zeros);
        let running = (norm == NormKind::Batch).then(|| {
            (
                self.buffer(&format!("{name}.norm.running_mean"), c_out, Init::Zeros),
                self.buffer(&format!("{name}.norm.running_var"), c_out, Init::Ones),
            )
        });
        ConvBlock {
            weight,
            c_out,
            norm: Norm { gamma, beta, running },
        }
    }

    fn stage(&mut self, name: &str, c_in: usize, c_out: usize, norm: NormKind) -> Stage {
        Stage {
            first: self.block(&format!("{name}.0"), c_in, c_out, norm),
            second: self.block(&format!("{name}.1"), c_out, c_out, norm),
        }
    }
}
