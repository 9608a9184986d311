//! Encoder-decoder network with skip connections and a tanh output.

pub mod layers;
mod tensor;
mod unet;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use tensor::{Scalar, Tensor};
pub use unet::{Architecture, Init, ParamSpec, Tape};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Parameter count the default configuration should land near.
pub const REFERENCE_PARAM_COUNT: usize = 1_882_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Batch,
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics.
    Train,
    /// Running statistics (batch norm) or per-sample statistics (instance norm).
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of pooling steps.
    pub depth: usize,
    /// Channels of the first stage; doubled at each level.
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm: NormKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            base_channels: 15,
            in_channels: 1,
            out_channels: 1,
            norm: NormKind::Batch,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.depth) {
            return Err(Error::invalid("depth", format!("{} not in 1..=6", self.depth)));
        }
        if self.base_channels == 0 || self.base_channels > 256 {
            return Err(Error::invalid("base_channels", format!("{} not in 1..=256", self.base_channels)));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("in_channels", "must be positive"));
        }
        if self.out_channels == 0 {
            return Err(Error::invalid("out_channels", "must be positive"));
        }
        Ok(())
    }

    /// Smallest square input side the network accepts.
    pub fn min_side(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Trainable tensors plus non-trainable buffers (running statistics), in
/// the architecture's deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor<T>>,
    pub buffers: Vec<NamedTensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |ts: &[NamedTensor<T>]| {
            ts.iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| U::of(v.f64())).collect(),
                })
                .collect()
        };
        ModelParams {
            config: self.config.clone(),
            tensors: conv(&self.tensors),
            buffers: conv(&self.buffers),
        }
    }
}

fn materialise<T: Scalar>(specs: &[ParamSpec], rng: &mut impl rand::Rng) -> Vec<NamedTensor<T>> {
    specs
        .iter()
        .map(|s| {
            let len: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Zeros => vec![T::zero(); len],
                Init::Ones => vec![T::one(); len],
                Init::Kaiming(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..len).map(|_| T::of(normal.sample(rng))).collect()
                }
            };
            NamedTensor {
                name: s.name.clone(),
                shape: s.shape.clone(),
                data,
            }
        })
        .collect()
}

/// Kaiming-normal convolution weights, unit norm scales, zero shifts and
/// biases. Same seed, same weights.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let arch = Architecture::new(config)?;
    let mut rng = rng_for(seed, &[0x1417]);
    let tensors = materialise(arch.param_specs(), &mut rng);
    let buffers = materialise(arch.buffer_specs(), &mut rng);
    Ok(ModelParams {
        config: config.clone(),
        tensors,
        buffers,
    })
}

/// Trainable parameter count, computed in closed form from the stage widths.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let c = |l: usize| config.base_channels << l;
    // two bias-free 3x3 convs, each followed by a (scale, shift) norm
    let stage = |a: usize, b: usize| 9 * a * b + 9 * b * b + 4 * b;
    let mut total = 0;
    let mut prev = config.in_channels;
    for l in 0..=config.depth {
        total += stage(prev, c(l));
        prev = c(l);
    }
    for l in 0..config.depth {
        total += 9 * c(l + 1) * c(l) + 2 * c(l);
        total += stage(2 * c(l), c(l));
    }
    Ok(total + c(0) * config.out_channels + config.out_channels)
}

/// Evaluation-mode forward pass on an `[n, in_channels, d, d]` batch.
pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    Architecture::new(&params.config)?.forward(params, batch, Mode::Eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            depth: 1,
            base_channels: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn tiny_count_by_hand() {
        // enc0 1->1: 9 + 9 + 2*2; enc1 1->2: 18 + 36 + 2*4; up0 2->1: 18 + 2;
        // dec0 2->1: 18 + 9 + 2*2; head: 1 weight + 1 bias
        let expected = 22 + 62 + 20 + 31 + 2;
        assert_eq!(param_count(&tiny()).unwrap(), expected);
        assert_eq!(init_params::<f32>(&tiny(), 0).unwrap().count(), expected);
    }

    #[test]
    fn closed_form_matches_tensors() {
        for (depth, base) in [(1, 3), (2, 4), (3, 2), (4, 15)] {
            let cfg = ModelConfig {
                depth,
                base_channels: base,
                ..ModelConfig::default()
            };
            assert_eq!(param_count(&cfg).unwrap(), init_params::<f32>(&cfg, 1).unwrap().count());
        }
    }

    #[test]
    fn default_is_near_reference() {
        let n = param_count(&ModelConfig::default()).unwrap() as f64;
        assert!((n / REFERENCE_PARAM_COUNT as f64 - 1.0).abs() <= 0.15, "{n}");
    }

    #[test]
    fn output_shape_and_range() {
        let cfg = ModelConfig {
            depth: 2,
            base_channels: 4,
            ..ModelConfig::default()
        };
        let p = init_params::<f32>(&cfg, 3).unwrap();
        let x = Tensor::from_vec([2, 1, 8, 8], (0..128).map(|i| (i as f32 * 0.1).sin()).collect());
        let y = forward(&p, &x).unwrap();
        assert_eq!(y.shape, [2, 1, 8, 8]);
        assert!(y.data.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn bad_inputs_are_shape_errors() {
        let cfg = ModelConfig {
            depth: 2,
            base_channels: 2,
            ..ModelConfig::default()
        };
        let p = init_params::<f64>(&cfg, 0).unwrap();
        for shape in [[1, 1, 6, 6], [1, 2, 8, 8], [1, 1, 8, 4], [1, 1, 2, 2]] {
            let x = Tensor::zeros(shape);
            assert!(matches!(forward(&p, &x), Err(Error::Shape(_))), "{shape:?}");
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = init_params::<f32>(&tiny(), 9).unwrap();
        assert_eq!(a, init_params::<f32>(&tiny(), 9).unwrap());
        assert_ne!(a, init_params::<f32>(&tiny(), 10).unwrap());
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = ModelConfig {
            base_channels: 0,
            ..ModelConfig::default()
        };
        match param_count(&cfg) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "base_channels"),
            other => panic!("{other:?}"),
        }
    }
}
