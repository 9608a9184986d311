use crate::model::ModelParams;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Adam with decoupled weight decay. Moments are kept per parameter tensor
/// in the model's tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f32,
    pub weight_decay: f32,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ModelParams<f32>, lr: f32, weight_decay: f32) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamW {
            lr,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams<f32>, grads: &[Vec<f32>]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] = p.data[i] * decay - self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Tracks the best monitored value; `should_stop` once `patience` epochs
/// pass without a strict improvement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub last_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            last_epoch: 0,
        }
    }

    /// Records epoch `epoch` (1-based); returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        self.last_epoch = epoch;
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.last_epoch >= self.best_epoch + self.patience
    }
}
