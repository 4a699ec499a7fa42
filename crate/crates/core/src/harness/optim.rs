use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamSet;

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// `buf ← μ·buf + g; p ← p − lr·buf`
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr >= 0.0 && lr.is_finite() && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && lr.is_finite() && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer {self:?}")))
        }
    }
}

/// Optimizer state over a fixed list of parameter sets.
pub struct Optimizer {
    config: OptimizerConfig,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, sets: &[&ParamSet]) -> Self {
        let zeros: Vec<Vec<f64>> = sets
            .iter()
            .flat_map(|s| s.tensors().iter().map(|t| vec![0.0; t.len()]))
            .collect();
        Optimizer {
            config,
            step: 0,
            second: zeros.clone(),
            first: zeros,
        }
    }

    /// Applies one update. `grads` is flattened in the same (set, tensor)
    /// order the optimizer was built with.
    pub fn step(&mut self, sets: &mut [&mut ParamSet], grads: &[Tensor]) -> Result<()> {
        self.step += 1;
        let mut slot = 0;
        for set in sets.iter_mut() {
            for idx in 0..set.len() {
                let grad = grads[slot].data();
                let current = set.tensor(idx);
                let mut data = current.data().to_vec();
                match self.config {
                    OptimizerConfig::Sgd { lr, momentum } => {
                        let buf = &mut self.first[slot];
                        for ((p, g), b) in data.iter_mut().zip(grad).zip(buf.iter_mut()) {
                            *b = momentum * *b + g;
                            *p -= lr * *b;
                        }
                    }
                    OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                        let c1 = 1.0 - beta1.powi(self.step);
                        let c2 = 1.0 - beta2.powi(self.step);
                        let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                        for (j, p) in data.iter_mut().enumerate() {
                            let g = grad[j];
                            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                            *p -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                        }
                    }
                }
                let shape = current.shape().to_vec();
                set.set(idx, Tensor::from_op("optimizer_step", shape, data)?)?;
                slot += 1;
            }
        }
        Ok(())
    }
}
