use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::basemodel::Architecture;
use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::numerics::Activation;
use crate::shiftbench::BenchConfig;

pub const DEFAULT_TARGET_FLOOR: f64 = 1e-6;

fn gelu() -> Activation {
    Activation::Gelu
}

/// MLP base from `input_dim` through `hidden` to `output_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSpec {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "gelu")]
    pub activation: Activation,
}

impl Default for BaseSpec {
    fn default() -> Self {
        BaseSpec {
            hidden: Vec::new(),
            activation: gelu(),
        }
    }
}

impl BaseSpec {
    pub fn architecture(&self, bench: &BenchConfig) -> Architecture {
        let mut dims = vec![bench.input_dim];
        dims.extend(&self.hidden);
        dims.push(bench.output_dim);
        Architecture::Mlp {
            dims,
            activation: self.activation,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_floor() -> f64 {
    DEFAULT_TARGET_FLOOR
}

/// One JSON file describing a whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub base: BaseSpec,
    pub pretrain: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub adapters: Vec<AdapterConfig>,
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_floor")]
    pub target_floor: f64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<()> {
        self.bench.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        let arch = self.base.architecture(&self.bench);
        arch.validate()?;
        for adapter in self.adapter.iter().chain(&self.adapters) {
            adapter.validate()?;
            for point in &adapter.attach_points {
                let io = arch
                    .layer_io(point)
                    .ok_or_else(|| Error::UnknownAttachPoint(point.clone()))?;
                adapter.tensor_shapes(point, io)?;
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if !(self.target_floor >= 0.0 && self.target_floor.is_finite()) {
            return Err(Error::InvalidConfig(
                "target_floor must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn target_mse(&self) -> f64 {
        self.bench.target_mse(self.target_floor)
    }

    /// Copy with every seed (benchmark and run seeds) replaced by `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.bench.seed = seed;
        self.seeds = vec![seed];
        self
    }
}
