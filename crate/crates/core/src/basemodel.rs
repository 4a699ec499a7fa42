//! Frozen primary networks: an MLP stack and a small ConvNeXt-style stack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, Tape, Tensor, Var};
use crate::params::ParamSet;
use crate::rng;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const DEPTHWISE_KERNEL: usize = 3;
pub const EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Linear layers between consecutive widths in `dims`, with the
    /// activation between layers (not after the last).
    Mlp { dims: Vec<usize>, activation: Activation },
    /// Residual blocks: depthwise 3×3 → layer norm → pointwise expand (4×)
    /// → GELU → pointwise contract, added to the block input.
    ConvnextTinyToy {
        channels: usize,
        blocks: usize,
        height: usize,
        width: usize,
    },
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp { dims, .. } => {
                if dims.len() < 2 || dims.contains(&0) {
                    return Err(Error::InvalidConfig(format!("bad mlp dims {dims:?}")));
                }
            }
            Architecture::ConvnextTinyToy {
                channels,
                blocks,
                height,
                width,
            } => {
                if [*channels, *blocks, *height, *width].contains(&0) {
                    return Err(Error::InvalidConfig("convnext dimensions must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Architecture::Mlp { .. } => "mlp",
            Architecture::ConvnextTinyToy { .. } => "convnext_tiny_toy",
        }
    }

    /// Names of the layers adapters may attach to, in forward order.
    pub fn layer_names(&self) -> Vec<String> {
        match self {
            Architecture::Mlp { dims, .. } => (0..dims.len() - 1).map(|i| format!("fc{i}")).collect(),
            Architecture::ConvnextTinyToy { blocks, .. } => (0..*blocks).map(|i| format!("block{i}")).collect(),
        }
    }

    pub fn layer_io(&self, name: &str) -> Option<LayerIo> {
        let pos = self.layer_names().iter().position(|n| n == name)?;
        Some(match self {
            Architecture::Mlp { dims, .. } => LayerIo::Dense {
                input: dims[pos],
                output: dims[pos + 1],
            },
            Architecture::ConvnextTinyToy { channels, .. } => LayerIo::Conv { channels: *channels },
        })
    }

    /// Expected parameter names and shapes, in registry order.
    pub fn signature(&self) -> Vec<(String, Vec<usize>)> {
        let mut sig = Vec::new();
        match self {
            Architecture::Mlp { dims, .. } => {
                for (i, w) in dims.windows(2).enumerate() {
                    sig.push((format!("fc{i}.weight"), vec![w[1], w[0]]));
                    sig.push((format!("fc{i}.bias"), vec![w[1]]));
                }
            }
            Architecture::ConvnextTinyToy {
                channels: c, blocks, ..
            } => {
                let (c, k, e) = (*c, DEPTHWISE_KERNEL, EXPANSION * c);
                for i in 0..*blocks {
                    sig.push((format!("block{i}.dw"), vec![c, k, k]));
                    sig.push((format!("block{i}.ln.gamma"), vec![c]));
                    sig.push((format!("block{i}.ln.beta"), vec![c]));
                    sig.push((format!("block{i}.pw1.weight"), vec![e, c]));
                    sig.push((format!("block{i}.pw1.bias"), vec![e]));
                    sig.push((format!("block{i}.pw2.weight"), vec![c, e]));
                    sig.push((format!("block{i}.pw2.bias"), vec![c]));
                }
            }
        }
        sig
    }

    /// Shape of one input sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            Architecture::Mlp { dims, .. } => vec![dims[0]],
            Architecture::ConvnextTinyToy {
                channels,
                height,
                width,
                ..
            } => vec![*channels, *height, *width],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerIo {
    Dense { input: usize, output: usize },
    Conv { channels: usize },
}

/// Callback invoked at each attach point with the layer input; a returned
/// branch is added to the layer's (MLP) or depthwise stage's (ConvNeXt) output.
pub type LayerHook<'a> = dyn FnMut(&mut Tape, &str, Var) -> Result<Option<Var>> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    arch: Architecture,
    params: ParamSet,
    frozen: bool,
}

impl BaseModel {
    /// Randomly initialized, unfrozen model.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::child(seed, "base-init");
        let mut params = ParamSet::new();
        for (name, shape) in arch.signature() {
            let tensor = if name.ends_with(".bias") || name.ends_with(".beta") {
                Tensor::zeros(shape)?
            } else if name.ends_with(".gamma") {
                Tensor::ones(shape)?
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(shape, -bound, bound, &mut rng)?
            };
            params.insert(name, tensor)?;
        }
        Ok(BaseModel {
            arch,
            params,
            frozen: false,
        })
    }

    /// Every parameter (including layer-norm gains) set to zero.
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in arch.signature() {
            params.insert(name, Tensor::zeros(shape)?)?;
        }
        Ok(BaseModel {
            arch,
            params,
            frozen: false,
        })
    }

    /// Checks names and shapes against the architecture's signature.
    pub fn from_params(arch: Architecture, params: ParamSet, frozen: bool) -> Result<Self> {
        arch.validate()?;
        let sig = arch.signature();
        if sig.len() != params.len() {
            return Err(Error::ManifestMismatch(format!(
                "{} expects {} tensors, found {}",
                arch.kind(),
                sig.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in sig.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::ManifestMismatch(format!(
                    "expected {name} {shape:?}, found {pname} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(BaseModel { arch, params, frozen })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn kind(&self) -> &'static str {
        self.arch.kind()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for training; fails once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamSet> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Forward pass on a batch using parameters already bound on the tape
    /// (one var per registry entry, in order).
    pub fn forward_hooked(&self, tape: &mut Tape, x: Var, bound: &[Var], hook: &mut LayerHook<'_>) -> Result<Var> {
        if bound.len() != self.params.len() {
            return Err(Error::InvalidConfig("parameter binding length mismatch".into()));
        }
        let p = |name: &str| -> Var { bound[self.params.index_of(name).expect("registry matches signature")] };
        match &self.arch {
            Architecture::Mlp { dims, activation } => {
                let layers = dims.len() - 1;
                let mut h = x;
                for i in 0..layers {
                    let name = format!("fc{i}");
                    let mut out = tape.matmul_nt(h, p(&format!("{name}.weight")))?;
                    out = tape.add_bias(out, p(&format!("{name}.bias")))?;
                    if let Some(branch) = hook(tape, &name, h)? {
                        out = tape.add(out, branch)?;
                    }
                    h = if i + 1 < layers {
                        tape.activation(out, *activation)?
                    } else {
                        out
                    };
                }
                Ok(h)
            }
            Architecture::ConvnextTinyToy { channels, blocks, .. } => {
                let shape = tape.shape(x)?.to_vec();
                let (n, c, hgt, wid) = match shape[..] {
                    [n, c, h, w] if c == *channels => (n, c, h, w),
                    _ => return Err(Error::shape("convnext_forward", &shape, &self.arch.sample_shape())),
                };
                let mut h = x;
                for i in 0..*blocks {
                    let name = format!("block{i}");
                    let mut d = tape.conv2d_depthwise(h, p(&format!("{name}.dw")))?;
                    if let Some(branch) = hook(tape, &name, h)? {
                        d = tape.add(d, branch)?;
                    }
                    let t = tape.permute(d, &[0, 2, 3, 1])?;
                    let t = tape.reshape(t, &[n * hgt * wid, c])?;
                    let t = tape.layer_norm(
                        t,
                        p(&format!("{name}.ln.gamma")),
                        p(&format!("{name}.ln.beta")),
                        LAYER_NORM_EPS,
                    )?;
                    let t = tape.matmul_nt(t, p(&format!("{name}.pw1.weight")))?;
                    let t = tape.add_bias(t, p(&format!("{name}.pw1.bias")))?;
                    let t = tape.activation(t, Activation::Gelu)?;
                    let t = tape.matmul_nt(t, p(&format!("{name}.pw2.weight")))?;
                    let t = tape.add_bias(t, p(&format!("{name}.pw2.bias")))?;
                    let t = tape.reshape(t, &[n, hgt, wid, c])?;
                    let t = tape.permute(t, &[0, 3, 1, 2])?;
                    h = tape.add(h, t)?;
                }
                Ok(h)
            }
        }
    }

    pub fn forward_on(&self, tape: &mut Tape, x: Var, bound: &[Var]) -> Result<Var> {
        self.forward_hooked(tape, x, bound, &mut |_, _, _| Ok(None))
    }

    /// Eager forward on one sample or a batch of samples.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let sample = self.arch.sample_shape();
        let single = x.shape() == sample.as_slice();
        let batch = if single {
            let mut s = vec![1];
            s.extend(&sample);
            x.reshape(s)?
        } else if x.rank() == sample.len() + 1 && x.shape()[1..] == sample[..] {
            x.clone()
        } else {
            return Err(Error::shape("base_forward", x.shape(), &sample));
        };
        let mut tape = Tape::new();
        let xv = tape.constant(batch);
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, xv, &bound)?;
        let out = tape.value(out)?.clone();
        if single {
            out.reshape(out.shape()[1..].to_vec())
        } else {
            Ok(out)
        }
    }
}

pub fn mlp_forward(model: &BaseModel, x: &Tensor) -> Result<Tensor> {
    if model.kind() != "mlp" {
        return Err(Error::InvalidConfig(format!("expected mlp, got {}", model.kind())));
    }
    model.forward(x)
}

pub fn convnext_block_forward(model: &BaseModel, x: &Tensor) -> Result<Tensor> {
    if model.kind() != "convnext_tiny_toy" {
        return Err(Error::InvalidConfig(format!(
            "expected convnext_tiny_toy, got {}",
            model.kind()
        )));
    }
    model.forward(x)
}
