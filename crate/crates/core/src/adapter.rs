//! Adapters attached in parallel to layers of a frozen base:
//! `adapted_layer(x) = base_layer(x) + α·adapter(x)`.
//!
//! Three families share the attach protocol:
//!
//! * `linear`: the first-order baseline `B_up · (A·x)`.
//! * `quadratic`: the rank-factorized quadratic term `C · ((A·x) ⊙ (B·x))`.
//! * `kernel_quadratic`: `C · κ(A·x, B·x)` for a [`KernelMap`] `κ`.
//!
//! The output factor (`B_up` or `C`) starts at zero, so a freshly attached
//! adapter contributes exactly nothing. On ConvNeXt-style blocks the adapter
//! sits beside the depthwise stage: the paired projections are two 3×3
//! depthwise convolutions and the output factor is a pointwise convolution.

use serde::{Deserialize, Serialize};

use crate::basemodel::{BaseModel, LayerIo, DEPTHWISE_KERNEL};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::ParamSet;
use crate::quadratic::{as_batch, kernel_apply, kernel_quadratic_forward, unbatch, KernelMap, LowRankQuadraticTerm};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterFamily {
    Linear,
    Quadratic,
    KernelQuadratic,
}

impl AdapterFamily {
    pub fn name(self) -> &'static str {
        match self {
            AdapterFamily::Linear => "linear",
            AdapterFamily::Quadratic => "quadratic",
            AdapterFamily::KernelQuadratic => "kernel_quadratic",
        }
    }
}

/// Static selection of active rank channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMask {
    /// One 0/1 entry per rank channel.
    Dense(Vec<u8>),
    /// Channels `0, k, 2k, …` are active.
    Strided(usize),
}

impl SparsityMask {
    /// Per-channel multipliers for `rank` channels.
    pub fn channels(&self, rank: usize) -> Result<Vec<f64>> {
        let weights: Vec<f64> = match self {
            SparsityMask::Dense(bits) => {
                if bits.len() != rank {
                    return Err(Error::shape("sparsity_mask", &[bits.len()], &[rank]));
                }
                if bits.iter().any(|&b| b > 1) {
                    return Err(Error::InvalidConfig("dense mask entries must be 0 or 1".into()));
                }
                bits.iter().map(|&b| b as f64).collect()
            }
            SparsityMask::Strided(k) => {
                if *k == 0 {
                    return Err(Error::InvalidConfig("mask stride must be positive".into()));
                }
                (0..rank).map(|j| if j % k == 0 { 1.0 } else { 0.0 }).collect()
            }
        };
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::EmptyMask);
        }
        Ok(weights)
    }
}

fn default_alpha() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub family: AdapterFamily,
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelMap>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<SparsityMask>,
    pub attach_points: Vec<String>,
}

impl AdapterConfig {
    pub fn new(family: AdapterFamily, rank: usize, attach_points: &[&str]) -> Self {
        AdapterConfig {
            family,
            rank,
            kernel: None,
            alpha: 1.0,
            mask: None,
            attach_points: attach_points.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_kernel(mut self, kernel: KernelMap) -> Self {
        self.kernel = Some(kernel);
        self
    }

    pub fn with_mask(mut self, mask: SparsityMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.rank == 0 {
            return bad("adapter rank must be positive");
        }
        if !self.alpha.is_finite() {
            return bad("adapter alpha must be finite");
        }
        match self.family {
            AdapterFamily::Linear if self.kernel.is_some() || self.mask.is_some() => {
                return bad("linear adapters take neither kernel nor mask");
            }
            AdapterFamily::Quadratic if self.kernel.is_some() => {
                return bad("quadratic adapters use the product form; use kernel_quadratic for a kernel");
            }
            AdapterFamily::KernelQuadratic => match &self.kernel {
                Some(k) => k.validate()?,
                None => return bad("kernel_quadratic adapters need a kernel"),
            },
            _ => {}
        }
        if let Some(mask) = &self.mask {
            mask.channels(self.rank)?;
        }
        let mut points = self.attach_points.clone();
        points.sort();
        points.dedup();
        if points.len() != self.attach_points.len() {
            return bad("attach points must be distinct");
        }
        Ok(())
    }

    /// Kernel used by the quadratic families (`product` for plain quadratic).
    pub fn kernel_map(&self) -> Option<KernelMap> {
        match self.family {
            AdapterFamily::Linear => None,
            AdapterFamily::Quadratic => Some(KernelMap::Product),
            AdapterFamily::KernelQuadratic => self.kernel,
        }
    }

    /// Parameter names and shapes of one adapter at a layer with the given io.
    pub fn tensor_shapes(&self, point: &str, io: LayerIo) -> Result<Vec<(String, Vec<usize>)>> {
        let r = self.rank;
        let k = DEPTHWISE_KERNEL;
        let named = |suffix: &str, shape: Vec<usize>| (format!("{point}.{suffix}"), shape);
        Ok(match (self.family, io) {
            (AdapterFamily::Linear, LayerIo::Dense { input, output }) => {
                vec![named("A", vec![r, input]), named("B_up", vec![output, r])]
            }
            (_, LayerIo::Dense { input, output }) => vec![
                named("A", vec![r, input]),
                named("B", vec![r, input]),
                named("C", vec![output, r]),
            ],
            (AdapterFamily::Linear, LayerIo::Conv { channels }) => {
                vec![named("down", vec![r, channels]), named("up", vec![channels, r])]
            }
            (_, LayerIo::Conv { channels }) => {
                if r != channels {
                    return Err(Error::WidthMismatch {
                        point: point.into(),
                        expected: format!("rank {channels} (one depthwise pair per channel)"),
                        actual: format!("rank {r}"),
                    });
                }
                vec![
                    named("dw_a", vec![channels, k, k]),
                    named("dw_b", vec![channels, k, k]),
                    named("pw", vec![channels, channels]),
                ]
            }
        })
    }

    pub fn param_count_at(&self, point: &str, io: LayerIo) -> Result<usize> {
        Ok(self
            .tensor_shapes(point, io)?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }
}

/// Rank of the linear adapter whose parameter count matches a quadratic
/// adapter of rank `r` on an `n → m` layer: `⌈r·(2n + m) / (n + m)⌉`.
pub fn budget_matched_linear_rank(r: usize, n: usize, m: usize) -> usize {
    (r * (2 * n + m)).div_ceil(n + m)
}

#[derive(Clone, Debug, PartialEq)]
struct Attached {
    point: String,
    io: LayerIo,
    /// Index of this adapter's first tensor in the adapter registry.
    first: usize,
    mask: Option<Vec<f64>>,
}

/// A frozen base plus adapters at named layers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    base: BaseModel,
    config: AdapterConfig,
    attached: Vec<Attached>,
    params: ParamSet,
    train_base: bool,
}

impl AdaptedModel {
    fn build(base: BaseModel, config: AdapterConfig, params: Option<ParamSet>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::child(seed, "adapter-init");
        let mut fresh = ParamSet::new();
        let mut attached = Vec::new();
        for point in &config.attach_points {
            let io = base
                .architecture()
                .layer_io(point)
                .ok_or_else(|| Error::UnknownAttachPoint(point.clone()))?;
            let mask = config.mask.as_ref().map(|m| m.channels(config.rank)).transpose()?;
            attached.push(Attached {
                point: point.clone(),
                io,
                first: fresh.len(),
                mask,
            });
            for (name, shape) in config.tensor_shapes(point, io)? {
                let init = if name.ends_with(".C")
                    || name.ends_with(".B_up")
                    || name.ends_with(".pw")
                    || name.ends_with(".up")
                {
                    Tensor::zeros(shape)?
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::uniform(shape, -bound, bound, &mut rng)?
                };
                fresh.insert(name, init)?;
            }
        }
        let params = match params {
            None => fresh,
            Some(loaded) => {
                for (name, t) in fresh.iter() {
                    let point = name.split('.').next().unwrap_or(name);
                    match loaded.get(name) {
                        Some(l) if l.shape() == t.shape() => {}
                        Some(l) => {
                            return Err(Error::WidthMismatch {
                                point: point.into(),
                                expected: format!("{name} {:?}", t.shape()),
                                actual: format!("{:?}", l.shape()),
                            })
                        }
                        None => return Err(Error::ManifestMismatch(format!("missing adapter tensor {name}"))),
                    }
                }
                if loaded.names() != fresh.names() {
                    return Err(Error::ManifestMismatch(
                        "adapter tensor order differs from config".into(),
                    ));
                }
                loaded
            }
        };
        Ok(AdaptedModel {
            base,
            config,
            attached,
            params,
            train_base: false,
        })
    }

    /// Freezes `base` and attaches freshly initialized adapters.
    pub fn attach(mut base: BaseModel, config: &AdapterConfig, seed: u64) -> Result<Self> {
        base.freeze();
        AdaptedModel::build(base, config.clone(), None, seed)
    }

    /// Reattaches saved adapter tensors to a (frozen) base.
    pub fn from_parts(mut base: BaseModel, config: &AdapterConfig, params: ParamSet) -> Result<Self> {
        base.freeze();
        AdaptedModel::build(base, config.clone(), Some(params), 0)
    }

    /// Same architecture with the base left trainable: the whole quadratic
    /// network is optimized jointly from its initialization.
    pub fn scratch(base: BaseModel, config: &AdapterConfig, seed: u64) -> Result<Self> {
        if base.is_frozen() {
            return Err(Error::FrozenModel);
        }
        let mut model = AdaptedModel::build(base, config.clone(), None, seed)?;
        model.train_base = true;
        Ok(model)
    }

    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn adapter_params(&self) -> &ParamSet {
        &self.params
    }

    pub fn adapter_params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn trains_base(&self) -> bool {
        self.train_base
    }

    /// Mutable base registry; only available for scratch models.
    pub fn base_params_mut(&mut self) -> Result<&mut ParamSet> {
        if !self.train_base {
            return Err(Error::FrozenModel);
        }
        self.base.params_mut()
    }

    pub(crate) fn split_params_mut(&mut self) -> Result<(Option<&mut ParamSet>, &mut ParamSet)> {
        let base = if self.train_base {
            Some(self.base.params_mut()?)
        } else {
            None
        };
        Ok((base, &mut self.params))
    }

    pub fn attach_points(&self) -> Vec<&str> {
        self.attached.iter().map(|a| a.point.as_str()).collect()
    }

    /// Scalar count of adapter tensors.
    pub fn adapter_param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Drops the adapters, returning the base unchanged.
    pub fn into_base(self) -> BaseModel {
        self.base
    }

    /// Forward on a batch. `base_bound` and `adapter_bound` hold one var per
    /// registry entry of the base and adapter registries.
    pub fn forward_on(&self, tape: &mut Tape, x: Var, base_bound: &[Var], adapter_bound: &[Var]) -> Result<Var> {
        let mut hook = |tape: &mut Tape, layer: &str, input: Var| -> Result<Option<Var>> {
            let Some(att) = self.attached.iter().find(|a| a.point == layer) else {
                return Ok(None);
            };
            let branch = self.branch(tape, att, input, adapter_bound)?;
            Ok(Some(tape.scale(branch, self.config.alpha)?))
        };
        self.base.forward_hooked(tape, x, base_bound, &mut hook)
    }

    fn branch(&self, tape: &mut Tape, att: &Attached, input: Var, bound: &[Var]) -> Result<Var> {
        let p = |k: usize| bound[att.first + k];
        let shape = tape.shape(input)?.to_vec();
        match (self.config.family, att.io) {
            (AdapterFamily::Linear, LayerIo::Dense { .. }) => {
                let z = tape.matmul_nt(input, p(0))?;
                tape.matmul_nt(z, p(1))
            }
            (_, LayerIo::Dense { .. }) => {
                let mask = match &att.mask {
                    Some(m) => Some(tape.constant(tile_rows(m, shape[0])?)),
                    None => None,
                };
                let kernel = self.config.kernel_map().expect("quadratic family has a kernel");
                kernel_quadratic_forward(tape, input, p(0), p(1), p(2), kernel, mask)
            }
            (AdapterFamily::Linear, LayerIo::Conv { .. }) => {
                let z = pointwise(tape, input, p(0))?;
                pointwise(tape, z, p(1))
            }
            (_, LayerIo::Conv { .. }) => {
                let u = tape.conv2d_depthwise(input, p(0))?;
                let v = tape.conv2d_depthwise(input, p(1))?;
                let kernel = self.config.kernel_map().expect("quadratic family has a kernel");
                let mut z = kernel_apply(tape, kernel, u, v)?;
                if let Some(m) = &att.mask {
                    let mask = tape.constant(tile_channels(m, &shape)?);
                    z = tape.hadamard(z, mask)?;
                }
                pointwise(tape, z, p(2))
            }
        }
    }

    /// Eager forward on one sample or a batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let sample = self.base.architecture().sample_shape();
        let single = x.shape() == sample.as_slice();
        let batch = if single {
            let mut s = vec![1];
            s.extend(&sample);
            x.reshape(s)?
        } else {
            x.clone()
        };
        let mut tape = Tape::new();
        let xv = tape.constant(batch);
        let base_bound = self.base.params().bind(&mut tape, false);
        let adapter_bound = self.params.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, xv, &base_bound, &adapter_bound)?;
        let out = tape.value(out)?.clone();
        if single {
            out.reshape(out.shape()[1..].to_vec())
        } else {
            Ok(out)
        }
    }
}

/// `[N, C, H, W] → [N, C', H, W]` through a `[C', C]` weight.
fn pointwise(tape: &mut Tape, x: Var, weight: Var) -> Result<Var> {
    let s = tape.shape(x)?.to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let out_c = tape.shape(weight)?[0];
    let t = tape.permute(x, &[0, 2, 3, 1])?;
    let t = tape.reshape(t, &[n * h * w, c])?;
    let t = tape.matmul_nt(t, weight)?;
    let t = tape.reshape(t, &[n, h, w, out_c])?;
    tape.permute(t, &[0, 3, 1, 2])
}

fn tile_rows(mask: &[f64], rows: usize) -> Result<Tensor> {
    Tensor::new(vec![rows, mask.len()], mask.repeat(rows))
}

fn tile_channels(mask: &[f64], shape: &[usize]) -> Result<Tensor> {
    let plane: usize = shape[2..].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for _ in 0..shape[0] {
        for &m in mask {
            data.extend(std::iter::repeat_n(m, plane));
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// `B_up · (A·x)` for `A[r×n]`, `B_up[m×r]`; `x` is `[n]` or `[B, n]`.
pub fn linear_adapter_forward(a: &Tensor, b_up: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (n, m) = match (a.shape(), b_up.shape()) {
        (&[r, n], &[m, r2]) if r == r2 => (n, m),
        (sa, sb) => return Err(Error::shape("linear_adapter_forward", sa, sb)),
    };
    let batch = as_batch(x, n, "linear_adapter_forward")?;
    let mut tape = Tape::new();
    let xv = tape.constant(batch);
    let av = tape.constant(a.clone());
    let bv = tape.constant(b_up.clone());
    let z = tape.matmul_nt(xv, av)?;
    let out = tape.matmul_nt(z, bv)?;
    unbatch(tape.value(out)?.clone(), x, m)
}

/// `C · (mask ⊙ ((A·x) ⊙ (B·x)))`.
pub fn quadratic_adapter_forward(
    term: &LowRankQuadraticTerm,
    mask: Option<&SparsityMask>,
    x: &Tensor,
) -> Result<Tensor> {
    kernel_adapter_forward(term, KernelMap::Product, mask, x)
}

/// `C · (mask ⊙ κ(A·x, B·x))`.
pub fn kernel_adapter_forward(
    term: &LowRankQuadraticTerm,
    kernel: KernelMap,
    mask: Option<&SparsityMask>,
    x: &Tensor,
) -> Result<Tensor> {
    kernel.validate()?;
    let batch = as_batch(x, term.input_dim(), "kernel_adapter_forward")?;
    let rows = batch.shape()[0];
    let mut tape = Tape::new();
    let xv = tape.constant(batch);
    let [a, b, c] = [term.a(), term.b(), term.c()].map(|t| tape.constant(t.clone()));
    let mask = match mask {
        Some(m) => Some(tape.constant(tile_rows(&m.channels(term.rank())?, rows)?)),
        None => None,
    };
    let out = kernel_quadratic_forward(&mut tape, xv, a, b, c, kernel, mask)?;
    unbatch(tape.value(out)?.clone(), x, term.output_dim())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub base_params: usize,
    pub adapter_params: usize,
    /// `adapter / (adapter + base)`
    pub trainable_fraction: f64,
}

pub fn merge_report(model: &AdaptedModel) -> EfficiencyReport {
    let base_params = model.base().param_count();
    let adapter_params = model.adapter_param_count();
    let total = base_params + adapter_params;
    EfficiencyReport {
        base_params,
        adapter_params,
        trainable_fraction: if total == 0 {
            0.0
        } else {
            adapter_params as f64 / total as f64
        },
    }
}
