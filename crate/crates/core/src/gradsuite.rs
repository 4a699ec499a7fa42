//! Finite-difference checks of every differentiable op and of the composed
//! base and adapter forwards.
//!
//! Each probe draws fresh arguments and a random readout `w`, then compares
//! the tape gradient of `Σ w ⊙ f(args)` with central differences, one
//! argument tensor at a time. Op inputs and model inputs are uniform in
//! `[−2, 2]`; weights are uniform at their initialization scale `±1/√fan_in`.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedModel, AdapterConfig, AdapterFamily, SparsityMask};
use crate::basemodel::{Architecture, BaseModel};
use crate::error::Result;
use crate::numerics::{finite_diff_check, Activation, Tape, Tensor, Var};
use crate::quadratic::{full_quadratic_forward, kernel_apply, kernel_quadratic_forward, KernelMap};
use crate::rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const DEFAULT_PROBES: usize = 100;
pub const DEFAULT_SEED: u64 = 7;
const RANGE: f64 = 2.0;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// Shape and symmetric sampling bound of one argument.
#[derive(Clone, Debug)]
struct Arg {
    shape: Vec<usize>,
    bound: f64,
}

fn v(shape: &[usize]) -> Arg {
    Arg {
        shape: shape.to_vec(),
        bound: RANGE,
    }
}

/// Weights use their fan-in; vectors (biases, norm affine terms) their length.
fn w(shape: &[usize]) -> Arg {
    let fan: usize = match shape {
        [len] => *len,
        _ => shape.iter().skip(1).product(),
    };
    Arg {
        shape: shape.to_vec(),
        bound: 1.0 / (fan as f64).sqrt(),
    }
}

/// How each argument is perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    /// Every coordinate separately.
    Coordinate,
    /// One random unit-variance direction per argument: the check compares
    /// `⟨∇f, d⟩` with central differences of `t ↦ f(x + t·d)`.
    Directional,
}

/// A differentiable computation over a fixed list of arguments.
pub struct GradCase {
    pub name: String,
    pub probe: Probe,
    args: Vec<Arg>,
    build: Build,
}

impl GradCase {
    fn new(
        name: impl Into<String>,
        args: Vec<Arg>,
        build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        GradCase {
            name: name.into(),
            probe: Probe::Coordinate,
            args,
            build: Box::new(build),
        }
    }

    fn directional(mut self) -> Self {
        self.probe = Probe::Directional;
        self
    }

    /// Max relative error over `probes` random draws and every argument.
    pub fn run(&self, probes: usize, seed: u64) -> Result<f64> {
        let mut rng = rng::child(seed, &self.name);
        let mut worst = 0.0f64;
        for _ in 0..probes {
            let inputs = self
                .args
                .iter()
                .map(|a| Tensor::uniform(a.shape.clone(), -a.bound, a.bound, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let out_shape = {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
                let out = (self.build)(&mut tape, &vars)?;
                tape.shape(out)?.to_vec()
            };
            let w = Tensor::uniform(out_shape, -RANGE, RANGE, &mut rng)?;
            for target in 0..inputs.len() {
                let readout = |tape: &mut Tape, x: Var| -> Result<Var> {
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| if i == target { x } else { tape.constant(t.clone()) })
                        .collect();
                    let out = (self.build)(tape, &vars)?;
                    let wv = tape.constant(w.clone());
                    let weighted = tape.hadamard(out, wv)?;
                    tape.sum(weighted)
                };
                let err = match self.probe {
                    Probe::Coordinate => finite_diff_check(readout, &inputs[target], STEP)?,
                    Probe::Directional => {
                        let origin = &inputs[target];
                        let dir = Tensor::uniform(vec![1, origin.len()], -3f64.sqrt(), 3f64.sqrt(), &mut rng)?;
                        let along = |tape: &mut Tape, t: Var| -> Result<Var> {
                            let d = tape.constant(dir.clone());
                            let step = tape.matmul(t, d)?;
                            let step = tape.reshape(step, origin.shape())?;
                            let o = tape.constant(origin.clone());
                            let x = tape.add(o, step)?;
                            readout(tape, x)
                        };
                        finite_diff_check(along, &Tensor::zeros(vec![1, 1])?, STEP)?
                    }
                };
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradResult {
    pub name: String,
    pub probe: Probe,
    pub probes: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub step: f64,
    pub tolerance: f64,
    pub results: Vec<GradResult>,
}

impl GradSuiteReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn summary(&self) -> String {
        let failed = self.results.iter().filter(|r| !r.passed).count();
        if failed == 0 {
            format!("ALL GRADCHECKS PASSED ({} ops)", self.results.len())
        } else {
            format!("GRADCHECKS FAILED ({failed} of {} ops)", self.results.len())
        }
    }
}

/// Primitive tape ops.
pub fn op_cases() -> Vec<GradCase> {
    let mut cases = vec![
        GradCase::new("matmul", vec![v(&[3, 4]), v(&[4, 2])], |t, x| t.matmul(x[0], x[1])),
        GradCase::new("matmul_nt", vec![v(&[3, 4]), v(&[2, 4])], |t, x| {
            t.matmul_nt(x[0], x[1])
        }),
        GradCase::new("add", vec![v(&[3, 4]), v(&[3, 4])], |t, x| t.add(x[0], x[1])),
        GradCase::new("sub", vec![v(&[3, 4]), v(&[3, 4])], |t, x| t.sub(x[0], x[1])),
        GradCase::new("hadamard", vec![v(&[3, 4]), v(&[3, 4])], |t, x| t.hadamard(x[0], x[1])),
        GradCase::new("add_bias", vec![v(&[3, 4]), v(&[4])], |t, x| t.add_bias(x[0], x[1])),
        GradCase::new("scale", vec![v(&[3, 4])], |t, x| t.scale(x[0], -1.7)),
        GradCase::new("sum", vec![v(&[3, 4])], |t, x| t.sum(x[0])),
        GradCase::new("mean", vec![v(&[3, 4])], |t, x| t.mean(x[0])),
        GradCase::new("reshape", vec![v(&[3, 4])], |t, x| t.reshape(x[0], &[2, 6])),
        GradCase::new("permute", vec![v(&[2, 3, 4])], |t, x| t.permute(x[0], &[2, 0, 1])),
        GradCase::new("gelu", vec![v(&[3, 4])], |t, x| t.activation(x[0], Activation::Gelu)),
        GradCase::new("relu", vec![v(&[3, 4])], |t, x| t.activation(x[0], Activation::Relu)),
        GradCase::new("layer_norm", vec![v(&[3, 5]), v(&[5]), v(&[5])], |t, x| {
            t.layer_norm(x[0], x[1], x[2], 1e-6)
        }),
        GradCase::new("conv2d_depthwise", vec![v(&[2, 5, 5]), v(&[2, 3, 3])], |t, x| {
            t.conv2d_depthwise(x[0], x[1])
        }),
        GradCase::new(
            "conv2d_depthwise_batched",
            vec![v(&[2, 2, 4, 5]), v(&[2, 3, 1])],
            |t, x| t.conv2d_depthwise(x[0], x[1]),
        ),
        GradCase::new("bilinear", vec![v(&[3, 4]), v(&[2, 4, 4])], |t, x| {
            t.bilinear(x[0], x[1])
        }),
        GradCase::new("mse", vec![v(&[3, 4]), v(&[3, 4])], |t, x| t.mse(x[0], x[1])),
        GradCase::new("softmax_xent", vec![v(&[3, 4])], |t, x| {
            t.softmax_xent(x[0], &[0, 3, 1])
        }),
        GradCase::new(
            "full_quadratic",
            vec![v(&[3, 4]), w(&[2, 4, 4]), w(&[2, 4]), w(&[2])],
            |t, x| full_quadratic_forward(t, x[0], x[1], x[2], x[3]),
        ),
    ];
    for kernel in kernels() {
        cases.push(GradCase::new(
            format!("kernel[{}]", kernel.label()),
            vec![v(&[3, 4]), v(&[3, 4])],
            move |t, x| kernel_apply(t, kernel, x[0], x[1]),
        ));
    }
    for kernel in kernels() {
        cases.push(GradCase::new(
            format!("kernel_quadratic[{}]", kernel.label()),
            vec![v(&[3, 4]), w(&[2, 4]), w(&[2, 4]), w(&[3, 2])],
            move |t, x| kernel_quadratic_forward(t, x[0], x[1], x[2], x[3], kernel, None),
        ));
    }
    cases.push(GradCase::new(
        "kernel_quadratic[masked]",
        vec![v(&[3, 4]), w(&[3, 4]), w(&[3, 4]), w(&[2, 3])],
        |t, x| {
            let mask = t.constant(Tensor::from_rows(&vec![vec![1.0, 0.0, 1.0]; 3])?);
            kernel_quadratic_forward(t, x[0], x[1], x[2], x[3], KernelMap::Product, Some(mask))
        },
    ));
    cases
}

fn kernels() -> [KernelMap; 4] {
    [
        KernelMap::Product,
        KernelMap::Polynomial { c: 5.0, d: 3 },
        KernelMap::Rbf { gamma: 0.5 },
        KernelMap::Sigmoid { s: 0.7, c: 0.1 },
    ]
}

/// Gradient case over a whole base (and optional adapter): the model input
/// first, then every base tensor, then every adapter tensor.
fn model_case(name: String, base: BaseModel, adapter: Option<AdapterConfig>, batch: usize) -> Result<GradCase> {
    let mut input = vec![batch];
    input.extend(base.architecture().sample_shape());
    let mut args = vec![v(&input)];
    args.extend(base.params().tensors().iter().map(|t| w(t.shape())));
    let model = match adapter {
        Some(cfg) => Some(AdaptedModel::attach(base.clone(), &cfg, 0)?),
        None => None,
    };
    if let Some(m) = &model {
        args.extend(m.adapter_params().tensors().iter().map(|t| w(t.shape())));
    }
    let n_base = base.params().len();
    Ok(GradCase::new(name, args, move |t, x| {
        let base_vars = &x[1..1 + n_base];
        match &model {
            Some(m) => m.forward_on(t, x[0], base_vars, &x[1 + n_base..]),
            None => base.forward_on(t, x[0], base_vars),
        }
    })
    .directional())
}

/// Composed base and adapted forwards.
pub fn model_cases() -> Result<Vec<GradCase>> {
    let mlp = BaseModel::zeroed(Architecture::Mlp {
        dims: vec![4, 5, 3],
        activation: Activation::Gelu,
    })?;
    let conv = BaseModel::zeroed(Architecture::ConvnextTinyToy {
        channels: 8,
        blocks: 2,
        height: 8,
        width: 8,
    })?;
    let both = ["fc0", "fc1"];
    let mut cases = vec![
        model_case("mlp_forward".into(), mlp.clone(), None, 3)?,
        model_case("convnext_stack_forward".into(), conv.clone(), None, 2)?,
        model_case(
            "adapter[linear,mlp]".into(),
            mlp.clone(),
            Some(AdapterConfig::new(AdapterFamily::Linear, 2, &both)),
            3,
        )?,
        model_case(
            "adapter[quadratic,mlp]".into(),
            mlp.clone(),
            Some(AdapterConfig::new(AdapterFamily::Quadratic, 2, &both).with_mask(SparsityMask::Strided(2))),
            3,
        )?,
        model_case(
            "adapter[linear,convnext]".into(),
            conv.clone(),
            Some(AdapterConfig::new(AdapterFamily::Linear, 2, &["block0", "block1"])),
            1,
        )?,
        model_case(
            "adapter[quadratic,convnext]".into(),
            conv.clone(),
            Some(AdapterConfig::new(AdapterFamily::Quadratic, 8, &["block1"])),
            1,
        )?,
    ];
    for kernel in kernels().into_iter().skip(1) {
        cases.push(model_case(
            format!("adapter[kernel_quadratic,{},mlp]", kernel.label()),
            mlp.clone(),
            Some(AdapterConfig::new(AdapterFamily::KernelQuadratic, 3, &["fc1"]).with_kernel(kernel)),
            3,
        )?);
    }
    cases.push(model_case(
        "adapter[kernel_quadratic,rbf,convnext]".into(),
        conv,
        Some(
            AdapterConfig::new(AdapterFamily::KernelQuadratic, 8, &["block0"])
                .with_kernel(KernelMap::Rbf { gamma: 0.3 }),
        ),
        1,
    )?);
    Ok(cases)
}

pub fn all_cases() -> Result<Vec<GradCase>> {
    let mut cases = op_cases();
    cases.extend(model_cases()?);
    Ok(cases)
}

/// Runs every case on its own thread and reports in case order.
pub fn run_suite(probes: usize, seed: u64) -> Result<GradSuiteReport> {
    let cases = all_cases()?;
    let errors: Vec<Result<f64>> = thread::scope(|s| {
        let handles: Vec<_> = cases.iter().map(|c| s.spawn(move || c.run(probes, seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("gradcheck worker panicked"))
            .collect()
    });
    let mut results = Vec::with_capacity(cases.len());
    for (case, err) in cases.iter().zip(errors) {
        let max_relative_error = err?;
        results.push(GradResult {
            name: case.name.clone(),
            probe: case.probe,
            probes,
            max_relative_error,
            passed: max_relative_error < TOLERANCE,
        });
    }
    Ok(GradSuiteReport {
        step: STEP,
        tolerance: TOLERANCE,
        results,
    })
}
