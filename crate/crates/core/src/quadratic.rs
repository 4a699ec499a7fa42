//! Quadratic layers: full bilinear forms, rank-factorized quadratic terms,
//! and kernel maps over paired projections.
//!
//! The low-rank term evaluates `C · κ(A·x, B·x)` with `κ` applied per rank
//! coordinate. With `κ(u, v) = u·v` this is exactly `C · ((A·x) ⊙ (B·x))`,
//! whose expansion is the bilinear form `Σₖ C[i,k] · outer(Aₖ, Bₖ)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Similarity applied to each paired projection coordinate `(u, v)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelMap {
    /// `u·v`
    Product,
    /// `(u·v + c)^d`
    Polynomial { c: f64, d: u32 },
    /// `exp(−γ·(u − v)²)`
    Rbf { gamma: f64 },
    /// `tanh(s·u·v + c)`
    Sigmoid { s: f64, c: f64 },
}

impl KernelMap {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            KernelMap::Product => true,
            KernelMap::Polynomial { c, d } => c.is_finite() && d >= 1,
            KernelMap::Rbf { gamma } => gamma.is_finite() && gamma >= 0.0,
            KernelMap::Sigmoid { s, c } => s.is_finite() && c.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid kernel {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelMap::Product => "product",
            KernelMap::Polynomial { .. } => "polynomial",
            KernelMap::Rbf { .. } => "rbf",
            KernelMap::Sigmoid { .. } => "sigmoid",
        }
    }

    /// Short label including hyperparameters, e.g. `rbf(gamma=0.5)`.
    pub fn label(&self) -> String {
        match *self {
            KernelMap::Product => "product".into(),
            KernelMap::Polynomial { c, d } => format!("polynomial(c={c},d={d})"),
            KernelMap::Rbf { gamma } => format!("rbf(gamma={gamma})"),
            KernelMap::Sigmoid { s, c } => format!("sigmoid(s={s},c={c})"),
        }
    }

    pub fn eval(&self, u: f64, v: f64) -> f64 {
        self.eval_with_partials(u, v).0
    }

    /// `(κ(u,v), ∂κ/∂u, ∂κ/∂v)`
    pub fn eval_with_partials(&self, u: f64, v: f64) -> (f64, f64, f64) {
        match *self {
            KernelMap::Product => (u * v, v, u),
            KernelMap::Polynomial { c, d } => {
                let base = u * v + c;
                let outer = d as f64 * base.powi(d as i32 - 1);
                (base.powi(d as i32), outer * v, outer * u)
            }
            KernelMap::Rbf { gamma } => {
                let diff = u - v;
                let k = (-gamma * diff * diff).exp();
                let du = -2.0 * gamma * diff * k;
                (k, du, -du)
            }
            KernelMap::Sigmoid { s, c } => {
                let t = (s * u * v + c).tanh();
                let outer = s * (1.0 - t * t);
                (t, outer * v, outer * u)
            }
        }
    }
}

/// Records `κ(u, v)` elementwise on the tape.
pub fn kernel_apply(tape: &mut Tape, map: KernelMap, u: Var, v: Var) -> Result<Var> {
    match map {
        // Same op as the plain quadratic term, so the two agree bitwise.
        KernelMap::Product => tape.hadamard(u, v),
        _ => tape.binary(map.name(), u, v, |a, b| map.eval_with_partials(a, b)),
    }
}

/// Promotes a `[n]` vector to a `[1, n]` batch; passes `[B, n]` through.
pub(crate) fn as_batch(x: &Tensor, n: usize, op: &'static str) -> Result<Tensor> {
    match x.shape() {
        [len] if *len == n => x.reshape(vec![1, n]),
        [_, len] if *len == n => Ok(x.clone()),
        s => Err(Error::shape(op, s, &[n])),
    }
}

/// Undoes [`as_batch`] on an output with `m` columns.
pub(crate) fn unbatch(out: Tensor, input: &Tensor, m: usize) -> Result<Tensor> {
    if input.rank() == 1 {
        out.reshape(vec![m])
    } else {
        Ok(out)
    }
}

/// `out[b, i] = x_bᵀ·Wq[i]·x_b + Wl[i]·x_b + bias[i]` on the tape.
pub fn full_quadratic_forward(tape: &mut Tape, x: Var, wq: Var, wl: Var, bias: Var) -> Result<Var> {
    let quad = tape.bilinear(x, wq)?;
    let lin = tape.matmul_nt(x, wl)?;
    let sum = tape.add(quad, lin)?;
    tape.add_bias(sum, bias)
}

/// `C · κ(A·x, B·x)` with an optional per-rank mask, on the tape.
///
/// `x` is `[B, n]`; `a`, `b` are `[r, n]`; `c` is `[m, r]`; `mask` is a
/// constant `[B, r]` of zeros and ones.
pub fn kernel_quadratic_forward(
    tape: &mut Tape,
    x: Var,
    a: Var,
    b: Var,
    c: Var,
    kernel: KernelMap,
    mask: Option<Var>,
) -> Result<Var> {
    let u = tape.matmul_nt(x, a)?;
    let v = tape.matmul_nt(x, b)?;
    let mut z = kernel_apply(tape, kernel, u, v)?;
    if let Some(mask) = mask {
        z = tape.hadamard(z, mask)?;
    }
    tape.matmul_nt(z, c)
}

/// `C · ((A·x) ⊙ (B·x))` on the tape.
pub fn lowrank_quadratic_forward(tape: &mut Tape, x: Var, a: Var, b: Var, c: Var) -> Result<Var> {
    kernel_quadratic_forward(tape, x, a, b, c, KernelMap::Product, None)
}

/// Output `i` is `xᵀ·Wq[i]·x + Wl[i]·x + bias[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullQuadraticLayer {
    wq: Tensor,
    wl: Tensor,
    bias: Tensor,
}

impl FullQuadraticLayer {
    pub fn new(wq: Tensor, wl: Tensor, bias: Tensor) -> Result<Self> {
        let (m, n) = match wl.shape() {
            &[m, n] => (m, n),
            s => return Err(Error::shape("full_quadratic", s, &[0, 0])),
        };
        if wq.shape() != [m, n, n] {
            return Err(Error::shape("full_quadratic", wq.shape(), &[m, n, n]));
        }
        if bias.shape() != [m] {
            return Err(Error::shape("full_quadratic", bias.shape(), &[m]));
        }
        Ok(FullQuadraticLayer { wq, wl, bias })
    }

    /// Pure quadratic layer: zero linear term and bias.
    pub fn from_quadratic(wq: Tensor) -> Result<Self> {
        let (m, n) = match wq.shape() {
            &[m, a, b] if a == b => (m, a),
            s => return Err(Error::shape("full_quadratic", s, &[0, 0, 0])),
        };
        FullQuadraticLayer::new(wq, Tensor::zeros(vec![m, n])?, Tensor::zeros(vec![m])?)
    }

    pub fn wq(&self) -> &Tensor {
        &self.wq
    }

    pub fn wl(&self) -> &Tensor {
        &self.wl
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.wl.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.wl.shape()[0]
    }

    /// `m·n² + m·n + m`
    pub fn param_count(&self) -> usize {
        Self::param_count_for(self.input_dim(), self.output_dim())
    }

    pub fn param_count_for(n: usize, m: usize) -> usize {
        m * n * n + m * n + m
    }

    /// Accepts `[n]` (returns `[m]`) or `[B, n]` (returns `[B, m]`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let batch = as_batch(x, self.input_dim(), "full_quadratic_forward")?;
        let mut tape = Tape::new();
        let xv = tape.constant(batch);
        let wq = tape.constant(self.wq.clone());
        let wl = tape.constant(self.wl.clone());
        let bias = tape.constant(self.bias.clone());
        let out = full_quadratic_forward(&mut tape, xv, wq, wl, bias)?;
        unbatch(tape.value(out)?.clone(), x, self.output_dim())
    }

    /// Replaces each `Wq[i]` by `(Wq[i] + Wq[i]ᵀ)/2`; the forward map is unchanged.
    pub fn symmetrize(&self) -> Result<Self> {
        let (m, n) = (self.output_dim(), self.input_dim());
        let w = self.wq.data();
        let mut sym = vec![0.0; m * n * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..n {
                    let base = i * n * n;
                    sym[base + j * n + l] = 0.5 * (w[base + j * n + l] + w[base + l * n + j]);
                }
            }
        }
        FullQuadraticLayer::new(Tensor::new(vec![m, n, n], sym)?, self.wl.clone(), self.bias.clone())
    }
}

/// Rank-`r` factors of a quadratic term: `A[r×n]`, `B[r×n]`, `C[m×r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankQuadraticTerm {
    a: Tensor,
    b: Tensor,
    c: Tensor,
}

impl LowRankQuadraticTerm {
    pub fn new(a: Tensor, b: Tensor, c: Tensor) -> Result<Self> {
        let (r, n) = match a.shape() {
            &[r, n] => (r, n),
            s => return Err(Error::shape("lowrank_quadratic", s, &[0, 0])),
        };
        if b.shape() != [r, n] {
            return Err(Error::shape("lowrank_quadratic", a.shape(), b.shape()));
        }
        match c.shape() {
            &[_, rc] if rc == r => {}
            s => return Err(Error::shape("lowrank_quadratic", s, &[0, r])),
        }
        Ok(LowRankQuadraticTerm { a, b, c })
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn c(&self) -> &Tensor {
        &self.c
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.c.shape()[0]
    }

    /// `r·(2n + m)`
    pub fn param_count(&self) -> usize {
        Self::param_count_for(self.input_dim(), self.output_dim(), self.rank())
    }

    pub fn param_count_for(n: usize, m: usize, r: usize) -> usize {
        r * (2 * n + m)
    }

    /// Accepts `[n]` (returns `[m]`) or `[B, n]` (returns `[B, m]`).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_kernel(x, KernelMap::Product)
    }

    pub fn forward_kernel(&self, x: &Tensor, kernel: KernelMap) -> Result<Tensor> {
        let batch = as_batch(x, self.input_dim(), "lowrank_quadratic_forward")?;
        let mut tape = Tape::new();
        let xv = tape.constant(batch);
        let [a, b, c] = [&self.a, &self.b, &self.c].map(|t| tape.constant(t.clone()));
        let out = kernel_quadratic_forward(&mut tape, xv, a, b, c, kernel, None)?;
        unbatch(tape.value(out)?.clone(), x, self.output_dim())
    }

    /// The equivalent bilinear layer: `Wq[i] = Σₖ C[i,k]·outer(Aₖ, Bₖ)`,
    /// with zero linear term and bias.
    pub fn expand(&self) -> Result<FullQuadraticLayer> {
        let (r, n, m) = (self.rank(), self.input_dim(), self.output_dim());
        let (a, b, c) = (self.a.data(), self.b.data(), self.c.data());
        let mut wq = vec![0.0; m * n * n];
        for i in 0..m {
            for k in 0..r {
                let cik = c[i * r + k];
                for j in 0..n {
                    for l in 0..n {
                        wq[i * n * n + j * n + l] += cik * a[k * n + j] * b[k * n + l];
                    }
                }
            }
        }
        FullQuadraticLayer::from_quadratic(Tensor::new(vec![m, n, n], wq)?)
    }
}

/// Free-function form of [`LowRankQuadraticTerm::expand`].
pub fn expand_lowrank(term: &LowRankQuadraticTerm) -> Result<FullQuadraticLayer> {
    term.expand()
}
