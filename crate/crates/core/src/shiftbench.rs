//! Synthetic teacher–student benchmark with a known non-linear shift.
//!
//! Inputs are i.i.d. uniform on `[−1, 1]ⁿ`. The pretraining law is an affine
//! teacher `T₀(x) = W₀·x + b₀`; the downstream law adds `ε·Q*(x)` where
//! `Q*` is a rank-`r*` quadratic term (or, for the `tanh_warp` variant, the
//! same factors with each rank channel passed through `tanh(g·u·v)`).
//! Targets carry `Normal(0, σ²)` noise.
//!
//! Every stream is derived from the benchmark seed and a label (`teacher`,
//! `shift`, `<split>/x`, `<split>/noise`), so growing a split appends samples
//! without changing the existing ones.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::quadratic::{KernelMap, LowRankQuadraticTerm};
use crate::rng;

pub const RIDGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftKind {
    /// `Q*(x) = C*·((A*·x) ⊙ (B*·x))`
    Quadratic,
    /// `Q*(x) = C*·tanh(g·(A*·x) ⊙ (B*·x))`
    TanhWarp { gain: f64 },
}

impl ShiftKind {
    fn kernel(self) -> KernelMap {
        match self {
            ShiftKind::Quadratic => KernelMap::Product,
            ShiftKind::TanhWarp { gain } => KernelMap::Sigmoid { s: gain, c: 0.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub pretrain_train: usize,
    pub pretrain_test: usize,
    pub downstream_train: usize,
    pub downstream_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            pretrain_train: 4096,
            pretrain_test: 4096,
            downstream_train: 4096,
            downstream_test: 4096,
        }
    }
}

fn d_seed() -> u64 {
    1
}
fn d_input() -> usize {
    8
}
fn d_rank() -> usize {
    2
}
fn d_strength() -> f64 {
    0.5
}
fn d_noise() -> f64 {
    0.01
}
fn d_shift() -> ShiftKind {
    ShiftKind::Quadratic
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_input")]
    pub input_dim: usize,
    #[serde(default = "d_input")]
    pub output_dim: usize,
    #[serde(default = "d_rank")]
    pub shift_rank: usize,
    #[serde(default = "d_strength")]
    pub shift_strength: f64,
    #[serde(default = "d_noise")]
    pub noise_std: f64,
    #[serde(default = "d_shift")]
    pub shift: ShiftKind,
    #[serde(default)]
    pub sizes: SplitSizes,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: d_seed(),
            input_dim: d_input(),
            output_dim: d_input(),
            shift_rank: d_rank(),
            shift_strength: d_strength(),
            noise_std: d_noise(),
            shift: d_shift(),
            sizes: SplitSizes::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.sizes;
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.input_dim == 0 || self.output_dim == 0 || self.shift_rank == 0 {
            return fail("benchmark dimensions and shift rank must be positive".into());
        }
        if self.shift_rank > self.input_dim {
            return fail(format!(
                "shift rank {} exceeds input dim {}",
                self.shift_rank, self.input_dim
            ));
        }
        if [s.pretrain_train, s.pretrain_test, s.downstream_train, s.downstream_test].contains(&0) {
            return fail("split sizes must be positive".into());
        }
        if !self.shift_strength.is_finite() || !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("shift strength must be finite and noise std non-negative".into());
        }
        if let ShiftKind::TanhWarp { gain } = self.shift {
            if !gain.is_finite() {
                return fail("tanh warp gain must be finite".into());
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `2·σ²`, the "reached the shifted task" threshold, floored at `floor`.
    pub fn target_mse(&self, floor: f64) -> f64 {
        (2.0 * self.noise_std * self.noise_std).max(floor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftBenchmark {
    pub config: BenchConfig,
    pub teacher_weight: Tensor,
    pub teacher_bias: Tensor,
    pub shift_term: LowRankQuadraticTerm,
    pub pretrain_train: Dataset,
    pub pretrain_test: Dataset,
    pub downstream_train: Dataset,
    pub downstream_test: Dataset,
}

fn normal_tensor<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Result<Tensor> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let numel = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| dist.sample(rng)).collect())
}

impl ShiftBenchmark {
    pub fn generate(config: &BenchConfig) -> Result<Self> {
        config.validate()?;
        let (n, m, r) = (config.input_dim, config.output_dim, config.shift_rank);
        let mut teacher_rng = rng::child(config.seed, "teacher");
        let teacher_weight = normal_tensor(vec![m, n], 1.0 / (n as f64).sqrt(), &mut teacher_rng)?;
        let teacher_bias = Tensor::uniform(vec![m], -0.1, 0.1, &mut teacher_rng)?;
        let mut shift_rng = rng::child(config.seed, "shift");
        let a = normal_tensor(vec![r, n], 1.0 / (n as f64).sqrt(), &mut shift_rng)?;
        let b = normal_tensor(vec![r, n], 1.0 / (n as f64).sqrt(), &mut shift_rng)?;
        let c = normal_tensor(vec![m, r], 1.0, &mut shift_rng)?;
        let shift_term = LowRankQuadraticTerm::new(a, b, c)?;

        let mut bench = ShiftBenchmark {
            config: *config,
            teacher_weight,
            teacher_bias,
            shift_term,
            pretrain_train: placeholder()?,
            pretrain_test: placeholder()?,
            downstream_train: placeholder()?,
            downstream_test: placeholder()?,
        };
        let s = config.sizes;
        bench.pretrain_train = bench.sample_split("pretrain_train", s.pretrain_train, false)?;
        bench.pretrain_test = bench.sample_split("pretrain_test", s.pretrain_test, false)?;
        bench.downstream_train = bench.sample_split("downstream_train", s.downstream_train, true)?;
        bench.downstream_test = bench.sample_split("downstream_test", s.downstream_test, true)?;
        Ok(bench)
    }

    fn sample_split(&self, label: &str, size: usize, shifted: bool) -> Result<Dataset> {
        let n = self.config.input_dim;
        let mut x_rng = rng::child(self.config.seed, &format!("{label}/x"));
        let x = Tensor::uniform(vec![size, n], -1.0, 1.0, &mut x_rng)?;
        let clean = if shifted {
            self.downstream_law(&x)?
        } else {
            self.teacher(&x)?
        };
        let mut noise_rng = rng::child(self.config.seed, &format!("{label}/noise"));
        let sigma = self.config.noise_std;
        let y = if sigma > 0.0 {
            let noise = normal_tensor(clean.shape().to_vec(), sigma, &mut noise_rng)?;
            Tensor::new(
                clean.shape().to_vec(),
                clean.data().iter().zip(noise.data()).map(|(c, e)| c + e).collect(),
            )?
        } else {
            clean
        };
        Dataset::new(x, y)
    }

    /// `T₀(x)` for `x[N×n]`.
    pub fn teacher(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, n, m) = (x.shape()[0], self.config.input_dim, self.config.output_dim);
        if x.shape() != [rows, n] {
            return Err(Error::shape("teacher", x.shape(), &[rows, n]));
        }
        let mut out = vec![0.0; rows * m];
        let w = self.teacher_weight.data();
        let b = self.teacher_bias.data();
        for (row, xr) in x.data().chunks(n).enumerate() {
            for i in 0..m {
                out[row * m + i] = b[i] + w[i * n..(i + 1) * n].iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        Tensor::new(vec![rows, m], out)
    }

    /// Unscaled shift `Q*(x)`.
    pub fn shift(&self, x: &Tensor) -> Result<Tensor> {
        self.shift_term.forward_kernel(x, self.config.shift.kernel())
    }

    /// `T₀(x) + ε·Q*(x)`
    pub fn downstream_law(&self, x: &Tensor) -> Result<Tensor> {
        let t = self.teacher(x)?;
        let q = self.shift(x)?;
        let eps = self.config.shift_strength;
        Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(q.data()).map(|(a, b)| a + eps * b).collect(),
        )
    }

    pub fn noise_variance(&self) -> f64 {
        self.config.noise_std * self.config.noise_std
    }

    /// Test MSE of the best affine map fit (ridge `1e−8`) to the downstream
    /// training split. No first-order adapter on an affine base can go below it.
    pub fn linear_floor_oracle(&self) -> Result<f64> {
        let train = &self.downstream_train;
        let (n, m) = (self.config.input_dim, self.config.output_dim);
        let design =
            |d: &Dataset| DMatrix::from_fn(d.len(), n + 1, |i, j| if j < n { d.x.data()[i * n + j] } else { 1.0 });
        let xtr = design(train);
        let ytr = DMatrix::from_row_slice(train.len(), m, train.y.data());
        let gram = xtr.transpose() * &xtr + DMatrix::identity(n + 1, n + 1) * RIDGE;
        let chol = gram.cholesky().ok_or(Error::SingularSystem)?;
        let coef = chol.solve(&(xtr.transpose() * ytr));
        let test = &self.downstream_test;
        let pred = design(test) * coef;
        let ytest = DMatrix::from_row_slice(test.len(), m, test.y.data());
        let resid = pred - ytest;
        let mse = resid.iter().map(|v| v * v).sum::<f64>() / (test.len() * m) as f64;
        if !mse.is_finite() {
            return Err(Error::NonFinite {
                op: "linear_floor_oracle",
            });
        }
        Ok(mse)
    }

    /// Test MSE of the true downstream generator, i.e. what a quadratic
    /// adapter of rank `r ≥ r*` can reach in principle.
    pub fn realizability_oracle(&self, r: usize) -> Result<f64> {
        if r < self.config.shift_rank {
            return Err(Error::InvalidConfig(format!(
                "rank {r} below shift rank {}",
                self.config.shift_rank
            )));
        }
        let test = &self.downstream_test;
        let pred = self.downstream_law(&test.x)?;
        mean_squared(&pred, &test.y)
    }

    /// `E[Q*(x)²]` estimated on the downstream test inputs.
    pub fn shift_second_moment(&self) -> Result<f64> {
        let q = self.shift(&self.downstream_test.x)?;
        Ok(q.data().iter().map(|v| v * v).sum::<f64>() / q.len() as f64)
    }

    /// Classification variant: label 1 when the first target coordinate is
    /// positive, else 0.
    pub fn classification_labels(data: &Dataset) -> Vec<usize> {
        let m = data.output_dim();
        data.y.data().chunks(m).map(|row| usize::from(row[0] > 0.0)).collect()
    }
}

fn placeholder() -> Result<Dataset> {
    Dataset::new(Tensor::zeros(vec![1, 1])?, Tensor::zeros(vec![1, 1])?)
}

pub fn mean_squared(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mean_squared", pred.shape(), target.shape()));
    }
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}
