//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in creation order, so the recording is
//! topological by construction. [`Tape::backward`] replays it once in reverse.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    /// Value and derivative at `x`.
    pub fn eval(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                (x * cdf, cdf + x * pdf)
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `a[m×k] · b[n×k]ᵀ`
    MatMulNt {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Hadamard {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
        cols: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    /// `src[o]` is the input offset feeding output offset `o`.
    Permute {
        a: usize,
        src: Vec<usize>,
    },
    Unary {
        a: usize,
        deriv: Vec<f64>,
    },
    Binary {
        a: usize,
        b: usize,
        da: Vec<f64>,
        db: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        cols: usize,
    },
    Conv {
        x: usize,
        k: usize,
        dims: ConvDims,
    },
    Bilinear {
        x: usize,
        wq: usize,
        batch: usize,
        n: usize,
        m: usize,
    },
    Mse {
        pred: usize,
        target: usize,
    },
    SoftmaxXent {
        logits: usize,
        probs: Vec<f64>,
        targets: Vec<usize>,
        classes: usize,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
    grad: Option<Tensor>,
}

/// Records operations for one forward pass; single-threaded.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::DetachedTensor);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    /// Records a leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.idx(v)?].requires_grad)
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Result<Option<&Tensor>> {
        Ok(self.nodes[self.idx(v)?].grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn matrix_dims(&self, op: &'static str, i: usize) -> Result<(usize, usize)> {
        match self.val(i).shape() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.matrix_dims("matmul", ia)?;
        let (k2, n) = self.matrix_dims("matmul", ib)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.val(ia).shape(), self.val(ib).shape()));
        }
        let out = matmul_kernel(self.val(ia).data(), self.val(ib).data(), m, k, n);
        let value = Tensor::from_op("matmul", vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a: ia, b: ib, m, k, n }, &[ia, ib]))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.matrix_dims("matmul_nt", ia)?;
        let (n, k2) = self.matrix_dims("matmul_nt", ib)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.val(ia).shape(), self.val(ib).shape()));
        }
        let (ad, bd) = (self.val(ia).data(), self.val(ib).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let value = Tensor::from_op("matmul_nt", vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNt { a: ia, b: ib, m, k, n }, &[ia, ib]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.val(ia).shape() != self.val(ib).shape() {
            return Err(Error::shape(op, self.val(ia).shape(), self.val(ib).shape()));
        }
        Ok((ia, ib))
    }

    fn zip_with(&self, op: &'static str, ia: usize, ib: usize, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let data = self
            .val(ia)
            .data()
            .iter()
            .zip(self.val(ib).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_op(op, self.val(ia).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("add", a, b)?;
        let value = self.zip_with("add", ia, ib, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a: ia, b: ib }, &[ia, ib]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("sub", a, b)?;
        let value = self.zip_with("sub", ia, ib, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a: ia, b: ib }, &[ia, ib]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("hadamard", a, b)?;
        let value = self.zip_with("hadamard", ia, ib, |x, y| x * y)?;
        Ok(self.push(value, Op::Hadamard { a: ia, b: ib }, &[ia, ib]))
    }

    /// Adds `bias[c]` to every length-`c` row along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let cols = *self.val(ib).shape().first().unwrap_or(&0);
        let xs = self.val(ix).shape();
        if self.val(ib).rank() != 1 || xs.last() != Some(&cols) {
            return Err(Error::shape("add_bias", xs, self.val(ib).shape()));
        }
        let b = self.val(ib).data();
        let data = self
            .val(ix)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        let value = Tensor::from_op("add_bias", xs.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x: ix, bias: ib, cols }, &[ix, ib]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = Tensor::from_op(
            "scale",
            self.val(ia).shape().to_vec(),
            self.val(ia).data().iter().map(|v| v * factor).collect(),
        )?;
        Ok(self.push(value, Op::Scale { a: ia, factor }, &[ia]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let total = compensated_sum(self.val(ia).data().iter().copied());
        let value = Tensor::from_op("sum", Vec::new(), vec![total])?;
        Ok(self.push(value, Op::Sum { a: ia }, &[ia]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let mean = compensated_sum(t.data().iter().copied()) / t.len() as f64;
        let value = Tensor::from_op("mean", Vec::new(), vec![mean])?;
        Ok(self.push(value, Op::Mean { a: ia }, &[ia]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.val(ia).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a: ia }, &[ia]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let in_shape = self.val(ia).shape().to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &in_shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut in_strides = vec![1; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
        }
        let numel = self.val(ia).len();
        let mut src = Vec::with_capacity(numel);
        let mut counter = vec![0usize; rank];
        for _ in 0..numel {
            src.push((0..rank).map(|d| counter[d] * in_strides[perm[d]]).sum());
            for d in (0..rank).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        let data = src.iter().map(|&s| self.val(ia).data()[s]).collect();
        let value = Tensor::from_op("permute", out_shape, data)?;
        Ok(self.push(value, Op::Permute { a: ia, src }, &[ia]))
    }

    /// Elementwise map; `f` returns the value and its derivative.
    pub fn unary(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> (f64, f64)) -> Result<Var> {
        let ia = self.idx(a)?;
        let (vals, deriv): (Vec<f64>, Vec<f64>) = self.val(ia).data().iter().map(|&x| f(x)).unzip();
        let value = Tensor::from_op(op, self.val(ia).shape().to_vec(), vals)?;
        Ok(self.push(value, Op::Unary { a: ia, deriv }, &[ia]))
    }

    /// Elementwise binary map; `f` returns the value and both partials.
    pub fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> (f64, f64, f64)) -> Result<Var> {
        let (ia, ib) = self.same_shape(op, a, b)?;
        let n = self.val(ia).len();
        let (mut vals, mut da, mut db) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for (&x, &y) in self.val(ia).data().iter().zip(self.val(ib).data()) {
            let (v, dx, dy) = f(x, y);
            vals.push(v);
            da.push(dx);
            db.push(dy);
        }
        let value = Tensor::from_op(op, self.val(ia).shape().to_vec(), vals)?;
        Ok(self.push(value, Op::Binary { a: ia, b: ib, da, db }, &[ia, ib]))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let name = match kind {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        };
        self.unary(name, a, |x| kind.eval(x))
    }

    /// Normalizes each length-`C` row along the last axis with population
    /// variance, then applies `gamma[C]` and `beta[C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        if eps.is_nan() || eps < 0.0 {
            return Err(Error::InvalidConfig(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let xs = self.val(ix).shape().to_vec();
        let cols = *xs.last().ok_or_else(|| Error::shape("layer_norm", &xs, &[]))?;
        for i in [ig, ib] {
            if self.val(i).shape() != [cols] {
                return Err(Error::shape("layer_norm", &xs, self.val(i).shape()));
            }
        }
        let (g, b) = (self.val(ig).data(), self.val(ib).data());
        let rows = self.val(ix).len() / cols;
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.val(ix).data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * istd;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::from_op("layer_norm", xs, out)?;
        let op = Op::LayerNorm {
            x: ix,
            gamma: ig,
            beta: ib,
            xhat,
            inv_std,
            cols,
        };
        Ok(self.push(value, op, &[ix, ig, ib]))
    }

    /// Per-channel 2-D cross-correlation with zero "same" padding.
    ///
    /// `x` is `[C, H, W]` or `[N, C, H, W]`; `k` is `[C, kh, kw]` with odd sides.
    pub fn conv2d_depthwise(&mut self, x: Var, k: Var) -> Result<Var> {
        let (ix, ik) = (self.idx(x)?, self.idx(k)?);
        let xs = self.val(ix).shape().to_vec();
        let (batch, channels, height, width) = match xs[..] {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d_depthwise", &xs, self.val(ik).shape())),
        };
        let (kc, kh, kw) = match self.val(ik).shape() {
            &[kc, kh, kw] => (kc, kh, kw),
            s => return Err(Error::shape("conv2d_depthwise", &xs, s)),
        };
        if kc != channels {
            return Err(Error::shape("conv2d_depthwise", &xs, self.val(ik).shape()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::EvenKernel(kh, kw));
        }
        let dims = ConvDims {
            batch,
            channels,
            height,
            width,
            kh,
            kw,
        };
        let mut out = vec![0.0; self.val(ix).len()];
        let (xd, kd) = (self.val(ix).data(), self.val(ik).data());
        conv_taps(dims, |o, xi, ki| out[o] += xd[xi] * kd[ki]);
        let value = Tensor::from_op("conv2d_depthwise", xs, out)?;
        Ok(self.push(value, Op::Conv { x: ix, k: ik, dims }, &[ix, ik]))
    }

    /// Per-output bilinear forms: `out[b, i] = x_bᵀ · wq[i] · x_b`.
    pub fn bilinear(&mut self, x: Var, wq: Var) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(wq)?);
        let (batch, n) = self.matrix_dims("bilinear", ix)?;
        let m = match self.val(iw).shape() {
            &[m, a, b] if a == n && b == n => m,
            s => return Err(Error::shape("bilinear", self.val(ix).shape(), s)),
        };
        let (xd, wd) = (self.val(ix).data(), self.val(iw).data());
        let mut out = vec![0.0; batch * m];
        for bi in 0..batch {
            let xb = &xd[bi * n..(bi + 1) * n];
            for i in 0..m {
                let w = &wd[i * n * n..(i + 1) * n * n];
                let mut acc = 0.0;
                for j in 0..n {
                    let row: f64 = w[j * n..(j + 1) * n].iter().zip(xb).map(|(a, b)| a * b).sum();
                    acc += xb[j] * row;
                }
                out[bi * m + i] = acc;
            }
        }
        let value = Tensor::from_op("bilinear", vec![batch, m], out)?;
        Ok(self.push(
            value,
            Op::Bilinear {
                x: ix,
                wq: iw,
                batch,
                n,
                m,
            },
            &[ix, iw],
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ip, it) = self.same_shape("mse", pred, target)?;
        let n = self.val(ip).len() as f64;
        let loss = compensated_sum(
            self.val(ip)
                .data()
                .iter()
                .zip(self.val(it).data())
                .map(|(p, t)| (p - t) * (p - t)),
        ) / n;
        let value = Tensor::from_op("mse", Vec::new(), vec![loss])?;
        Ok(self.push(value, Op::Mse { pred: ip, target: it }, &[ip, it]))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let (batch, classes) = self.matrix_dims("softmax_xent", il)?;
        if targets.len() != batch {
            return Err(Error::shape("softmax_xent", &[batch, classes], &[targets.len()]));
        }
        if let Some(&class) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::ClassOutOfRange { class, classes });
        }
        let mut probs = Vec::with_capacity(batch * classes);
        let mut loss = 0.0;
        for (row, &t) in self.val(il).data().chunks(classes).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::from_op("softmax_xent", Vec::new(), vec![loss / batch as f64])?;
        let op = Op::SoftmaxXent {
            logits: il,
            probs,
            targets: targets.to_vec(),
            classes,
        };
        Ok(self.push(value, op, &[il]))
    }

    /// Populates gradients on every `requires_grad` leaf reachable from the
    /// scalar `root`. Gradients add onto any already present.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root = self.idx(root)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::NotScalarRoot(self.nodes[root].value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root).map(|_| None).collect();
        adj[root] = Some(vec![1.0]);
        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                let shape = node.value.shape().to_vec();
                let total = match node.grad.take() {
                    Some(prev) => prev.data().iter().zip(&g).map(|(a, b)| a + b).collect(),
                    None => g,
                };
                node.grad = Some(Tensor::from_op("backward", shape, total)?);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let needs = |j: usize| self.nodes[j].needs_grad;
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !needs(j) {
                return;
            }
            let buf = adj[j].get_or_insert_with(|| vec![0.0; self.nodes[j].value.len()]);
            f(buf);
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (self.val(a).data(), self.val(b).data());
                // dA = dC · Bᵀ
                acc(a, &mut |da| {
                    for r in 0..m {
                        for c in 0..k {
                            da[r * k + c] += (0..n).map(|j| g[r * n + j] * bd[c * n + j]).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · dC
                acc(b, &mut |db| {
                    for r in 0..m {
                        for c in 0..k {
                            let av = ad[r * k + c];
                            for j in 0..n {
                                db[c * n + j] += av * g[r * n + j];
                            }
                        }
                    }
                });
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                let (ad, bd) = (self.val(a).data(), self.val(b).data());
                acc(a, &mut |da| {
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            for c in 0..k {
                                da[r * k + c] += gv * bd[j * k + c];
                            }
                        }
                    }
                });
                acc(b, &mut |db| {
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            for c in 0..k {
                                db[j * k + c] += gv * ad[r * k + c];
                            }
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Hadamard { a, b } => {
                let (ad, bd) = (self.val(a).data(), self.val(b).data());
                acc(a, &mut |d| {
                    for (j, x) in d.iter_mut().enumerate() {
                        *x += g[j] * bd[j];
                    }
                });
                acc(b, &mut |d| {
                    for (j, x) in d.iter_mut().enumerate() {
                        *x += g[j] * ad[j];
                    }
                });
            }
            &Op::AddBias { x, bias, cols } => {
                acc(x, &mut |d| add_into(d, g));
                acc(bias, &mut |d| {
                    for (j, gv) in g.iter().enumerate() {
                        d[j % cols] += gv;
                    }
                });
            }
            &Op::Scale { a, factor } => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += factor * y));
            }
            &Op::Sum { a } => acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            &Op::Mean { a } => {
                let scale = g[0] / self.val(a).len() as f64;
                acc(a, &mut |d| d.iter_mut().for_each(|x| *x += scale));
            }
            &Op::Reshape { a } => acc(a, &mut |d| add_into(d, g)),
            Op::Permute { a, src } => acc(*a, &mut |d| {
                for (o, &s) in src.iter().enumerate() {
                    d[s] += g[o];
                }
            }),
            Op::Unary { a, deriv } => acc(*a, &mut |d| {
                for (j, x) in d.iter_mut().enumerate() {
                    *x += g[j] * deriv[j];
                }
            }),
            Op::Binary { a, b, da, db } => {
                acc(*a, &mut |d| {
                    for (j, x) in d.iter_mut().enumerate() {
                        *x += g[j] * da[j];
                    }
                });
                acc(*b, &mut |d| {
                    for (j, x) in d.iter_mut().enumerate() {
                        *x += g[j] * db[j];
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                cols,
            } => {
                let cols = *cols;
                let gd = self.val(*gamma).data();
                acc(*x, &mut |dx| {
                    for (r, istd) in inv_std.iter().enumerate() {
                        let base = r * cols;
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..cols {
                            let dh = g[base + j] * gd[j];
                            mean_d += dh;
                            mean_dh += dh * xhat[base + j];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        for j in 0..cols {
                            let dh = g[base + j] * gd[j];
                            dx[base + j] += istd * (dh - mean_d - xhat[base + j] * mean_dh);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (j, gv) in g.iter().enumerate() {
                        dg[j % cols] += gv * xhat[j];
                    }
                });
                acc(*beta, &mut |db| {
                    for (j, gv) in g.iter().enumerate() {
                        db[j % cols] += gv;
                    }
                });
            }
            &Op::Conv { x, k, dims } => {
                let (xd, kd) = (self.val(x).data(), self.val(k).data());
                acc(x, &mut |dx| conv_taps(dims, |o, xi, ki| dx[xi] += g[o] * kd[ki]));
                acc(k, &mut |dk| conv_taps(dims, |o, xi, ki| dk[ki] += g[o] * xd[xi]));
            }
            &Op::Bilinear { x, wq, batch, n, m } => {
                let (xd, wd) = (self.val(x).data(), self.val(wq).data());
                acc(x, &mut |dx| {
                    for bi in 0..batch {
                        let xb = &xd[bi * n..(bi + 1) * n];
                        for i in 0..m {
                            let gv = g[bi * m + i];
                            let w = &wd[i * n * n..(i + 1) * n * n];
                            for j in 0..n {
                                for l in 0..n {
                                    dx[bi * n + j] += gv * (w[j * n + l] + w[l * n + j]) * xb[l];
                                }
                            }
                        }
                    }
                });
                acc(wq, &mut |dw| {
                    for bi in 0..batch {
                        let xb = &xd[bi * n..(bi + 1) * n];
                        for i in 0..m {
                            let gv = g[bi * m + i];
                            let w = &mut dw[i * n * n..(i + 1) * n * n];
                            for j in 0..n {
                                for l in 0..n {
                                    w[j * n + l] += gv * xb[j] * xb[l];
                                }
                            }
                        }
                    }
                });
            }
            &Op::Mse { pred, target } => {
                let (pd, td) = (self.val(pred).data(), self.val(target).data());
                let scale = 2.0 * g[0] / pd.len() as f64;
                acc(pred, &mut |d| {
                    for (j, x) in d.iter_mut().enumerate() {
                        *x += scale * (pd[j] - td[j]);
                    }
                });
                acc(target, &mut |d| {
                    for (j, x) in d.iter_mut().enumerate() {
                        *x -= scale * (pd[j] - td[j]);
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
                classes,
            } => {
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..*classes {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            d[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0;
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + carry
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Calls `f(out_offset, in_offset, kernel_offset)` for every in-bounds tap.
fn conv_taps(d: ConvDims, mut f: impl FnMut(usize, usize, usize)) {
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let plane = d.height * d.width;
    for n in 0..d.batch {
        for c in 0..d.channels {
            let base = (n * d.channels + c) * plane;
            let kbase = c * d.kh * d.kw;
            for i in 0..d.height {
                for j in 0..d.width {
                    let o = base + i * d.width + j;
                    for p in 0..d.kh {
                        let si = i as isize + p as isize - ph;
                        if si < 0 || si >= d.height as isize {
                            continue;
                        }
                        for q in 0..d.kw {
                            let sj = j as isize + q as isize - pw;
                            if sj < 0 || sj >= d.width as isize {
                                continue;
                            }
                            f(o, base + si as usize * d.width + sj as usize, kbase + p * d.kw + q);
                        }
                    }
                }
            }
        }
    }
}
