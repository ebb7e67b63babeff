//! Reverse-mode gradient tape.
//!
//! Operations execute eagerly on [`Tensor`] values owned by the tape and
//! append a backward rule when gradients are enabled and some input
//! requires them. [`Tape::backward`] then visits the records in exact
//! reverse order, accumulating gradients into every reachable node that
//! requires them. A fresh tape is built per forward pass; [`Var`] handles
//! are only meaningful on the tape that produced them.
//!
//! Every op validates shapes up front and checks its output for NaN/Inf
//! before the value is admitted, so non-finite states surface at the op
//! boundary that produced them.

use crate::error::{Error, Result};
use crate::tensor::{rel_err, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    requires_grad: bool,
}

/// Per-channel running statistics for batch normalization.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub running_mean: Vec<Scalar>,
    pub running_var: Vec<Scalar>,
    pub initialized: bool,
}

/// Batch statistics observed by one train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<Scalar>,
    pub var: Vec<Scalar>,
}

const BN_MOMENTUM: Scalar = 0.1;

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
        }
    }

    /// Fold one batch's statistics into the running averages
    /// (`r <- 0.9 r + 0.1 batch`).
    pub fn update(&mut self, stats: &BnStats) {
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        self.initialized = true;
    }
}

enum Record {
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    Div { a: usize, b: usize, out: usize },
    MinElem { a: usize, b: usize, out: usize },
    MaxElem { a: usize, b: usize, out: usize },
    Affine { x: usize, out: usize, scale: Scalar },
    Powi { x: usize, out: usize, n: i32 },
    Ln { x: usize, out: usize },
    Abs { x: usize, out: usize },
    Relu { x: usize, out: usize },
    Sigmoid { x: usize, out: usize },
    Gelu { x: usize, out: usize },
    Clamp { x: usize, out: usize, lo: Scalar, hi: Scalar },
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, out: usize, rows: usize, cols: usize },
    Reshape { x: usize, out: usize },
    Softmax { x: usize, out: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, out: usize, stats: Vec<(Scalar, Scalar)> },
    BatchNorm { x: usize, gamma: usize, beta: usize, out: usize, rstd: Vec<Scalar>, mean: Vec<Scalar>, train: bool },
    Conv2d { x: usize, w: usize, b: usize, out: usize, ksize: usize, pad: usize },
    Sum { x: usize, out: usize },
    AddBias { x: usize, b: usize, out: usize },
    SliceCols { x: usize, out: usize, start: usize, width: usize },
    ConcatCols { xs: Vec<usize>, out: usize, widths: Vec<usize> },
    ConcatRows { xs: Vec<usize>, out: usize, heights: Vec<usize> },
    GatherRows { x: usize, out: usize, idx: Vec<usize> },
    ScatterRows { x: usize, out: usize, idx: Vec<usize> },
    GatherElems { x: usize, out: usize, idx: Vec<usize> },
}

/// Records operations and replays them backwards to populate gradients.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Scalar>>>,
    records: Vec<Record>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            records: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that stores values but never records backward rules.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Register a leaf tensor. Gradients are tracked when `requires_grad`
    /// is set and the tape has gradients enabled.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.clone(), requires_grad)
    }

    /// Leaf that never takes gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false)
    }

    pub fn scalar(&mut self, v: Scalar) -> Var {
        self.push(Tensor::scalar(v), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of `v` populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient is shape-congruent with its node")
        })
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, rec: Record) {
        self.records.push(rec);
    }

    fn finish(&mut self, value: Tensor, op: &'static str, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, rg))
    }

    // ── elementwise binary ops ──────────────────────────────────────────

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let out = self.finish(data, "add", &[a, b])?;
        if self.requires_grad(out) {
            self.record(Record::Add { a: a.0, b: b.0, out: out.0 });
        }
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let out = self.finish(data, "sub", &[a, b])?;
        if self.requires_grad(out) {
            self.record(Record::Sub { a: a.0, b: b.0, out: out.0 });
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let out = self.finish(data, "mul", &[a, b])?;
        if self.requires_grad(out) {
            self.record(Record::Mul { a: a.0, b: b.0, out: out.0 });
        }
        Ok(out)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let out = self.finish(data, "div", &[a, b])?;
        if self.requires_grad(out) {
            self.record(Record::Div { a: a.0, b: b.0, out: out.0 });
        }
        Ok(out)
    }

    /// Elementwise minimum; the smaller input receives the gradient
    /// (ties go to `a`).
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "min_elem")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x.min(y));
        let out = self.finish(data, "min_elem", &[a, b])?;
        if self.requires_grad(out) {
            self.record(Record::MinElem { a: a.0, b: b.0, out: out.0 });
        }
        Ok(out)
    }

    /// Elementwise maximum; the larger input receives the gradient
    /// (ties go to `a`).
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "max_elem")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x.max(y));
        let out = self.finish(data, "max_elem", &[a, b])?;
        if self.requires_grad(out) {
            self.record(Record::MaxElem { a: a.0, b: b.0, out: out.0 });
        }
        Ok(out)
    }

    // ── elementwise unary ops ───────────────────────────────────────────

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: Scalar, shift: Scalar) -> Result<Var> {
        let data = map(self.value(x), |v| scale * v + shift);
        let out = self.finish(data, "affine", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::Affine { x: x.0, out: out.0, scale });
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, scale: Scalar) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    /// Elementwise integer power, `n >= 1`.
    pub fn powi(&mut self, x: Var, n: i32) -> Result<Var> {
        if n < 1 {
            return Err(Error::invalid("powi exponent must be >= 1"));
        }
        let data = map(self.value(x), |v| v.powi(n));
        let out = self.finish(data, "powi", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::Powi { x: x.0, out: out.0, n });
        }
        Ok(out)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let data = map(self.value(x), |v| v.ln());
        let out = self.finish(data, "ln", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::Ln { x: x.0, out: out.0 });
        }
        Ok(out)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let data = map(self.value(x), |v| v.abs());
        let out = self.finish(data, "abs", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::Abs { x: x.0, out: out.0 });
        }
        Ok(out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = map(self.value(x), |v| v.max(0.0));
        let out = self.finish(data, "relu", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::Relu { x: x.0, out: out.0 });
        }
        Ok(out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = map(self.value(x), |v| 1.0 / (1.0 + (-v).exp()));
        let out = self.finish(data, "sigmoid", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::Sigmoid { x: x.0, out: out.0 });
        }
        Ok(out)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = map(self.value(x), gelu_fwd);
        let out = self.finish(data, "gelu", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::Gelu { x: x.0, out: out.0 });
        }
        Ok(out)
    }

    /// Clamp into `[lo, hi]`; gradient passes through where the input is
    /// strictly inside the range.
    pub fn clamp(&mut self, x: Var, lo: Scalar, hi: Scalar) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid("clamp: lo > hi"));
        }
        let data = map(self.value(x), |v| v.clamp(lo, hi));
        let out = self.finish(data, "clamp", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::Clamp { x: x.0, out: out.0, lo, hi });
        }
        Ok(out)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = self.finish(Tensor::raw(vec![m, n], data), "matmul", &[a, b])?;
        if self.requires_grad(out) {
            self.record(Record::Matmul { a: a.0, b: b.0, out: out.0, m, k, n });
        }
        Ok(out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose expects rank 2"));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let out = self.finish(Tensor::raw(vec![cols, rows], data), "transpose", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::Transpose { x: x.0, out: out.0, rows, cols });
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape("reshape changes element count"));
        }
        let t = Tensor::raw(shape, self.value(x).data().to_vec());
        let out = self.finish(t, "reshape", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::Reshape { x: x.0, out: out.0 });
        }
        Ok(out)
    }

    /// Add a bias row-vector to every row of a rank-2 tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::shape(format!("add_bias: {:?} + {:?}", sx, sb)));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let bd = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bd[c];
            }
        }
        let out = self.finish(Tensor::raw(vec![rows, cols], data), "add_bias", &[x, b])?;
        if self.requires_grad(out) {
            self.record(Record::AddBias { x: x.0, b: b.0, out: out.0 });
        }
        Ok(out)
    }

    // ── normalization and softmax ───────────────────────────────────────

    /// Softmax along `axis`, computed with max-subtraction so arbitrarily
    /// large finite inputs cannot overflow.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let lanes = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lanes * inner + i;
                let mut max = Scalar::NEG_INFINITY;
                for l in 0..lanes {
                    max = max.max(src[base + l * inner]);
                }
                let mut denom = 0.0;
                for l in 0..lanes {
                    let e = (src[base + l * inner] - max).exp();
                    data[base + l * inner] = e;
                    denom += e;
                }
                for l in 0..lanes {
                    data[base + l * inner] /= denom;
                }
            }
        }
        let out = self.finish(Tensor::raw(shape, data), "softmax", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::Softmax { x: x.0, out: out.0, axis });
        }
        Ok(out)
    }

    /// Layer normalization over the last axis of a rank-2 tensor, followed
    /// by the learned affine transform.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Scalar) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::shape("layer_norm expects rank 2"));
        }
        let (rows, cols) = (s[0], s[1]);
        if self.value(gamma).shape() != [cols] || self.value(beta).shape() != [cols] {
            return Err(Error::shape("layer_norm: gamma/beta must match last dim"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut data = vec![0.0; src.len()];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<Scalar>() / cols as Scalar;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / cols as Scalar;
            let rstd = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * rstd * g[c] + be[c];
            }
            stats.push((mean, rstd));
        }
        let out = self.finish(Tensor::raw(vec![rows, cols], data), "layer_norm", &[x, gamma, beta])?;
        if self.requires_grad(out) {
            self.record(Record::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                out: out.0,
                stats,
            });
        }
        Ok(out)
    }

    /// Batch normalization over a `C x H x W` tensor with per-channel
    /// statistics.
    ///
    /// Train mode normalizes with the batch statistics and folds them into
    /// `state` under momentum 0.1; eval mode normalizes with the running
    /// statistics and fails on an uninitialized state.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        train: bool,
    ) -> Result<Var> {
        if train {
            let (out, stats) = self.batch_norm_train(x, gamma, beta)?;
            state.update(&stats);
            Ok(out)
        } else {
            self.batch_norm_eval(x, gamma, beta, state)
        }
    }

    /// Train-mode batch norm that leaves the running-statistics update to
    /// the caller (used by the batch-parallel trainer, which merges the
    /// returned statistics across a batch before updating once).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BnStats)> {
        let (channels, spatial) = self.bn_check(x, gamma, beta)?;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut data = vec![0.0; src.len()];
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        let mut rstd = vec![0.0; channels];
        for c in 0..channels {
            let plane = &src[c * spatial..(c + 1) * spatial];
            let m = plane.iter().sum::<Scalar>() / spatial as Scalar;
            let v = plane.iter().map(|x| (x - m) * (x - m)).sum::<Scalar>() / spatial as Scalar;
            let r = 1.0 / (v + BN_EPS).sqrt();
            for (i, &p) in plane.iter().enumerate() {
                data[c * spatial + i] = (p - m) * r * g[c] + be[c];
            }
            mean[c] = m;
            var[c] = v;
            rstd[c] = r;
        }
        let shape = self.value(x).shape().to_vec();
        let out = self.finish(Tensor::raw(shape, data), "batch_norm", &[x, gamma, beta])?;
        if self.requires_grad(out) {
            self.record(Record::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                out: out.0,
                rstd,
                mean: mean.clone(),
                train: true,
            });
        }
        Ok((out, BnStats { mean, var }))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
    ) -> Result<Var> {
        if !state.initialized {
            return Err(Error::state(
                "eval-mode batch norm with uninitialized running statistics",
            ));
        }
        let (channels, spatial) = self.bn_check(x, gamma, beta)?;
        if state.running_mean.len() != channels {
            return Err(Error::shape("batch_norm: running stats channel mismatch"));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut data = vec![0.0; src.len()];
        let mut rstd = vec![0.0; channels];
        for c in 0..channels {
            let r = 1.0 / (state.running_var[c] + BN_EPS).sqrt();
            rstd[c] = r;
            let m = state.running_mean[c];
            for i in 0..spatial {
                data[c * spatial + i] = (src[c * spatial + i] - m) * r * g[c] + be[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let mean = state.running_mean.clone();
        let out = self.finish(Tensor::raw(shape, data), "batch_norm", &[x, gamma, beta])?;
        if self.requires_grad(out) {
            self.record(Record::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                out: out.0,
                rstd,
                mean,
                train: false,
            });
        }
        Ok(out)
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let s = self.value(x).shape();
        if s.len() != 3 {
            return Err(Error::shape("batch_norm expects C x H x W"));
        }
        let channels = s[0];
        if self.value(gamma).shape() != [channels] || self.value(beta).shape() != [channels] {
            return Err(Error::shape("batch_norm: gamma/beta must be per-channel"));
        }
        Ok((channels, s[1] * s[2]))
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// 2-D convolution with a square `k x k` kernel, stride 1 and zero
    /// padding `k/2`, so spatial dims are preserved for odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if sx.len() != 3 || sw.len() != 4 {
            return Err(Error::shape("conv2d expects x: CxHxW, w: C'xCxkxk"));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let (cout, ksize) = (sw[0], sw[2]);
        if sw[1] != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, kernel expects {}",
                sw[1]
            )));
        }
        if sw[3] != ksize || ksize % 2 == 0 {
            return Err(Error::shape("conv2d kernel must be square with odd size"));
        }
        if sb != [cout] {
            return Err(Error::shape("conv2d: bias must be per-output-channel"));
        }
        let pad = ksize / 2;
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let bd = self.value(b).data();
        let mut data = vec![0.0; cout * h * wd];
        for co in 0..cout {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = bd[co];
                    for ci in 0..cin {
                        for ky in 0..ksize {
                            let sy = oy as isize + ky as isize - pad as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..ksize {
                                let sx_ = ox as isize + kx as isize - pad as isize;
                                if sx_ < 0 || sx_ >= wd as isize {
                                    continue;
                                }
                                acc += wdata[((co * cin + ci) * ksize + ky) * ksize + kx]
                                    * xd[(ci * h + sy as usize) * wd + sx_ as usize];
                            }
                        }
                    }
                    data[(co * h + oy) * wd + ox] = acc;
                }
            }
        }
        let out = self.finish(Tensor::raw(vec![cout, h, wd], data), "conv2d", &[x, w, b])?;
        if self.requires_grad(out) {
            self.record(Record::Conv2d { x: x.0, w: w.0, b: b.0, out: out.0, ksize, pad });
        }
        Ok(out)
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum of all elements, returned as a scalar tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: Scalar = self.value(x).data().iter().sum();
        let out = self.finish(Tensor::scalar(total), "sum", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::Sum { x: x.0, out: out.0 });
        }
        Ok(out)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as Scalar)
    }

    // ── structural ops on rank-2 tensors ────────────────────────────────

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 || start + width > s[1] {
            return Err(Error::shape("slice_cols out of range"));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let out = self.finish(Tensor::raw(vec![rows, width], data), "slice_cols", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::SliceCols { x: x.0, out: out.0, start, width });
        }
        Ok(out)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_cols of nothing"));
        }
        let rows = self.value(xs[0]).shape()[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols: row counts differ"));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        let out = self.finish(Tensor::raw(vec![rows, total], data), "concat_cols", xs)?;
        if self.requires_grad(out) {
            self.record(Record::ConcatCols {
                xs: xs.iter().map(|v| v.0).collect(),
                out: out.0,
                widths,
            });
        }
        Ok(out)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_rows of nothing"));
        }
        let cols = self.value(xs[0]).shape()[1];
        let mut heights = Vec::with_capacity(xs.len());
        let mut data = Vec::new();
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows: column counts differ"));
            }
            heights.push(s[0]);
            data.extend_from_slice(self.value(v).data());
        }
        let rows: usize = heights.iter().sum();
        let out = self.finish(Tensor::raw(vec![rows, cols], data), "concat_rows", xs)?;
        if self.requires_grad(out) {
            self.record(Record::ConcatRows {
                xs: xs.iter().map(|v| v.0).collect(),
                out: out.0,
                heights,
            });
        }
        Ok(out)
    }

    /// Select rows by index (duplicates allowed). Gradient scatter-adds
    /// back into the source rows.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::shape("gather_rows expects rank 2"));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("gather_rows: index {bad} >= {rows}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out = self.finish(Tensor::raw(vec![idx.len(), cols], data), "gather_rows", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::GatherRows { x: x.0, out: out.0, idx: idx.to_vec() });
        }
        Ok(out)
    }

    /// Scatter the rows of `x` into a `total_rows x cols` tensor at the
    /// given (unique) row indices; all other rows are exactly zero.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], total_rows: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::shape("scatter_rows: index count must match rows"));
        }
        let cols = s[1];
        let mut seen = vec![false; total_rows];
        for &i in idx {
            if i >= total_rows {
                return Err(Error::invalid(format!("scatter_rows: index {i} >= {total_rows}")));
            }
            if seen[i] {
                return Err(Error::state(format!("scatter_rows: duplicate index {i}")));
            }
            seen[i] = true;
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; total_rows * cols];
        for (j, &i) in idx.iter().enumerate() {
            data[i * cols..(i + 1) * cols].copy_from_slice(&src[j * cols..(j + 1) * cols]);
        }
        let out = self.finish(Tensor::raw(vec![total_rows, cols], data), "scatter_rows", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::ScatterRows { x: x.0, out: out.0, idx: idx.to_vec() });
        }
        Ok(out)
    }

    /// Pick individual elements by flat index into a 1-D tensor.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let numel = self.value(x).numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= numel) {
            return Err(Error::invalid(format!("gather_elems: index {bad} >= {numel}")));
        }
        let src = self.value(x).data();
        let data: Vec<Scalar> = idx.iter().map(|&i| src[i]).collect();
        let out = self.finish(Tensor::raw(vec![idx.len()], data), "gather_elems", &[x])?;
        if self.requires_grad(out) {
            self.record(Record::GatherElems { x: x.0, out: out.0, idx: idx.to_vec() });
        }
        Ok(out)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Run the reverse sweep from a scalar `loss`, populating gradients of
    /// every reachable node that requires them. Gradients accumulate when a
    /// node feeds multiple ops.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward_pass requires a scalar loss"));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for ri in (0..self.records.len()).rev() {
            self.apply_backward(ri)?;
        }
        Ok(())
    }

    fn take_out_grad(&self, out: usize) -> Option<Vec<Scalar>> {
        self.grads[out].clone()
    }

    fn acc(&mut self, node: usize, delta: &[Scalar]) {
        if !self.nodes[node].requires_grad {
            return;
        }
        let slot = &mut self.grads[node];
        match slot {
            Some(g) => {
                for (gv, dv) in g.iter_mut().zip(delta) {
                    *gv += dv;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn apply_backward(&mut self, ri: usize) -> Result<()> {
        // Records never reference nodes created after them, and each record's
        // output id is stored inside the variant.
        let rec = std::mem::replace(&mut self.records[ri], Record::Sum { x: 0, out: 0 });
        self.run_backward(&rec)?;
        self.records[ri] = rec;
        Ok(())
    }

    fn run_backward(&mut self, rec: &Record) -> Result<()> {
        match rec {
            Record::Add { a, b, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    self.acc(*a, &g);
                    self.acc(*b, &g);
                }
            }
            Record::Sub { a, b, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    self.acc(*a, &g);
                    let neg: Vec<Scalar> = g.iter().map(|v| -v).collect();
                    self.acc(*b, &neg);
                }
            }
            Record::Mul { a, b, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let bv: Vec<Scalar> =
                        g.iter().zip(self.nodes[*b].value.data()).map(|(g, v)| g * v).collect();
                    let av: Vec<Scalar> =
                        g.iter().zip(self.nodes[*a].value.data()).map(|(g, v)| g * v).collect();
                    self.acc(*a, &bv);
                    self.acc(*b, &av);
                }
            }
            Record::Div { a, b, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let bd = self.nodes[*b].value.data();
                    let ad = self.nodes[*a].value.data();
                    let da: Vec<Scalar> = g.iter().zip(bd).map(|(g, b)| g / b).collect();
                    let db: Vec<Scalar> = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect();
                    self.acc(*a, &da);
                    self.acc(*b, &db);
                }
            }
            Record::MinElem { a, b, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let ad = self.nodes[*a].value.data();
                    let bd = self.nodes[*b].value.data();
                    let da: Vec<Scalar> = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(g, (a, b))| if a <= b { *g } else { 0.0 })
                        .collect();
                    let db: Vec<Scalar> = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(g, (a, b))| if a <= b { 0.0 } else { *g })
                        .collect();
                    self.acc(*a, &da);
                    self.acc(*b, &db);
                }
            }
            Record::MaxElem { a, b, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let ad = self.nodes[*a].value.data();
                    let bd = self.nodes[*b].value.data();
                    let da: Vec<Scalar> = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(g, (a, b))| if a >= b { *g } else { 0.0 })
                        .collect();
                    let db: Vec<Scalar> = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(g, (a, b))| if a >= b { 0.0 } else { *g })
                        .collect();
                    self.acc(*a, &da);
                    self.acc(*b, &db);
                }
            }
            Record::Affine { x, out, scale } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let dx: Vec<Scalar> = g.iter().map(|g| g * scale).collect();
                    self.acc(*x, &dx);
                }
            }
            Record::Powi { x, out, n } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let xd = self.nodes[*x].value.data();
                    let dx: Vec<Scalar> = g
                        .iter()
                        .zip(xd)
                        .map(|(g, x)| g * (*n as Scalar) * x.powi(n - 1))
                        .collect();
                    self.acc(*x, &dx);
                }
            }
            Record::Ln { x, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let xd = self.nodes[*x].value.data();
                    let dx: Vec<Scalar> = g.iter().zip(xd).map(|(g, x)| g / x).collect();
                    self.acc(*x, &dx);
                }
            }
            Record::Abs { x, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let xd = self.nodes[*x].value.data();
                    let dx: Vec<Scalar> = g
                        .iter()
                        .zip(xd)
                        .map(|(g, x)| if *x >= 0.0 { *g } else { -*g })
                        .collect();
                    self.acc(*x, &dx);
                }
            }
            Record::Relu { x, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let xd = self.nodes[*x].value.data();
                    let dx: Vec<Scalar> = g
                        .iter()
                        .zip(xd)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.acc(*x, &dx);
                }
            }
            Record::Sigmoid { x, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let yd = self.nodes[*out].value.data();
                    let dx: Vec<Scalar> =
                        g.iter().zip(yd).map(|(g, y)| g * y * (1.0 - y)).collect();
                    self.acc(*x, &dx);
                }
            }
            Record::Gelu { x, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let xd = self.nodes[*x].value.data();
                    let dx: Vec<Scalar> = g.iter().zip(xd).map(|(g, x)| g * gelu_bwd(*x)).collect();
                    self.acc(*x, &dx);
                }
            }
            Record::Clamp { x, out, lo, hi } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let xd = self.nodes[*x].value.data();
                    let dx: Vec<Scalar> = g
                        .iter()
                        .zip(xd)
                        .map(|(g, x)| if *x > *lo && *x < *hi { *g } else { 0.0 })
                        .collect();
                    self.acc(*x, &dx);
                }
            }
            Record::Matmul { a, b, out, m, k, n } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let ad = self.nodes[*a].value.data();
                    let bd = self.nodes[*b].value.data();
                    if self.nodes[*a].requires_grad {
                        let da = matmul_nt(&g, bd, *m, *n, *k);
                        self.acc(*a, &da);
                    }
                    if self.nodes[*b].requires_grad {
                        let db = matmul_tn(ad, &g, *m, *k, *n);
                        self.acc(*b, &db);
                    }
                }
            }
            Record::Transpose { x, out, rows, cols } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let mut dx = vec![0.0; rows * cols];
                    for c in 0..*cols {
                        for r in 0..*rows {
                            dx[r * cols + c] = g[c * rows + r];
                        }
                    }
                    self.acc(*x, &dx);
                }
            }
            Record::Reshape { x, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    self.acc(*x, &g);
                }
            }
            Record::Softmax { x, out, axis } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let y = self.nodes[*out].value.data();
                    let shape = self.nodes[*out].value.shape();
                    let lanes = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lanes * inner + i;
                            let mut dot = 0.0;
                            for l in 0..lanes {
                                let p = base + l * inner;
                                dot += g[p] * y[p];
                            }
                            for l in 0..lanes {
                                let p = base + l * inner;
                                dx[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                    self.acc(*x, &dx);
                }
            }
            Record::LayerNorm { x, gamma, beta, out, stats } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let xd = self.nodes[*x].value.data();
                    let gd = self.nodes[*gamma].value.data();
                    let cols = gd.len();
                    let rows = stats.len();
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    for r in 0..rows {
                        let (mean, rstd) = stats[r];
                        let row = &xd[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for c in 0..cols {
                            let xh = (row[c] - mean) * rstd;
                            let dxh = grow[c] * gd[c];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                            dgamma[c] += grow[c] * xh;
                            dbeta[c] += grow[c];
                        }
                        let inv_n = 1.0 / cols as Scalar;
                        for c in 0..cols {
                            let xh = (row[c] - mean) * rstd;
                            let dxh = grow[c] * gd[c];
                            dx[r * cols + c] =
                                rstd * (dxh - inv_n * sum_dxh - xh * inv_n * sum_dxh_xh);
                        }
                    }
                    self.acc(*x, &dx);
                    self.acc(*gamma, &dgamma);
                    self.acc(*beta, &dbeta);
                }
            }
            Record::BatchNorm { x, gamma, beta, out, rstd, mean, train } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let xd = self.nodes[*x].value.data();
                    let gd = self.nodes[*gamma].value.data();
                    let channels = gd.len();
                    let spatial = xd.len() / channels;
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; channels];
                    let mut dbeta = vec![0.0; channels];
                    for c in 0..channels {
                        let r = rstd[c];
                        let m = mean[c];
                        let plane = &xd[c * spatial..(c + 1) * spatial];
                        let gplane = &g[c * spatial..(c + 1) * spatial];
                        if *train {
                            let mut sum_dxh = 0.0;
                            let mut sum_dxh_xh = 0.0;
                            for i in 0..spatial {
                                let xh = (plane[i] - m) * r;
                                let dxh = gplane[i] * gd[c];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                                dgamma[c] += gplane[i] * xh;
                                dbeta[c] += gplane[i];
                            }
                            let inv_n = 1.0 / spatial as Scalar;
                            for i in 0..spatial {
                                let xh = (plane[i] - m) * r;
                                let dxh = gplane[i] * gd[c];
                                dx[c * spatial + i] =
                                    r * (dxh - inv_n * sum_dxh - xh * inv_n * sum_dxh_xh);
                            }
                        } else {
                            for i in 0..spatial {
                                let xh = (plane[i] - m) * r;
                                dgamma[c] += gplane[i] * xh;
                                dbeta[c] += gplane[i];
                                dx[c * spatial + i] = gplane[i] * gd[c] * r;
                            }
                        }
                    }
                    self.acc(*x, &dx);
                    self.acc(*gamma, &dgamma);
                    self.acc(*beta, &dbeta);
                }
            }
            Record::Conv2d { x, w, b, out, ksize, pad } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let xd = self.nodes[*x].value.data();
                    let wd = self.nodes[*w].value.data();
                    let sx = self.nodes[*x].value.shape();
                    let (cin, h, width) = (sx[0], sx[1], sx[2]);
                    let cout = self.nodes[*out].value.shape()[0];
                    let k = *ksize;
                    let p = *pad as isize;
                    let mut dx = vec![0.0; xd.len()];
                    let mut dw = vec![0.0; wd.len()];
                    let mut db = vec![0.0; cout];
                    for co in 0..cout {
                        for oy in 0..h {
                            for ox in 0..width {
                                let go = g[(co * h + oy) * width + ox];
                                if go == 0.0 {
                                    continue;
                                }
                                db[co] += go;
                                for ci in 0..cin {
                                    for ky in 0..k {
                                        let sy = oy as isize + ky as isize - p;
                                        if sy < 0 || sy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let sxx = ox as isize + kx as isize - p;
                                            if sxx < 0 || sxx >= width as isize {
                                                continue;
                                            }
                                            let xi = (ci * h + sy as usize) * width + sxx as usize;
                                            let wi = ((co * cin + ci) * k + ky) * k + kx;
                                            dx[xi] += go * wd[wi];
                                            dw[wi] += go * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.acc(*x, &dx);
                    self.acc(*w, &dw);
                    self.acc(*b, &db);
                }
            }
            Record::Sum { x, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let n = self.nodes[*x].value.numel();
                    let dx = vec![g[0]; n];
                    self.acc(*x, &dx);
                }
            }
            Record::AddBias { x, b, out } => {
                if let Some(g) = self.take_out_grad(*out) {
                    self.acc(*x, &g);
                    if self.nodes[*b].requires_grad {
                        let cols = self.nodes[*b].value.numel();
                        let rows = g.len() / cols;
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += g[r * cols + c];
                            }
                        }
                        self.acc(*b, &db);
                    }
                }
            }
            Record::SliceCols { x, out, start, width } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let cols = self.nodes[*x].value.shape()[1];
                    let rows = self.nodes[*x].value.shape()[0];
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + width]
                            .copy_from_slice(&g[r * width..(r + 1) * width]);
                    }
                    self.acc(*x, &dx);
                }
            }
            Record::ConcatCols { xs, out, widths } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let total: usize = widths.iter().sum();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for (xi, &w) in xs.iter().zip(widths) {
                        if self.nodes[*xi].requires_grad {
                            let mut dx = vec![0.0; rows * w];
                            for r in 0..rows {
                                dx[r * w..(r + 1) * w]
                                    .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            self.acc(*xi, &dx);
                        }
                        offset += w;
                    }
                }
            }
            Record::ConcatRows { xs, out, heights } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let cols = self.nodes[*out].value.shape()[1];
                    let mut offset = 0;
                    for (xi, &hrows) in xs.iter().zip(heights) {
                        if self.nodes[*xi].requires_grad {
                            let dx = g[offset * cols..(offset + hrows) * cols].to_vec();
                            self.acc(*xi, &dx);
                        }
                        offset += hrows;
                    }
                }
            }
            Record::GatherRows { x, out, idx } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let cols = self.nodes[*x].value.shape()[1];
                    let rows = self.nodes[*x].value.shape()[0];
                    let mut dx = vec![0.0; rows * cols];
                    for (j, &i) in idx.iter().enumerate() {
                        for c in 0..cols {
                            dx[i * cols + c] += g[j * cols + c];
                        }
                    }
                    self.acc(*x, &dx);
                }
            }
            Record::ScatterRows { x, out, idx } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let cols = self.nodes[*x].value.shape()[1];
                    let mut dx = vec![0.0; idx.len() * cols];
                    for (j, &i) in idx.iter().enumerate() {
                        dx[j * cols..(j + 1) * cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                    }
                    self.acc(*x, &dx);
                }
            }
            Record::GatherElems { x, out, idx } => {
                if let Some(g) = self.take_out_grad(*out) {
                    let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                    for (j, &i) in idx.iter().enumerate() {
                        dx[i] += g[j];
                    }
                    self.acc(*x, &dx);
                }
            }
        }
        Ok(())
    }
}

const BN_EPS: Scalar = 1e-5;

fn map(t: &Tensor, f: impl Fn(Scalar) -> Scalar) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::raw(t.shape().to_vec(), data)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(Scalar, Scalar) -> Scalar) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::raw(a.shape().to_vec(), data)
}

fn gelu_fwd(x: Scalar) -> Scalar {
    const C: Scalar = 0.797_884_56; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_bwd(x: Scalar) -> Scalar {
    const C: Scalar = 0.797_884_56;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// Row-major matmul kernels shared by forward and backward passes.

pub(crate) fn matmul_raw(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `A (m x k) . B^T` where `b` is stored as `n x k`.
fn matmul_nt(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `A^T (k x m) . G` where `a` is stored as `m x k` and `g` as `m x n`.
fn matmul_tn(a: &[Scalar], g: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += aip * gv;
            }
        }
    }
    c
}

/// Compare tape gradients against central finite differences.
///
/// `f` must deterministically rebuild the loss from leaf vars registered in
/// the order of `params`. Returns the max relative error over all parameter
/// elements, with denominator `max(|a|, |b|, 1e-6)`.
pub fn finite_difference_check<F>(params: &mut [Tensor], h: Scalar, f: F) -> Result<Scalar>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p, true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let eval = |params: &[Tensor]| -> Result<Scalar> {
        let mut t = Tape::no_grad();
        let vars: Vec<Var> = params.iter().map(|p| t.leaf(p, false)).collect();
        let loss = f(&mut t, &vars)?;
        loss.value_on(&t).item()
    };

    let mut worst: Scalar = 0.0;
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            params[pi].data_mut()[ei] = orig + h;
            let fp = eval(params)?;
            params[pi].data_mut()[ei] = orig - h;
            let fm = eval(params)?;
            params[pi].data_mut()[ei] = orig;
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[pi].data()[ei], fd));
        }
    }
    Ok(worst)
}

impl Var {
    /// Resolve this handle's value on its tape.
    pub fn value_on<'t>(&self, tape: &'t Tape) -> &'t Tensor {
        tape.value(*self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::WIDE_SCALAR;

    fn tol(fine: Scalar, coarse: Scalar) -> Scalar {
        if WIDE_SCALAR {
            fine
        } else {
            coarse
        }
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let a = t.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let y = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::tensor::tests_rng(7);
        let a = Tensor::from_fn([5, 7], |_| rng.next());
        let b = Tensor::from_fn([7, 3], |_| rng.next());
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let y = t.matmul(av, bv).unwrap();
        // independent naive oracle
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..7 {
                    acc += a.at2(i, p) * b.at2(p, j);
                }
                assert!(rel_err(acc, t.value(y).at2(i, j)) < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([4, 2]));
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        let y = t.softmax(x, 0).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_no_overflow_on_large_inputs() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[1000.0, 1000.0]));
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_frozen_values() {
        // exp(1..3) evaluated independently: 2.718282, 7.389056, 20.085537
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let y = t.softmax(x, 0).unwrap();
        let expect = [0.090_030_57, 0.244_728_47, 0.665_240_96];
        for (v, e) in t.value(y).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-5, "{v} vs {e}");
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([1, 4], vec![5.0; 4]).unwrap());
        let gamma = t.constant(Tensor::vector(&[1.0; 4]));
        let beta = t.constant(Tensor::vector(&[0.0; 4]));
        let y = t.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in t.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_symmetry() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([1, 2], vec![1.0, 3.0]).unwrap());
        let gamma = t.constant(Tensor::vector(&[1.0, 1.0]));
        let beta = t.constant(Tensor::vector(&[0.0, 0.0]));
        let y = t.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!((t.value(y).data()[0] + 1.0).abs() < 1e-4);
        assert!((t.value(y).data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_output_statistics() {
        let mut rng = crate::tensor::tests_rng(3);
        let x = Tensor::from_fn([1, 64], |_| rng.next() * 3.0 + 0.7);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let gamma = t.constant(Tensor::vector(&[1.0; 64]));
        let beta = t.constant(Tensor::vector(&[0.0; 64]));
        let y = t.layer_norm(xv, gamma, beta, 1e-5).unwrap();
        let d = t.value(y).data();
        let mean = d.iter().sum::<Scalar>() / 64.0;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / 64.0;
        assert!(mean.abs() < 1e-4);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full([1, 3, 3], 1.0));
        let mut w = Tensor::zeros([1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // center tap
        let wv = t.constant(w);
        let b = t.constant(Tensor::vector(&[0.0]));
        let y = t.conv2d(x, wv, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0; 9]);
    }

    #[test]
    fn conv2d_delta_imprints_kernel() {
        let mut t = Tape::new();
        let mut x = Tensor::zeros([1, 5, 5]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let xv = t.constant(x);
        let w = Tensor::from_fn([1, 1, 3, 3], |i| (i + 1) as Scalar);
        let wv = t.constant(w.clone());
        let b = t.constant(Tensor::vector(&[0.0]));
        let y = t.conv2d(xv, wv, b).unwrap();
        // kernel appears flipped around the delta: out[2+dy][2+dx] = w[1-dy][1-dx]
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let oy = (2 + dy) as usize;
                let ox = (2 + dx) as usize;
                let wy = (1 - dy) as usize;
                let wx = (1 - dx) as usize;
                assert_eq!(t.value(y).at3(0, oy, ox), w.data()[wy * 3 + wx]);
            }
        }
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = crate::tensor::tests_rng(11);
        let x = Tensor::from_fn([2, 5, 5], |_| rng.next());
        let w = Tensor::from_fn([3, 2, 3, 3], |_| rng.next());
        let b = Tensor::from_fn([3], |_| rng.next());
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv).unwrap();
        // direct six-loop evaluation
        for co in 0..3 {
            for oy in 0..5i32 {
                for ox in 0..5i32 {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3i32 {
                            for kx in 0..3i32 {
                                let (sy, sx) = (oy + ky - 1, ox + kx - 1);
                                if (0..5).contains(&sy) && (0..5).contains(&sx) {
                                    acc += w.data()
                                        [((co * 2 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                        * x.at3(ci, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    assert!(rel_err(acc, t.value(y).at3(co, oy as usize, ox as usize)) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn conv2d_channel_mismatch_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([2, 4, 4]));
        let w = t.constant(Tensor::zeros([1, 3, 3, 3]));
        let b = t.constant(Tensor::vector(&[0.0]));
        assert!(t.conv2d(x, w, b).is_err());
    }

    #[test]
    fn batch_norm_eval_identity() {
        let mut state = BatchNormState::new(2);
        state.initialized = true; // running mean 0, var 1
        let mut t = Tape::new();
        let x = Tensor::from_fn([2, 2, 2], |i| i as Scalar - 3.5);
        let xv = t.constant(x.clone());
        let gamma = t.constant(Tensor::vector(&[1.0, 1.0]));
        let beta = t.constant(Tensor::vector(&[0.0, 0.0]));
        let y = t.batch_norm(xv, gamma, beta, &mut state, false).unwrap();
        for (a, b) in t.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_eval_requires_initialized_state() {
        let mut state = BatchNormState::new(1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros([1, 2, 2]));
        let gamma = t.constant(Tensor::vector(&[1.0]));
        let beta = t.constant(Tensor::vector(&[0.0]));
        let err = t.batch_norm(x, gamma, beta, &mut state, false).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut rng = crate::tensor::tests_rng(5);
        let x = Tensor::from_fn([2, 4, 4], |_| rng.next() * 2.0 + 1.0);
        let mut state = BatchNormState::new(2);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let gamma = t.constant(Tensor::vector(&[1.0, 1.0]));
        let beta = t.constant(Tensor::vector(&[0.0, 0.0]));
        let y = t.batch_norm(xv, gamma, beta, &mut state, true).unwrap();
        let d = t.value(y).data();
        for c in 0..2 {
            let plane = &d[c * 16..(c + 1) * 16];
            let mean = plane.iter().sum::<Scalar>() / 16.0;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / 16.0;
            assert!(mean.abs() < 1e-3);
            assert!((var - 1.0).abs() < 1e-3);
        }
        assert!(state.initialized);
    }

    #[test]
    fn batch_norm_momentum_recursion() {
        // two train calls fold batch means into the running average as
        // r2 = 0.9 * (0.9 * 0 + 0.1 * m1) + 0.1 * m2
        let mut state = BatchNormState::new(1);
        let gamma_t = Tensor::vector(&[1.0]);
        let beta_t = Tensor::vector(&[0.0]);
        let mut means = Vec::new();
        for base in [2.0 as Scalar, 6.0] {
            let mut t = Tape::new();
            let x = t.constant(Tensor::from_fn([1, 2, 2], |i| base + i as Scalar));
            let gamma = t.constant(gamma_t.clone());
            let beta = t.constant(beta_t.clone());
            t.batch_norm(x, gamma, beta, &mut state, true).unwrap();
            means.push(base + 1.5);
        }
        let expect = 0.9 * (0.9 * 0.0 + 0.1 * means[0]) + 0.1 * means[1];
        assert!((state.running_mean[0] - expect).abs() < 1e-5);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::new();
        let x = Tensor::vector(&[1.0, -2.0, 3.0]);
        let xv = t.leaf(&x, true);
        let loss = t.sum(xv).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(xv).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_elementwise_square() {
        let mut t = Tape::new();
        let x = Tensor::vector(&[1.0, -2.0, 3.0]);
        let xv = t.leaf(&x, true);
        let sq = t.mul(xv, xv).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(xv).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        let x = Tensor::vector(&[0.5, 1.5]);
        let once = {
            let mut t = Tape::new();
            let xv = t.leaf(&x, true);
            let loss = t.sum(xv).unwrap();
            t.backward(loss).unwrap();
            t.grad(xv).unwrap()
        };
        let twice = {
            let mut t = Tape::new();
            let xv = t.leaf(&x, true);
            let y = t.add(xv, xv).unwrap();
            let loss = t.sum(y).unwrap();
            t.backward(loss).unwrap();
            t.grad(xv).unwrap()
        };
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let x = Tensor::vector(&[1.0, 2.0]);
        let xv = t.leaf(&x, true);
        assert!(t.backward(xv).is_err());
    }

    #[test]
    fn fd_check_quadratic() {
        let mut params = [Tensor::vector(&[1.5, -0.7, 2.2])];
        let err = finite_difference_check(&mut params, 1e-3, |t, vars| {
            let sq = t.mul(vars[0], vars[0])?;
            t.sum(sq)
        })
        .unwrap();
        // exact for quadratics up to rounding; rounding is precision-bound
        assert!(err < tol(1e-6, 1e-3), "fd err {err}");
    }

    #[test]
    fn fd_check_softmax_cross_entropy() {
        let mut params = [Tensor::vector(&[0.3, -1.2, 0.8, 0.1])];
        let h = tol(1e-3, 1e-2);
        let err = finite_difference_check(&mut params, h, |t, vars| {
            let p = t.softmax(vars[0], 0)?;
            let pc = t.clamp(p, 1e-6, 1.0)?;
            let lp = t.ln(pc)?;
            let target = t.constant(Tensor::vector(&[0.0, 0.0, 1.0, 0.0]));
            let picked = t.mul(lp, target)?;
            let s = t.sum(picked)?;
            t.neg(s)
        })
        .unwrap();
        assert!(err < 1e-3, "fd err {err}");
    }

    #[test]
    fn gather_scatter_round_trip_gradients() {
        let mut params = [Tensor::from_fn([4, 3], |i| (i as Scalar) * 0.3 - 1.0)];
        let h = tol(1e-3, 1e-2);
        let err = finite_difference_check(&mut params, h, |t, vars| {
            let picked = t.gather_rows(vars[0], &[2, 0])?;
            let spread = t.scatter_rows(picked, &[1, 3], 5)?;
            let sq = t.mul(spread, spread)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(err < tol(1e-9, 1e-3), "fd err {err}");
    }

    #[test]
    fn min_max_follow_winning_side() {
        let mut t = Tape::new();
        let a = Tensor::vector(&[1.0, 5.0]);
        let b = Tensor::vector(&[3.0, 2.0]);
        let av = t.leaf(&a, true);
        let bv = t.leaf(&b, true);
        let mn = t.min_elem(av, bv).unwrap();
        let loss = t.sum(mn).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(av).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(t.grad(bv).unwrap().data(), &[0.0, 1.0]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000) {
            let mut rng = crate::tensor::tests_rng(seed);
            let x = Tensor::from_fn([rows, cols], |_| rng.next() * 20.0);
            let mut t = Tape::new();
            let xv = t.constant(x);
            let y = t.softmax(xv, 1).unwrap();
            for r in 0..rows {
                let s: Scalar = (0..cols).map(|c| t.value(y).at2(r, c)).sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn matmul_matches_oracle_on_random_shapes(
            m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in 0u64..1000
        ) {
            let mut rng = crate::tensor::tests_rng(seed);
            let a = Tensor::from_fn([m, k], |_| rng.next());
            let b = Tensor::from_fn([k, n], |_| rng.next());
            let mut t = Tape::new();
            let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
            let y = t.matmul(av, bv).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a.at2(i, p) * b.at2(p, j);
                    }
                    proptest::prop_assert!(rel_err(acc, t.value(y).at2(i, j)) < 1e-5);
                }
            }
        }
    }
}
