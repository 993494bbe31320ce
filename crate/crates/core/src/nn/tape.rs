//! Reverse-mode differentiation over a Wengert list of matrix-valued nodes.
//!
//! Only the primitives used by the critic, the policies and the losses are
//! supported. Problem-specific kernels (the attention stack) plug in through
//! [`CustomOp`].

use std::fmt;

use super::{Matrix, NnError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A node whose backward rule is supplied by the caller.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (None when the input receives nothing).
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, out_grad: &Matrix)
        -> Vec<Option<Matrix>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Matrix),
    ConcatCols(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    Expectile(Var, f64),
    WeightedMean(Var, Vec<f64>),
    GaussianLogProb {
        mean: Var,
        log_std: Var,
        actions: Matrix,
    },
    CategoricalLogProb {
        logits: Var,
        actions: Vec<usize>,
        probs: Matrix,
    },
    Custom(Box<dyn CustomOp>, Vec<Var>),
    NonDifferentiable(&'static str, Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Layer-normalisation epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.len())
    }
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn acc(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Result<Var, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFinite(op_name(&op).to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `x + bias` with a 1 x cols bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let v = self.value(x).add_row_broadcast(self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        self.push(v, Op::AddRow(x, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Elementwise product with a 1 x cols row broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, NnError> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(NnError::Shape(format!(
                "mul_row {:?} by {:?}",
                xv.shape(),
                rv.shape()
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, s) in out.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *o *= s;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, NnError> {
        let v = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        let v = self.value(x).map(|z| z.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NnError> {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NnError> {
        let v = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NnError> {
        let v = self.value(x).map(|z| z * z);
        let rg = self.rg(x);
        self.push(v, Op::Square(x), rg)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NnError> {
        let v = self.value(x).map(|z| z.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(v, Op::Clamp(x, lo, hi), rg)
    }

    /// Row-wise layer normalisation with learnable gain and offset (1 x cols each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (self.value(gain), self.value(offset));
        if g.shape() != (1, cols) || b.shape() != (1, cols) {
            return Err(NnError::Shape(format!(
                "layer_norm gain {:?} offset {:?} for width {cols}",
                g.shape(),
                b.shape()
            )));
        }
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.as_slice()[c] + b.as_slice()[c]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(offset);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Multiplies by a fixed mask (already carrying the inverted-dropout scale).
    pub fn dropout(&mut self, x: Var, mask: Matrix) -> Result<Var, NnError> {
        let v = self.value(x).hadamard(&mask)?;
        let rg = self.rg(x);
        self.push(v, Op::Dropout(x, mask), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let v = self.value(a).concat_cols(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatCols(a, b), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, NnError> {
        let v = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(NnError::Shape("mean of empty matrix".into()));
        }
        let v = Matrix::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(v, Op::MeanAll(x), rg)
    }

    /// Mean expectile loss `ρ_τ(u) = |τ − 1{u<0}| u²` over all entries of `u`.
    pub fn expectile(&mut self, u: Var, tau: f64) -> Result<Var, NnError> {
        let uv = self.value(u);
        if uv.is_empty() {
            return Err(NnError::Shape("expectile of empty matrix".into()));
        }
        let total: f64 = uv.as_slice().iter().map(|&z| expectile_weight(z, tau) * z * z).sum();
        let v = Matrix::scalar(total / uv.len() as f64);
        let rg = self.rg(u);
        self.push(v, Op::Expectile(u, tau), rg)
    }

    /// `(1/n) Σ w_i x_i` with constant weights.
    pub fn weighted_mean(&mut self, x: Var, weights: Vec<f64>) -> Result<Var, NnError> {
        let xv = self.value(x);
        if xv.len() != weights.len() || weights.is_empty() {
            return Err(NnError::Shape(format!(
                "weighted_mean: {} values, {} weights",
                xv.len(),
                weights.len()
            )));
        }
        let s: f64 = xv.as_slice().iter().zip(&weights).map(|(a, w)| a * w).sum();
        let v = Matrix::scalar(s / weights.len() as f64);
        let rg = self.rg(x);
        self.push(v, Op::WeightedMean(x, weights), rg)
    }

    /// Per-row diagonal-Gaussian log density of `actions` (B x A) given
    /// means (B x A) and a shared log-std row (1 x A). Output is B x 1.
    pub fn gaussian_log_prob(
        &mut self,
        mean: Var,
        log_std: Var,
        actions: Matrix,
    ) -> Result<Var, NnError> {
        let (mv, lv) = (self.value(mean), self.value(log_std));
        if mv.shape() != actions.shape() || lv.shape() != (1, mv.cols()) {
            return Err(NnError::Shape(format!(
                "gaussian_log_prob mean {:?} log_std {:?} actions {:?}",
                mv.shape(),
                lv.shape(),
                actions.shape()
            )));
        }
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut out = Matrix::zeros(mv.rows(), 1);
        for r in 0..mv.rows() {
            let mut lp = 0.0;
            for c in 0..mv.cols() {
                let ls = lv.as_slice()[c];
                let z = (actions.get(r, c) - mv.get(r, c)) * (-ls).exp();
                lp += -0.5 * z * z - ls - half_log_2pi;
            }
            out.set(r, 0, lp);
        }
        let rg = self.rg(mean) || self.rg(log_std);
        self.push(
            out,
            Op::GaussianLogProb {
                mean,
                log_std,
                actions,
            },
            rg,
        )
    }

    /// Per-row `log softmax(logits)[action]`. Output is B x 1.
    pub fn categorical_log_prob(&mut self, logits: Var, actions: Vec<usize>) -> Result<Var, NnError> {
        let lv = self.value(logits);
        if lv.rows() != actions.len() || actions.iter().any(|&a| a >= lv.cols()) {
            return Err(NnError::Shape(format!(
                "categorical_log_prob logits {:?} with {} actions",
                lv.shape(),
                actions.len()
            )));
        }
        let probs = softmax_rows(lv);
        let mut out = Matrix::zeros(lv.rows(), 1);
        for (r, &a) in actions.iter().enumerate() {
            out.set(r, 0, log_softmax_entry(lv.row(r), a));
        }
        let rg = self.rg(logits);
        self.push(
            out,
            Op::CategoricalLogProb {
                logits,
                actions,
                probs,
            },
            rg,
        )
    }

    /// A node with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
        value: Matrix,
    ) -> Result<Var, NnError> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::Custom(op, inputs), rg)
    }

    /// A node computed from `inputs` that has no gradient rule (sampling,
    /// argmax). Differentiating through it is an error.
    pub fn non_differentiable(
        &mut self,
        name: &'static str,
        inputs: Vec<Var>,
        value: Matrix,
    ) -> Result<Var, NnError> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(value, Op::NonDifferentiable(name, inputs), rg)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(NnError::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        acc(&mut grads[a.0], ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        acc(&mut grads[b.0], gb);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.rg(*bias) {
                        acc(&mut grads[bias.0], g.sum_rows());
                    }
                    if self.rg(*x) {
                        acc(&mut grads[x.0], g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads[b.0], g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads[a.0], g.hadamard(self.value(*b))?);
                    }
                    if self.rg(*b) {
                        acc(&mut grads[b.0], g.hadamard(self.value(*a))?);
                    }
                }
                Op::MulRow(x, row) => {
                    let (xv, rv) = (self.value(*x), self.value(*row));
                    if self.rg(*row) {
                        acc(&mut grads[row.0], g.hadamard(xv)?.sum_rows());
                    }
                    if self.rg(*x) {
                        let mut gx = g.clone();
                        for r in 0..gx.rows() {
                            for (o, s) in gx.row_mut(r).iter_mut().zip(rv.as_slice()) {
                                *o *= s;
                            }
                        }
                        acc(&mut grads[x.0], gx);
                    }
                }
                Op::Scale(x, s) => {
                    acc(&mut grads[x.0], g.scale(*s));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gi, &xi) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    for (gi, &y) in gx.as_mut_slice().iter_mut().zip(out.as_slice()) {
                        *gi *= 1.0 - y * y;
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::Exp(x) => {
                    acc(&mut grads[x.0], g.hadamard(out)?);
                }
                Op::Square(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gi, &xi) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        *gi *= 2.0 * xi;
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gi, &xi) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        if xi < *lo || xi > *hi {
                            *gi = 0.0;
                        }
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    offset,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    if self.rg(*offset) {
                        acc(&mut grads[offset.0], g.sum_rows());
                    }
                    if self.rg(*gain) {
                        acc(&mut grads[gain.0], g.hadamard(xhat)?.sum_rows());
                    }
                    if self.rg(*x) {
                        let (rows, cols) = g.shape();
                        let n = cols as f64;
                        let mut gx = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            let gr = g.row(r);
                            let hr = xhat.row(r);
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for c in 0..cols {
                                let d = gr[c] * gv.as_slice()[c];
                                mean_d += d;
                                mean_dh += d * hr[c];
                            }
                            mean_d /= n;
                            mean_dh /= n;
                            let out_row = gx.row_mut(r);
                            for c in 0..cols {
                                let d = gr[c] * gv.as_slice()[c];
                                out_row[c] = inv_std[r] * (d - mean_d - hr[c] * mean_dh);
                            }
                        }
                        acc(&mut grads[x.0], gx);
                    }
                }
                Op::Dropout(x, mask) => {
                    acc(&mut grads[x.0], g.hadamard(mask)?);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let rows = g.rows();
                    if self.rg(*a) {
                        let mut ga = Matrix::zeros(rows, ca);
                        for r in 0..rows {
                            ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        }
                        acc(&mut grads[a.0], ga);
                    }
                    if self.rg(*b) {
                        let mut gb = Matrix::zeros(rows, cb);
                        for r in 0..rows {
                            gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                        }
                        acc(&mut grads[b.0], gb);
                    }
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    acc(&mut grads[x.0], Matrix::filled(xv.rows(), xv.cols(), g.item()));
                }
                Op::MeanAll(x) => {
                    let xv = self.value(*x);
                    let s = g.item() / xv.len() as f64;
                    acc(&mut grads[x.0], Matrix::filled(xv.rows(), xv.cols(), s));
                }
                Op::Expectile(u, tau) => {
                    let uv = self.value(*u);
                    let s = g.item() / uv.len() as f64;
                    let gu = uv.map(|z| s * 2.0 * expectile_weight(z, *tau) * z);
                    acc(&mut grads[u.0], gu);
                }
                Op::WeightedMean(x, w) => {
                    let xv = self.value(*x);
                    let s = g.item() / w.len() as f64;
                    let gx = Matrix::from_vec(
                        xv.rows(),
                        xv.cols(),
                        w.iter().map(|wi| wi * s).collect(),
                    )?;
                    acc(&mut grads[x.0], gx);
                }
                Op::GaussianLogProb {
                    mean,
                    log_std,
                    actions,
                } => {
                    let (mv, lv) = (self.value(*mean), self.value(*log_std));
                    let (rows, cols) = mv.shape();
                    let mut gm = Matrix::zeros(rows, cols);
                    let mut gl = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        let gr = g.get(r, 0);
                        for c in 0..cols {
                            let inv_var = (-2.0 * lv.as_slice()[c]).exp();
                            let diff = actions.get(r, c) - mv.get(r, c);
                            gm.set(r, c, gr * diff * inv_var);
                            gl.as_mut_slice()[c] += gr * (diff * diff * inv_var - 1.0);
                        }
                    }
                    if self.rg(*mean) {
                        acc(&mut grads[mean.0], gm);
                    }
                    if self.rg(*log_std) {
                        acc(&mut grads[log_std.0], gl);
                    }
                }
                Op::CategoricalLogProb {
                    logits,
                    actions,
                    probs,
                } => {
                    let mut gl = probs.scale(-1.0);
                    for (r, &a) in actions.iter().enumerate() {
                        let gr = g.get(r, 0);
                        for v in gl.row_mut(r) {
                            *v *= gr;
                        }
                        let cur = gl.get(r, a);
                        gl.set(r, a, cur + gr);
                    }
                    acc(&mut grads[logits.0], gl);
                }
                Op::Custom(op, inputs) => {
                    let vals: Vec<&Matrix> = inputs.iter().map(|&v| self.value(v)).collect();
                    let gs = op.backward(&vals, out, &g);
                    for (v, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            if self.rg(*v) {
                                acc(&mut grads[v.0], gi);
                            }
                        }
                    }
                }
                Op::NonDifferentiable(name, inputs) => {
                    if g.max_abs() > 0.0 && inputs.iter().any(|&v| self.rg(v)) {
                        return Err(NnError::Unsupported(name));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::AddRow(..) => "add_row",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::Exp(..) => "exp",
        Op::Square(..) => "square",
        Op::Clamp(..) => "clamp",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Dropout(..) => "dropout",
        Op::ConcatCols(..) => "concat_cols",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
        Op::Expectile(..) => "expectile",
        Op::WeightedMean(..) => "weighted_mean",
        Op::GaussianLogProb { .. } => "gaussian_log_prob",
        Op::CategoricalLogProb { .. } => "categorical_log_prob",
        Op::Custom(op, _) => op.name(),
        Op::NonDifferentiable(name, _) => name,
    }
}

/// `|τ − 1{u<0}|`.
#[inline]
pub fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub fn log_softmax_entry(row: &[f64], a: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[a] - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let w = t.param(Matrix::row_vector(&[1.0, 2.0]));
        let sq = t.square(w).unwrap();
        let loss = t.sum_all(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut t = Tape::new();
        let w = t.param(Matrix::row_vector(&[1.0, 2.0]));
        let c = t.constant(Matrix::scalar(3.0));
        let zero = t.scale(w, 0.0).unwrap();
        let s = t.sum_all(zero).unwrap();
        let loss = t.add(s, c).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.param(Matrix::row_vector(&[1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(NnError::Shape(_))));
    }

    #[test]
    fn gradient_through_non_differentiable_node_is_an_error() {
        let mut t = Tape::new();
        let w = t.param(Matrix::row_vector(&[1.0, 2.0]));
        let v = t.value(w).clone();
        let a = t.non_differentiable("argmax", vec![w], v).unwrap();
        let loss = t.sum_all(a).unwrap();
        assert!(matches!(t.backward(loss), Err(NnError::Unsupported("argmax"))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut t = Tape::new();
        let w = t.param(Matrix::row_vector(&[800.0]));
        assert!(matches!(t.exp(w), Err(NnError::NonFinite(_))));
    }
}
