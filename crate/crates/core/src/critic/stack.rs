//! Structured evaluation of the linear-attention stack.
//!
//! With G built from C as in the literal layer, the entry z_jᵀ G z_k equals
//! (C v_j)ᵀ(ξ_k − v_k), where v is the φ block and ξ the scaled φ' block of a
//! column. Only the bottom row of Z ever changes, so a layer reduces to
//!
//!   s = Σ_{j<N} y_j v_j,   u = C s / N,   y_k += uᵀ(ξ_k − v_k)
//!
//! on the reward row y (ξ = 0 for the query column). This is O(N·d + d²) per
//! layer instead of O(N²·d), and queries sharing a context share every u.
//!
//! [`StackOp`] exposes the kernel to the tape with a hand-written backward
//! pass so that gradients reach both the C matrices and the feature rows.

use super::CriticError;
use crate::nn::{CustomOp, Matrix};

/// A feature row in one of the input blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RowRef {
    pub block: usize,
    pub row: usize,
}

impl RowRef {
    pub fn new(block: usize, row: usize) -> Self {
        Self { block, row }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextSpec {
    pub phi: Vec<RowRef>,
    /// None for terminal transitions (φ' = 0).
    pub phi_next: Vec<Option<RowRef>>,
    /// Effective rewards r'.
    pub r_eff: Vec<f64>,
}

impl ContextSpec {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

/// How the scalar estimate is read from the final bottom-right cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Readout {
    /// Q̂ = −Z_L[2d, N].
    #[default]
    Negated,
    /// The cell itself, without negation.
    Raw,
}

impl Readout {
    fn sign(self) -> f64 {
        match self {
            Readout::Negated => 1.0,
            Readout::Raw => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackPlan {
    pub contexts: Vec<ContextSpec>,
    /// (context index, query feature row) per output entry.
    pub queries: Vec<(usize, RowRef)>,
    /// Multiplier applied to φ' rows to form ξ (γ·β_rtg).
    pub xi_scale: f64,
    pub readout: Readout,
}

/// Forward quantities kept for the backward pass.
#[derive(Clone, Debug, Default)]
struct ContextTrace {
    /// y at the input of every layer, L×N row-major.
    ys: Vec<f64>,
    /// s_ℓ, L×d.
    s: Vec<f64>,
    /// u_ℓ, L×d.
    u: Vec<f64>,
}

/// Result of a structured forward pass.
#[derive(Clone, Debug)]
pub struct StackOutput {
    /// One estimate per query.
    pub q: Vec<f64>,
    /// The final weight vector w_L = Σ_ℓ u_ℓ of every context.
    pub weights: Vec<Vec<f64>>,
    traces: Vec<ContextTrace>,
}

fn check_plan(blocks: &[&Matrix], cs: &[&Matrix], plan: &StackPlan) -> Result<usize, CriticError> {
    if cs.is_empty() {
        return Err(CriticError::Invalid("the stack needs at least one layer".into()));
    }
    let d = cs[0].rows();
    for (l, c) in cs.iter().enumerate() {
        if c.shape() != (d, d) {
            return Err(CriticError::Shape(format!("C_{l} is {:?}, expected {d}x{d}", c.shape())));
        }
    }
    for (b, m) in blocks.iter().enumerate() {
        if m.cols() != d {
            return Err(CriticError::Shape(format!("feature block {b} has {} columns, expected {d}", m.cols())));
        }
    }
    let valid = |r: &RowRef| r.block < blocks.len() && r.row < blocks[r.block].rows();
    for (i, ctx) in plan.contexts.iter().enumerate() {
        if ctx.is_empty() {
            return Err(CriticError::EmptyContext);
        }
        if ctx.phi_next.len() != ctx.len() || ctx.r_eff.len() != ctx.len() {
            return Err(CriticError::Shape(format!("context {i} has ragged columns")));
        }
        if !ctx.phi.iter().all(valid) || !ctx.phi_next.iter().flatten().all(valid) {
            return Err(CriticError::Shape(format!("context {i} references a missing feature row")));
        }
    }
    for &(c, ref r) in &plan.queries {
        if c >= plan.contexts.len() || !valid(r) {
            return Err(CriticError::Shape(format!("query refers to context {c} or row {r:?} out of range")));
        }
    }
    Ok(d)
}

fn row<'a>(blocks: &[&'a Matrix], r: RowRef) -> &'a [f64] {
    blocks[r.block].row(r.row)
}

fn forward_context(
    blocks: &[&Matrix],
    cs: &[&Matrix],
    ctx: &ContextSpec,
    xi_scale: f64,
    d: usize,
) -> ContextTrace {
    let n = ctx.len();
    let layers = cs.len();
    let inv_n = 1.0 / n as f64;
    let mut y = ctx.r_eff.clone();
    let mut tr = ContextTrace {
        ys: Vec::with_capacity(layers * n),
        s: vec![0.0; layers * d],
        u: vec![0.0; layers * d],
    };
    for (l, c) in cs.iter().enumerate() {
        tr.ys.extend_from_slice(&y);
        let s = &mut tr.s[l * d..(l + 1) * d];
        for (j, &yj) in y.iter().enumerate() {
            if yj != 0.0 {
                for (si, vi) in s.iter_mut().zip(row(blocks, ctx.phi[j])) {
                    *si += yj * vi;
                }
            }
        }
        let u = &mut tr.u[l * d..(l + 1) * d];
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = inv_n * c.row(i).iter().zip(s.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        for j in 0..n {
            let v = row(blocks, ctx.phi[j]);
            let mut delta = -u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            if let Some(nr) = ctx.phi_next[j] {
                let xn = row(blocks, nr);
                delta += xi_scale * u.iter().zip(xn).map(|(a, b)| a * b).sum::<f64>();
            }
            y[j] += delta;
        }
    }
    tr
}

/// Runs every context through the stack and reads out each query.
pub fn stack_forward(blocks: &[&Matrix], cs: &[&Matrix], plan: &StackPlan) -> Result<StackOutput, CriticError> {
    let d = check_plan(blocks, cs, plan)?;
    let traces: Vec<ContextTrace> = plan
        .contexts
        .iter()
        .map(|ctx| forward_context(blocks, cs, ctx, plan.xi_scale, d))
        .collect();
    let layers = cs.len();
    let weights: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| {
            let mut w = vec![0.0; d];
            for l in 0..layers {
                for (wi, ui) in w.iter_mut().zip(&t.u[l * d..(l + 1) * d]) {
                    *wi += ui;
                }
            }
            w
        })
        .collect();
    // The query column starts at zero and loses uᵀv_q per layer.
    let q = plan
        .queries
        .iter()
        .map(|&(c, r)| {
            let v = row(blocks, r);
            let mut y = 0.0;
            for l in 0..layers {
                let u = &traces[c].u[l * d..(l + 1) * d];
                y -= u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            }
            -plan.readout.sign() * y
        })
        .collect();
    Ok(StackOutput { q, weights, traces })
}

/// Tape node for [`stack_forward`]. Inputs are the feature blocks followed by
/// the C matrices; the output is a column of estimates, one per query.
pub struct StackOp {
    plan: StackPlan,
    n_blocks: usize,
    traces: Vec<ContextTrace>,
    by_context: Vec<Vec<usize>>,
}

impl StackOp {
    /// Evaluates the stack and returns the op together with its output.
    pub fn forward(blocks: &[&Matrix], cs: &[&Matrix], plan: StackPlan) -> Result<(Self, Matrix), CriticError> {
        let out = stack_forward(blocks, cs, &plan)?;
        let mut by_context = vec![Vec::new(); plan.contexts.len()];
        for (qi, &(c, _)) in plan.queries.iter().enumerate() {
            by_context[c].push(qi);
        }
        let value = Matrix::column_vector(&out.q);
        Ok((
            Self {
                plan,
                n_blocks: blocks.len(),
                traces: out.traces,
                by_context,
            },
            value,
        ))
    }
}

impl CustomOp for StackOp {
    fn name(&self) -> &'static str {
        "linattn_stack"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, out_grad: &Matrix) -> Vec<Option<Matrix>> {
        let (blocks, cs) = inputs.split_at(self.n_blocks);
        let layers = cs.len();
        let d = cs[0].rows();
        let sign = self.plan.readout.sign();
        let xi_scale = self.plan.xi_scale;
        let mut dblocks: Vec<Matrix> = blocks.iter().map(|b| Matrix::zeros(b.rows(), b.cols())).collect();
        let mut dcs: Vec<Matrix> = vec![Matrix::zeros(d, d); layers];
        let add_row = |dblocks: &mut [Matrix], r: RowRef, alpha: f64, x: &[f64]| {
            for (o, xi) in dblocks[r.block].row_mut(r.row).iter_mut().zip(x) {
                *o += alpha * xi;
            }
        };

        let mut gq = vec![0.0; d];
        let mut du = vec![0.0; d];
        let mut ds = vec![0.0; d];
        for (ci, ctx) in self.plan.contexts.iter().enumerate() {
            let qs = &self.by_context[ci];
            if qs.iter().all(|&q| out_grad.get(q, 0) == 0.0) {
                continue;
            }
            let tr = &self.traces[ci];
            let n = ctx.len();
            let inv_n = 1.0 / n as f64;

            // Σ_q g_q v_q, and the direct query-row gradients g_q Σ_ℓ u_ℓ.
            gq.iter_mut().for_each(|x| *x = 0.0);
            let mut w = vec![0.0; d];
            for l in 0..layers {
                for (wi, ui) in w.iter_mut().zip(&tr.u[l * d..(l + 1) * d]) {
                    *wi += ui;
                }
            }
            for &q in qs {
                let g = sign * out_grad.get(q, 0);
                if g == 0.0 {
                    continue;
                }
                let r = self.plan.queries[q].1;
                for (a, b) in gq.iter_mut().zip(blocks[r.block].row(r.row)) {
                    *a += g * b;
                }
                add_row(&mut dblocks, r, g, &w);
            }

            // ȳ of the layer output, walked backwards.
            let mut ybar = vec![0.0; n];
            for l in (0..layers).rev() {
                let u = &tr.u[l * d..(l + 1) * d];
                let s = &tr.s[l * d..(l + 1) * d];
                let y_in = &tr.ys[l * n..(l + 1) * n];
                du.copy_from_slice(&gq);
                for j in 0..n {
                    let yb = ybar[j];
                    if yb == 0.0 {
                        continue;
                    }
                    let v = blocks[ctx.phi[j].block].row(ctx.phi[j].row);
                    for (a, b) in du.iter_mut().zip(v) {
                        *a -= yb * b;
                    }
                    add_row(&mut dblocks, ctx.phi[j], -yb, u);
                    if let Some(nr) = ctx.phi_next[j] {
                        let xn = blocks[nr.block].row(nr.row);
                        for (a, b) in du.iter_mut().zip(xn) {
                            *a += yb * xi_scale * b;
                        }
                        add_row(&mut dblocks, nr, yb * xi_scale, u);
                    }
                }
                let dc = &mut dcs[l];
                for i in 0..d {
                    let a = inv_n * du[i];
                    if a != 0.0 {
                        for (o, sk) in dc.row_mut(i).iter_mut().zip(s) {
                            *o += a * sk;
                        }
                    }
                }
                let c = cs[l];
                ds.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..d {
                    let a = inv_n * du[i];
                    if a != 0.0 {
                        for (o, cik) in ds.iter_mut().zip(c.row(i)) {
                            *o += a * cik;
                        }
                    }
                }
                for j in 0..n {
                    let v = blocks[ctx.phi[j].block].row(ctx.phi[j].row);
                    ybar[j] += ds.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
                    add_row(&mut dblocks, ctx.phi[j], y_in[j], &ds);
                }
            }
        }
        dblocks.into_iter().chain(dcs).map(Some).collect()
    }
}
