//! Local least-squares probe of how pointwise Q error scales with the
//! number of retrieved transitions.
//!
//! Features are fixed and local-linear: φ(s, a) = e_a ⊗ (1, x, y), with
//! (x, y) the planar coordinates of the state. For each query state the
//! weight ŵ_k is fitted on the k retrieved transitions against Q*, and the
//! reference w* on every action of the `reference_states` nearest states.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::Serialize;
use serde_json::json;

use super::{csv_with_meta, stats, EvalError};
use crate::mdp::{Environment, TabularModel, TransitionDataset};
use crate::oracle::{value_iteration, VI_MAX_ITERS, VI_TOL};
use crate::retrieval::{coverage_ratio, Metric, RetrievalIndex};
use crate::rng::{substream, streams};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub k_values: Vec<usize>,
    pub n_queries: usize,
    /// Transitions whose state lies within this ℓ₂ distance of the query
    /// form the ideal set for coverage.
    pub ideal_radius: f64,
    pub reference_states: usize,
    pub ridge: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k_values: vec![4, 8, 16, 32],
            n_queries: 100,
            ideal_radius: 0.0,
            reference_states: 8,
            ridge: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub seed: u64,
    pub k: usize,
    pub n_queries: usize,
    pub coverage_mean: f64,
    pub weight_error_median: f64,
    pub pointwise_median: f64,
    pub pointwise_mean: f64,
    /// Fits that hit a singular Gram matrix and used the ridge solve.
    pub ridge_fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSummary {
    pub config: ProbeConfig,
    pub rows: Vec<ProbeRow>,
}

impl ProbeSummary {
    pub fn row(&self, seed: u64, k: usize) -> Option<&ProbeRow> {
        self.rows.iter().find(|r| r.seed == seed && r.k == k)
    }

    /// Whether the median error at `k_large` is at most the one at `k_small`.
    pub fn trend_holds(&self, seed: u64, k_small: usize, k_large: usize) -> Option<bool> {
        Some(self.row(seed, k_large)?.pointwise_median <= self.row(seed, k_small)?.pointwise_median)
    }

    pub fn csv(&self) -> String {
        let rows = self.rows.iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{},{}",
                r.seed,
                r.k,
                r.n_queries,
                r.coverage_mean,
                r.weight_error_median,
                r.pointwise_median,
                r.pointwise_mean,
                r.ridge_fallbacks
            )
        });
        csv_with_meta(
            &json!({"kind": "bound_trend_probe", "config": self.config}),
            "seed,k,n_queries,coverage_mean,weight_error_median,pointwise_median,pointwise_mean,ridge_fallbacks",
            rows,
        )
    }
}

fn features(m: &TabularModel, s: usize, a: usize) -> Vec<f64> {
    let mut f = vec![0.0; 3 * m.n_actions];
    let [x, y] = m.coords[s];
    f[3 * a] = 1.0;
    f[3 * a + 1] = x;
    f[3 * a + 2] = y;
    f
}

/// Least squares; falls back to (ΦᵀΦ + λI) when ΦᵀΦ is singular.
fn fit(rows: &[Vec<f64>], targets: &[f64], ridge: f64) -> (DVector<f64>, bool) {
    let d = rows[0].len();
    let phi = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    let y = DVector::from_column_slice(targets);
    let gram = phi.transpose() * &phi;
    let rhs = phi.transpose() * y;
    let scale = (0..d).map(|i| gram[(i, i)]).fold(0.0, f64::max).max(1e-300);
    if let Some(ch) = gram.clone().cholesky() {
        let l = ch.l();
        let min_pivot = (0..d).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
        if min_pivot > 1e-10 * scale {
            return (ch.solve(&rhs), false);
        }
    }
    let reg = gram + DMatrix::identity(d, d) * ridge;
    let w = reg.cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| DVector::zeros(d));
    (w, true)
}

/// Runs the probe for each `(seed, dataset)` on a tabular env.
pub fn bound_trend_probe(env: &Environment, datasets: &[(u64, &TransitionDataset)], cfg: &ProbeConfig) -> Result<ProbeSummary, EvalError> {
    let m = env
        .tabular()
        .ok_or_else(|| EvalError::Invalid("the bound probe needs a tabular env with a DP oracle".into()))?;
    if cfg.k_values.is_empty() || cfg.n_queries == 0 {
        return Err(EvalError::Invalid("k_values and n_queries must be nonempty".into()));
    }
    let q = value_iteration(m, VI_TOL, VI_MAX_ITERS)?;
    let live: Vec<usize> = (0..m.n_states).filter(|&s| !m.terminal[s]).collect();
    let mut rows = Vec::new();
    for &(seed, dataset) in datasets {
        let index = RetrievalIndex::build(dataset, Metric::L2);
        let decoded: Vec<Option<usize>> = dataset.transitions.iter().map(|t| m.decode(&t.s)).collect();
        let mut seen: Vec<usize> = decoded.iter().flatten().copied().filter(|&s| !m.terminal[s]).collect();
        seen.sort_unstable();
        seen.dedup();
        if seen.is_empty() {
            return Err(EvalError::Invalid(format!("dataset for seed {seed} visits no non-terminal state")));
        }
        let mut rng = substream(seed, streams::EVAL, 2);
        let n_q = cfg.n_queries.min(seen.len());
        let mut picks = sample(&mut rng, seen.len(), n_q).into_vec();
        picks.sort_unstable();
        let queries: Vec<usize> = picks.into_iter().map(|i| seen[i]).collect();

        for &k in &cfg.k_values {
            let k = k.min(index.len());
            let mut coverage = Vec::new();
            let mut weight_err = Vec::new();
            let mut pointwise = Vec::new();
            let mut fallbacks = 0;
            for &s in &queries {
                let qs = m.embed(s);
                let ctx = index.retrieve_state_similar(&qs, k)?;
                let ideal: HashSet<usize> = (0..dataset.len())
                    .filter(|&i| {
                        let t = &dataset.transitions[i];
                        (t.a_next.is_some() || t.terminal) && crate::oracle::oracle_distance(&t.s, &qs, Metric::L2) <= cfg.ideal_radius
                    })
                    .collect();
                coverage.push(coverage_ratio(&ctx, &ideal)?);

                let mut phi = Vec::with_capacity(k);
                let mut y = Vec::with_capacity(k);
                for &ti in &ctx.transitions {
                    let si = decoded[ti].expect("dataset states come from this env");
                    let a = dataset.transitions[ti].a[0] as usize;
                    phi.push(features(m, si, a));
                    y.push(q.q[si][a]);
                }
                let (w_hat, fell_back) = fit(&phi, &y, cfg.ridge);
                fallbacks += usize::from(fell_back);

                let mut near: Vec<(f64, usize)> = live
                    .iter()
                    .map(|&o| (crate::oracle::oracle_distance(&m.embed(o), &qs, Metric::L2), o))
                    .collect();
                near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut ref_phi = Vec::new();
                let mut ref_y = Vec::new();
                for &(_, o) in near.iter().take(cfg.reference_states) {
                    for a in 0..m.n_actions {
                        ref_phi.push(features(m, o, a));
                        ref_y.push(q.q[o][a]);
                    }
                }
                let (w_star, _) = fit(&ref_phi, &ref_y, cfg.ridge);
                weight_err.push((&w_hat - &w_star).norm());

                for a in 0..m.n_actions {
                    let f = DVector::from_vec(features(m, s, a));
                    pointwise.push((f.dot(&w_hat) - q.q[s][a]).abs());
                }
            }
            rows.push(ProbeRow {
                seed,
                k,
                n_queries: queries.len(),
                coverage_mean: stats::mean(&coverage),
                weight_error_median: stats::median(&weight_err),
                pointwise_median: stats::median(&pointwise),
                pointwise_mean: stats::mean(&pointwise),
                ridge_fallbacks: fallbacks,
            });
        }
    }
    Ok(ProbeSummary { config: cfg.clone(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_and_ridge_flag() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let (w, fb) = fit(&rows, &[2.0, 3.0, 5.0], 1e-6);
        assert!(!fb);
        assert!((w[0] - 2.0).abs() < 1e-12 && (w[1] - 3.0).abs() < 1e-12);
        let (_, fb) = fit(&[vec![1.0, 1.0], vec![2.0, 2.0]], &[1.0, 2.0], 1e-6);
        assert!(fb);
    }
}
