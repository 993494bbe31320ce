use std::collections::BTreeSet;

use rand::seq::index::sample;
use serde::Serialize;
use serde_json::json;

use super::{csv_with_meta, stats, EvalError, QAccuracySummary};
use crate::critic::{critic_forward_batch, CriticParams};
use crate::mdp::{Environment, TransitionDataset};
use crate::oracle::{finite_horizon_return, greedy_policy_table, QTable};
use crate::retrieval::{RetrievalIndex, RetrievedContext, Strategy};
use crate::rng::{substream, streams};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QPair {
    pub state_index: Option<usize>,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub q_hat: f64,
    pub q_oracle: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QAccuracy {
    pub pairs: Vec<QPair>,
    pub spearman: f64,
    pub pearson: f64,
    pub mae: f64,
}

impl QAccuracy {
    pub fn from_pairs(pairs: Vec<QPair>) -> Result<Self, EvalError> {
        if pairs.is_empty() {
            return Err(EvalError::Invalid("q_accuracy needs a nonempty sample".into()));
        }
        let q: Vec<f64> = pairs.iter().map(|p| p.q_hat).collect();
        let o: Vec<f64> = pairs.iter().map(|p| p.q_oracle).collect();
        Ok(Self {
            spearman: stats::spearman(&q, &o),
            pearson: stats::pearson(&q, &o),
            mae: stats::mae(&q, &o),
            pairs,
        })
    }

    pub fn summary(&self) -> QAccuracySummary {
        QAccuracySummary {
            n: self.pairs.len(),
            spearman: self.spearman,
            pearson: self.pearson,
            mae: self.mae,
        }
    }

    /// `state_index,state,action,q_hat,q_oracle`; vectors are space-separated.
    pub fn pairs_csv(&self, extra: serde_json::Value) -> String {
        let meta = json!({
            "kind": "q_pairs",
            "n": self.pairs.len(),
            "spearman": self.spearman,
            "pearson": self.pearson,
            "mae": self.mae,
            "extra": extra,
        });
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let rows = self.pairs.iter().map(|p| {
            format!(
                "{},{},{},{},{}",
                p.state_index.map_or(String::new(), |s| s.to_string()),
                join(&p.state),
                join(&p.action),
                p.q_hat,
                p.q_oracle
            )
        });
        csv_with_meta(&meta, "state_index,state,action,q_hat,q_oracle", rows)
    }
}

/// Q̂(s, a | Ω) against oracle values for an aligned sample.
pub fn q_accuracy(
    critic: &CriticParams,
    dataset: &TransitionDataset,
    contexts: &[&RetrievedContext],
    oracle_q: &[f64],
    sample: &[(Vec<f64>, Vec<f64>)],
) -> Result<QAccuracy, EvalError> {
    if sample.is_empty() {
        return Err(EvalError::Invalid("q_accuracy needs a nonempty sample".into()));
    }
    if oracle_q.len() != sample.len() || contexts.len() != sample.len() {
        return Err(EvalError::Invalid(format!(
            "{} queries, {} contexts, {} oracle values",
            sample.len(),
            contexts.len(),
            oracle_q.len()
        )));
    }
    let mut q_hat = Vec::with_capacity(sample.len());
    for (ctx, qs) in contexts.chunks(256).zip(sample.chunks(256)) {
        q_hat.extend(critic_forward_batch(critic, dataset, ctx, qs)?);
    }
    let pairs = sample
        .iter()
        .zip(q_hat.into_iter().zip(oracle_q))
        .map(|((s, a), (q, &o))| QPair {
            state_index: None,
            state: s.clone(),
            action: a.clone(),
            q_hat: q,
            q_oracle: o,
        })
        .collect();
    QAccuracy::from_pairs(pairs)
}

/// Every action at each distinct non-terminal state seen in the dataset,
/// optionally subsampled to `limit` pairs.
pub fn tabular_sample(env: &Environment, dataset: &TransitionDataset, limit: Option<usize>, seed: u64) -> Result<Vec<(usize, usize)>, EvalError> {
    let m = env
        .tabular()
        .ok_or_else(|| EvalError::Invalid("tabular_sample needs a tabular env".into()))?;
    let states: BTreeSet<usize> = dataset
        .transitions
        .iter()
        .filter_map(|t| m.decode(&t.s))
        .filter(|&s| !m.terminal[s])
        .collect();
    let all: Vec<(usize, usize)> = states
        .into_iter()
        .flat_map(|s| (0..m.n_actions).map(move |a| (s, a)))
        .collect();
    Ok(match limit {
        Some(n) if n < all.len() => {
            let mut rng = substream(seed, streams::EVAL, 1);
            let mut idx = sample(&mut rng, all.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        }
        _ => all,
    })
}

/// Q accuracy against a DP table, retrieving Ω_s with `strategy` for each
/// sampled state.
pub fn q_accuracy_tabular(
    critic: &CriticParams,
    dataset: &TransitionDataset,
    index: &RetrievalIndex,
    strategy: Strategy,
    env: &Environment,
    oracle: &QTable,
    sample: &[(usize, usize)],
    seed: u64,
) -> Result<QAccuracy, EvalError> {
    let m = env
        .tabular()
        .ok_or_else(|| EvalError::Invalid("q_accuracy_tabular needs a tabular env".into()))?;
    let mut contexts = Vec::with_capacity(sample.len());
    for (i, &(s, _)) in sample.iter().enumerate() {
        let mut rng = substream(seed, streams::RETRIEVAL, i as u64);
        contexts.push(index.retrieve(strategy, &m.embed(s), critic.n_context, &mut rng)?);
    }
    let queries: Vec<(Vec<f64>, Vec<f64>)> = sample.iter().map(|&(s, a)| (m.embed(s), vec![a as f64])).collect();
    let oracle_q: Vec<f64> = sample.iter().map(|&(s, a)| oracle.q[s][a]).collect();
    let refs: Vec<&RetrievedContext> = contexts.iter().collect();
    let mut acc = q_accuracy(critic, dataset, &refs, &oracle_q, &queries)?;
    for (p, &(s, _)) in acc.pairs.iter_mut().zip(sample) {
        p.state_index = Some(s);
    }
    Ok(acc)
}

/// Exact finite-horizon return of the critic-greedy policy
/// s ↦ argmax_a Q̂(s, a | Ω_s), with Ω_s retrieved by `strategy`.
pub fn critic_greedy_return(
    critic: &CriticParams,
    dataset: &TransitionDataset,
    index: &RetrievalIndex,
    strategy: Strategy,
    env: &Environment,
    seed: u64,
) -> Result<f64, EvalError> {
    let m = env
        .tabular()
        .ok_or_else(|| EvalError::Invalid("critic_greedy_return needs a tabular env".into()))?;
    let mut actions = vec![0; m.n_states];
    let live: Vec<usize> = (0..m.n_states).filter(|&s| !m.terminal[s]).collect();
    for chunk in live.chunks(64) {
        let mut contexts = Vec::with_capacity(chunk.len());
        for &s in chunk {
            let mut rng = substream(seed, streams::RETRIEVAL, s as u64);
            contexts.push(index.retrieve(strategy, &m.embed(s), critic.n_context, &mut rng)?);
        }
        let refs: Vec<&RetrievedContext> = contexts
            .iter()
            .flat_map(|c| std::iter::repeat_n(c, m.n_actions))
            .collect();
        let queries: Vec<(Vec<f64>, Vec<f64>)> = chunk
            .iter()
            .flat_map(|&s| (0..m.n_actions).map(move |a| (m.embed(s), vec![a as f64])))
            .collect();
        let q = critic_forward_batch(critic, dataset, &refs, &queries)?;
        for (&s, qs) in chunk.iter().zip(q.chunks(m.n_actions)) {
            actions[s] = crate::train::argmax(qs);
        }
    }
    Ok(finite_horizon_return(m, &greedy_policy_table(&actions), env.horizon()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(q: &[f64], o: &[f64]) -> Vec<QPair> {
        q.iter()
            .zip(o)
            .map(|(&q, &o)| QPair {
                state_index: None,
                state: vec![],
                action: vec![],
                q_hat: q,
                q_oracle: o,
            })
            .collect()
    }

    #[test]
    fn identical_and_negated() {
        let o = [0.1, 0.5, -0.3, 2.0];
        let same = QAccuracy::from_pairs(pairs(&o, &o)).unwrap();
        assert_eq!(same.spearman, 1.0);
        assert_eq!(same.mae, 0.0);
        let neg: Vec<f64> = o.iter().map(|x| -x).collect();
        assert_eq!(QAccuracy::from_pairs(pairs(&neg, &o)).unwrap().spearman, -1.0);
        assert!(QAccuracy::from_pairs(vec![]).is_err());
    }
}
