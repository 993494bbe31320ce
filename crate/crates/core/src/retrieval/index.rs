use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;

use super::{Metric, RetrievalError, Strategy};
use crate::mdp::TransitionDataset;

#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    dim: usize,
    states: Vec<f64>,
    norms: Vec<f64>,
    rewards: Vec<f64>,
    /// Dataset transition index of each row.
    back_refs: Vec<usize>,
    metric: Metric,
}

/// A retrieved context. `rows` are index rows in rank order; `transitions`
/// are the corresponding dataset indices.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedContext {
    pub rows: Vec<usize>,
    pub transitions: Vec<usize>,
    /// Metric distance of each retrieved row to the query (ℓ₂ is unsquared).
    pub distances: Vec<f64>,
    pub query: Vec<f64>,
    /// Largest retrieved distance.
    pub d_min: f64,
    pub strategy: Strategy,
}

impl RetrievedContext {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl RetrievalIndex {
    /// Indexes every transition that has a successor action or ends the
    /// episode; truncated final transitions lack a' and are left out.
    pub fn build(dataset: &TransitionDataset, metric: Metric) -> Self {
        let keep: Vec<usize> = dataset
            .transitions
            .iter()
            .enumerate()
            .filter(|(_, t)| t.a_next.is_some() || t.terminal)
            .map(|(i, _)| i)
            .collect();
        let states = keep.iter().map(|&i| dataset.transitions[i].s.clone()).collect();
        let rewards = keep.iter().map(|&i| dataset.transitions[i].r).collect();
        Self::from_parts(states, rewards, keep, metric)
    }

    /// Index over raw states; row i refers back to transition i.
    pub fn from_states(states: Vec<Vec<f64>>, rewards: Vec<f64>, metric: Metric) -> Self {
        let refs = (0..states.len()).collect();
        Self::from_parts(states, rewards, refs, metric)
    }

    fn from_parts(states: Vec<Vec<f64>>, rewards: Vec<f64>, back_refs: Vec<usize>, metric: Metric) -> Self {
        assert_eq!(states.len(), rewards.len());
        let dim = states.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(states.len() * dim);
        let mut norms = Vec::with_capacity(states.len());
        for s in &states {
            assert_eq!(s.len(), dim, "ragged state matrix");
            flat.extend_from_slice(s);
            norms.push(s.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        Self {
            dim,
            states: flat,
            norms,
            rewards,
            back_refs,
            metric,
        }
    }

    pub fn len(&self) -> usize {
        self.back_refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.back_refs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn state(&self, row: usize) -> &[f64] {
        &self.states[row * self.dim..(row + 1) * self.dim]
    }

    pub fn reward(&self, row: usize) -> f64 {
        self.rewards[row]
    }

    pub fn transition_of(&self, row: usize) -> usize {
        self.back_refs[row]
    }

    /// Ranking key: squared distance for ℓ₂, 1 − cos for cosine.
    fn key(&self, query: &[f64], qnorm: f64, row: usize) -> f64 {
        let x = self.state(row);
        match self.metric {
            Metric::L2 => {
                let mut s = 0.0;
                for (a, b) in query.iter().zip(x) {
                    let d = a - b;
                    s += d * d;
                }
                s
            }
            Metric::Cosine => {
                let n = self.norms[row];
                if qnorm == 0.0 || n == 0.0 {
                    1.0
                } else {
                    let dot: f64 = query.iter().zip(x).map(|(a, b)| a * b).sum();
                    1.0 - dot / (qnorm * n)
                }
            }
        }
    }

    fn reported(&self, key: f64) -> f64 {
        match self.metric {
            Metric::L2 => key.sqrt(),
            Metric::Cosine => key,
        }
    }

    fn check_k(&self, k: usize) -> Result<(), RetrievalError> {
        if k == 0 || k > self.len() {
            Err(RetrievalError::BadK { k, size: self.len() })
        } else {
            Ok(())
        }
    }

    fn check_query(&self, q: &[f64]) -> Result<(), RetrievalError> {
        if q.len() != self.dim {
            Err(RetrievalError::Dim {
                got: q.len(),
                want: self.dim,
            })
        } else {
            Ok(())
        }
    }

    /// The k nearest rows as (key, row), sorted by (key, row).
    fn nearest(&self, query: &[f64], k: usize) -> Vec<(f64, usize)> {
        let qnorm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut all: Vec<(f64, usize)> = (0..self.len()).map(|i| (self.key(query, qnorm, i), i)).collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < all.len() {
            all.select_nth_unstable_by(k - 1, cmp);
            all.truncate(k);
        }
        all.sort_unstable_by(cmp);
        all
    }

    fn context(&self, query: &[f64], picked: Vec<(f64, usize)>, strategy: Strategy) -> RetrievedContext {
        let distances: Vec<f64> = picked.iter().map(|&(key, _)| self.reported(key)).collect();
        let rows: Vec<usize> = picked.iter().map(|&(_, r)| r).collect();
        RetrievedContext {
            transitions: rows.iter().map(|&r| self.back_refs[r]).collect(),
            d_min: distances.iter().copied().fold(0.0, f64::max),
            rows,
            distances,
            query: query.to_vec(),
            strategy,
        }
    }

    pub fn retrieve_state_similar(&self, query: &[f64], k: usize) -> Result<RetrievedContext, RetrievalError> {
        self.check_k(k)?;
        self.check_query(query)?;
        let picked = self.nearest(query, k);
        Ok(self.context(query, picked, Strategy::StateSimilar))
    }

    /// k rows uniformly without replacement; distances are still reported
    /// relative to `query`.
    pub fn retrieve_random<R: Rng + ?Sized>(
        &self,
        query: &[f64],
        k: usize,
        rng: &mut R,
    ) -> Result<RetrievedContext, RetrievalError> {
        self.check_k(k)?;
        self.check_query(query)?;
        let qnorm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let picked = sample(rng, self.len(), k)
            .into_iter()
            .map(|r| (self.key(query, qnorm, r), r))
            .collect();
        Ok(self.context(query, picked, Strategy::Random))
    }

    pub fn retrieve_high_reward(
        &self,
        query: &[f64],
        k: usize,
        k_pool: usize,
    ) -> Result<RetrievedContext, RetrievalError> {
        self.check_k(k)?;
        self.check_query(query)?;
        if k_pool < k || k_pool > self.len() {
            return Err(RetrievalError::BadPool {
                k,
                k_pool,
                size: self.len(),
            });
        }
        let mut pool: Vec<(usize, (f64, usize))> = self.nearest(query, k_pool).into_iter().enumerate().collect();
        // Highest reward first; equal rewards keep their distance rank.
        pool.sort_by(|a, b| {
            self.rewards[b.1 .1]
                .partial_cmp(&self.rewards[a.1 .1])
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        pool.truncate(k);
        pool.sort_by_key(|p| p.0);
        let picked = pool.into_iter().map(|(_, p)| p).collect();
        Ok(self.context(query, picked, Strategy::HighReward { pool: k_pool }))
    }

    pub fn retrieve<R: Rng + ?Sized>(
        &self,
        strategy: Strategy,
        query: &[f64],
        k: usize,
        rng: &mut R,
    ) -> Result<RetrievedContext, RetrievalError> {
        match strategy {
            Strategy::StateSimilar => self.retrieve_state_similar(query, k),
            Strategy::Random => self.retrieve_random(query, k, rng),
            Strategy::HighReward { pool } => self.retrieve_high_reward(query, k, pool.min(self.len()).max(k)),
        }
    }
}

/// κ = |retrieved ∩ ideal| / |ideal|, over dataset transition indices.
pub fn coverage_ratio(retrieved: &RetrievedContext, ideal: &HashSet<usize>) -> Result<f64, RetrievalError> {
    if ideal.is_empty() {
        return Err(RetrievalError::EmptyIdeal);
    }
    let hit = retrieved
        .transitions
        .iter()
        .collect::<HashSet<_>>()
        .into_iter()
        .filter(|t| ideal.contains(t))
        .count();
    Ok(hit as f64 / ideal.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn line() -> RetrievalIndex {
        RetrievalIndex::from_states(
            (0..4).map(|i| vec![i as f64]).collect(),
            vec![0.0, 1.0, 2.0, 3.0],
            Metric::L2,
        )
    }

    #[test]
    fn nearest_two_on_a_line() {
        let c = line().retrieve_state_similar(&[1.2], 2).unwrap();
        assert_eq!(c.rows, vec![1, 2]);
        assert!((c.d_min - 0.8).abs() < 1e-12);
    }

    #[test]
    fn full_k_returns_everything() {
        let idx = line();
        let mut c = idx.retrieve_state_similar(&[10.0], 4).unwrap().rows;
        c.sort();
        assert_eq!(c, vec![0, 1, 2, 3]);
        let mut r = idx.retrieve_random(&[0.0], 4, &mut stream(1, "r")).unwrap().rows;
        r.sort();
        assert_eq!(r, vec![0, 1, 2, 3]);
        assert!(matches!(idx.retrieve_state_similar(&[0.0], 5), Err(RetrievalError::BadK { .. })));
    }

    #[test]
    fn random_is_seeded() {
        let idx = line();
        let a = idx.retrieve_random(&[0.0], 2, &mut stream(3, "r")).unwrap();
        let b = idx.retrieve_random(&[0.0], 2, &mut stream(3, "r")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn high_reward_degenerate_pool_equals_nearest() {
        let idx = line();
        let a = idx.retrieve_high_reward(&[1.2], 2, 2).unwrap();
        let b = idx.retrieve_state_similar(&[1.2], 2).unwrap();
        assert_eq!(a.rows, b.rows);
        let c = idx.retrieve_high_reward(&[1.2], 2, 4).unwrap();
        assert_eq!(c.rows, vec![2, 3]);
    }

    #[test]
    fn equal_rewards_fall_back_to_distance_order() {
        let idx = RetrievalIndex::from_states(
            vec![vec![0.0], vec![2.0], vec![1.0], vec![1.0]],
            vec![5.0; 4],
            Metric::L2,
        );
        let c = idx.retrieve_high_reward(&[0.9], 2, 4).unwrap();
        assert_eq!(c.rows, vec![2, 3]);
    }

    #[test]
    fn coverage_examples() {
        let ctx = |t: Vec<usize>| RetrievedContext {
            rows: t.clone(),
            transitions: t,
            distances: vec![],
            query: vec![],
            d_min: 0.0,
            strategy: Strategy::StateSimilar,
        };
        let ideal: HashSet<usize> = (0..10).collect();
        assert_eq!(coverage_ratio(&ctx((0..12).collect()), &ideal).unwrap(), 1.0);
        assert_eq!(coverage_ratio(&ctx(vec![20, 21]), &ideal).unwrap(), 0.0);
        assert_eq!(coverage_ratio(&ctx(vec![0, 1, 2, 3, 4, 5, 6, 30]), &ideal).unwrap(), 0.7);
        assert!(coverage_ratio(&ctx(vec![1]), &HashSet::new()).is_err());
    }

    #[test]
    fn cosine_ignores_scale() {
        let idx = RetrievalIndex::from_states(
            vec![vec![1.0, 0.0], vec![0.0, 3.0], vec![5.0, 0.1]],
            vec![0.0; 3],
            Metric::Cosine,
        );
        let c = idx.retrieve_state_similar(&[2.0, 0.0], 2).unwrap();
        assert_eq!(c.rows, vec![0, 2]);
        assert!(c.distances[0].abs() < 1e-15);
    }
}
