use std::collections::HashMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Metric, RetrievalError, RetrievalIndex, RetrievedContext, Strategy};

pub const SIDECAR_MAGIC: &[u8; 8] = b"ICQLNBR1";

/// Cached contexts, one per distinct query state.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborTable {
    pub k: usize,
    pub metric: Metric,
    pub strategy: Strategy,
    pub contexts: Vec<RetrievedContext>,
    lookup: HashMap<Vec<u64>, usize>,
}

#[derive(Serialize, Deserialize)]
struct SidecarHeader {
    dataset_hash: String,
    k: usize,
    metric: String,
    strategy: String,
    dim: usize,
    n_contexts: usize,
}

fn bits(state: &[f64]) -> Vec<u64> {
    state.iter().map(|x| x.to_bits()).collect()
}

/// Retrieves once per distinct query (bitwise equality) in first-seen order.
/// Random retrieval is drawn fresh at every use and cannot be cached.
pub fn precompute_neighbors(
    index: &RetrievalIndex,
    queries: &[Vec<f64>],
    k: usize,
    strategy: Strategy,
) -> Result<NeighborTable, RetrievalError> {
    let mut lookup = HashMap::new();
    let mut unique: Vec<&Vec<f64>> = Vec::new();
    for q in queries {
        lookup.entry(bits(q)).or_insert_with(|| {
            unique.push(q);
            unique.len() - 1
        });
    }
    let contexts = unique
        .par_iter()
        .map(|q| match strategy {
            Strategy::StateSimilar => index.retrieve_state_similar(q, k),
            Strategy::HighReward { pool } => index.retrieve_high_reward(q, k, pool),
            Strategy::Random => Err(RetrievalError::Parse {
                what: "cacheable strategy",
                value: "random".into(),
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(NeighborTable {
        k,
        metric: index.metric(),
        strategy,
        contexts,
        lookup,
    })
}

impl NeighborTable {
    pub fn context_id(&self, state: &[f64]) -> Option<usize> {
        self.lookup.get(&bits(state)).copied()
    }

    pub fn get(&self, state: &[f64]) -> Option<&RetrievedContext> {
        self.context_id(state).map(|i| &self.contexts[i])
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    /// Number of cached (query, neighbor) entries.
    pub fn entry_count(&self) -> usize {
        self.contexts.iter().map(RetrievedContext::len).sum()
    }

    pub fn write_sidecar<W: Write>(&self, mut w: W, dataset_hash: &str) -> Result<(), RetrievalError> {
        let dim = self.contexts.first().map_or(0, |c| c.query.len());
        let header = SidecarHeader {
            dataset_hash: dataset_hash.to_string(),
            k: self.k,
            metric: self.metric.to_string(),
            strategy: self.strategy.to_string(),
            dim,
            n_contexts: self.contexts.len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| RetrievalError::Format(e.to_string()))?;
        w.write_all(SIDECAR_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for c in &self.contexts {
            for x in &c.query {
                w.write_all(&x.to_le_bytes())?;
            }
            for i in 0..self.k {
                w.write_all(&(c.rows[i] as u64).to_le_bytes())?;
                w.write_all(&(c.transitions[i] as u64).to_le_bytes())?;
                w.write_all(&c.distances[i].to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads a sidecar, refusing one built for another dataset or settings.
    pub fn read_sidecar<R: Read>(
        mut r: R,
        dataset_hash: &str,
        k: usize,
        metric: Metric,
        strategy: Strategy,
    ) -> Result<Self, RetrievalError> {
        let fmt = |m: &str| RetrievalError::Format(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SIDECAR_MAGIC {
            return Err(fmt("bad magic"));
        }
        let len = read_u64(&mut r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let h: SidecarHeader = serde_json::from_slice(&json).map_err(|e| RetrievalError::Format(e.to_string()))?;
        if h.dataset_hash != dataset_hash
            || h.k != k
            || h.metric != metric.to_string()
            || h.strategy != strategy.to_string()
        {
            return Err(fmt("sidecar was built for a different dataset or settings"));
        }
        let mut contexts = Vec::with_capacity(h.n_contexts);
        let mut lookup = HashMap::new();
        for id in 0..h.n_contexts {
            let query = (0..h.dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>, _>>()?;
            let (mut rows, mut transitions, mut distances) = (vec![], vec![], vec![]);
            for _ in 0..k {
                rows.push(read_u64(&mut r)? as usize);
                transitions.push(read_u64(&mut r)? as usize);
                distances.push(read_f64(&mut r)?);
            }
            lookup.insert(bits(&query), id);
            contexts.push(RetrievedContext {
                rows,
                transitions,
                d_min: distances.iter().copied().fold(0.0, f64::max),
                distances,
                query,
                strategy,
            });
        }
        Ok(Self {
            k,
            metric,
            strategy,
            contexts,
            lookup,
        })
    }
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    read_u64(r).map(f64::from_bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index() -> RetrievalIndex {
        RetrievalIndex::from_states(
            (0..30).map(|i| vec![(i % 7) as f64, (i / 7) as f64 * 0.5]).collect(),
            (0..30).map(|i| (i % 3) as f64).collect(),
            Metric::L2,
        )
    }

    #[test]
    fn k1_neighbor_is_the_state_itself() {
        let idx = index();
        let queries: Vec<Vec<f64>> = (0..30).map(|i| idx.state(i).to_vec()).collect();
        let t = precompute_neighbors(&idx, &queries, 1, Strategy::StateSimilar).unwrap();
        for q in &queries {
            let c = t.get(q).unwrap();
            assert_eq!(idx.state(c.rows[0]), q.as_slice());
            assert_eq!(c.d_min, 0.0);
        }
        assert_eq!(t.entry_count(), t.len());
    }

    #[test]
    fn sidecar_round_trip_and_mismatch() {
        let idx = index();
        let queries: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.3, 0.2]).collect();
        let t = precompute_neighbors(&idx, &queries, 5, Strategy::HighReward { pool: 9 }).unwrap();
        assert_eq!(t.entry_count(), 10 * 5);
        let mut buf = Vec::new();
        t.write_sidecar(&mut buf, "abc").unwrap();
        let back = NeighborTable::read_sidecar(&buf[..], "abc", 5, Metric::L2, Strategy::HighReward { pool: 9 }).unwrap();
        assert_eq!(back, t);
        assert!(NeighborTable::read_sidecar(&buf[..], "abd", 5, Metric::L2, Strategy::HighReward { pool: 9 }).is_err());
    }

    #[test]
    fn random_strategy_cannot_be_cached() {
        let idx = index();
        assert!(precompute_neighbors(&idx, &[vec![0.0, 0.0]], 2, Strategy::Random).is_err());
    }
}
