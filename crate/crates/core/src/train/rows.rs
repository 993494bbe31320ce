//! Global numbering of every (state, action) network input the dataset can
//! produce, and per-step compaction into a small input matrix.
//!
//! Discrete spaces number inputs as `state_uid · A + a`, so policy samples at
//! dataset states reuse rows. Continuous spaces number the distinct dataset
//! pairs; off-dataset actions become fresh rows each step.

use std::collections::HashMap;

use crate::critic::{effective_reward, ContextSpec, RowRef};
use crate::mdp::{ActionSpace, TransitionDataset};

#[derive(Clone, Debug)]
pub struct RowCatalog {
    space: ActionSpace,
    states: Vec<Vec<f64>>,
    state_lookup: HashMap<Vec<u64>, usize>,
    /// Continuous spaces only: (state uid, action) per global id.
    pairs: Vec<(usize, Vec<f64>)>,
    pub s_uid: Vec<usize>,
    pub next_uid: Vec<usize>,
    pub sa_id: Vec<usize>,
    /// None when the transition has no next action.
    pub next_sa_id: Vec<Option<usize>>,
}

fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

impl RowCatalog {
    pub fn build(dataset: &TransitionDataset, space: ActionSpace) -> Self {
        let mut c = Self {
            space,
            states: Vec::new(),
            state_lookup: HashMap::new(),
            pairs: Vec::new(),
            s_uid: Vec::with_capacity(dataset.len()),
            next_uid: Vec::with_capacity(dataset.len()),
            sa_id: Vec::with_capacity(dataset.len()),
            next_sa_id: Vec::with_capacity(dataset.len()),
        };
        let mut pair_lookup: HashMap<(usize, Vec<u64>), usize> = HashMap::new();
        for t in &dataset.transitions {
            let su = c.intern_state(&t.s);
            let nu = c.intern_state(&t.s_next);
            c.s_uid.push(su);
            c.next_uid.push(nu);
            let mut pair = |c: &mut Self, uid: usize, a: &[f64]| match space {
                ActionSpace::Discrete(n) => uid * n + a[0] as usize,
                ActionSpace::Box { .. } => *pair_lookup.entry((uid, bits(a))).or_insert_with(|| {
                    c.pairs.push((uid, a.to_vec()));
                    c.pairs.len() - 1
                }),
            };
            let id = pair(&mut c, su, &t.a);
            c.sa_id.push(id);
            let next = t.a_next.as_ref().map(|a| pair(&mut c, nu, a));
            c.next_sa_id.push(next);
        }
        c
    }

    fn intern_state(&mut self, s: &[f64]) -> usize {
        let key = bits(s);
        if let Some(&u) = self.state_lookup.get(&key) {
            return u;
        }
        self.states.push(s.to_vec());
        self.state_lookup.insert(key, self.states.len() - 1);
        self.states.len() - 1
    }

    pub fn space(&self) -> ActionSpace {
        self.space
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn state(&self, uid: usize) -> &[f64] {
        &self.states[uid]
    }

    pub fn state_uid(&self, s: &[f64]) -> Option<usize> {
        self.state_lookup.get(&bits(s)).copied()
    }

    pub fn n_global(&self) -> usize {
        match self.space {
            ActionSpace::Discrete(n) => self.states.len() * n,
            ActionSpace::Box { .. } => self.pairs.len(),
        }
    }

    /// Global id of (state uid, discrete action).
    pub fn discrete_id(&self, uid: usize, a: usize) -> Option<usize> {
        match self.space {
            ActionSpace::Discrete(n) if a < n => Some(uid * n + a),
            _ => None,
        }
    }

    /// Appends the network input of global id `id`.
    pub fn encode(&self, id: usize, out: &mut Vec<f64>) {
        match self.space {
            ActionSpace::Discrete(n) => {
                out.extend_from_slice(&self.states[id / n]);
                self.space.encode(&[(id % n) as f64], out);
            }
            ActionSpace::Box { .. } => {
                let (uid, a) = &self.pairs[id];
                out.extend_from_slice(&self.states[*uid]);
                self.space.encode(a, out);
            }
        }
    }
}

/// A context as global input ids.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalContext {
    pub transitions: Vec<usize>,
    pub phi: Vec<usize>,
    pub phi_next: Vec<Option<usize>>,
    pub r_eff: Vec<f64>,
}

impl GlobalContext {
    /// Terminal transitions get no φ'; non-terminal ones must have a'.
    pub fn build(
        catalog: &RowCatalog,
        dataset: &TransitionDataset,
        transitions: &[usize],
        gamma: f64,
        beta_rtg: f64,
    ) -> Option<Self> {
        let mut g = Self {
            transitions: transitions.to_vec(),
            phi: Vec::with_capacity(transitions.len()),
            phi_next: Vec::with_capacity(transitions.len()),
            r_eff: Vec::with_capacity(transitions.len()),
        };
        for &ti in transitions {
            let t = &dataset.transitions[ti];
            g.phi.push(catalog.sa_id[ti]);
            g.phi_next.push(if t.terminal {
                None
            } else {
                Some(catalog.next_sa_id[ti]?)
            });
            g.r_eff.push(effective_reward(t.r, t.rtg, t.rtg_next, gamma, beta_rtg));
        }
        Some(g)
    }
}

/// Per-step map from global ids to rows of a compact input matrix.
#[derive(Clone, Debug)]
pub struct LocalRows {
    width: usize,
    stamp: Vec<u32>,
    slot: Vec<u32>,
    generation: u32,
    inputs: Vec<f64>,
    rows: usize,
}

impl LocalRows {
    pub fn new(catalog: &RowCatalog, width: usize) -> Self {
        Self {
            width,
            stamp: vec![0; catalog.n_global()],
            slot: vec![0; catalog.n_global()],
            generation: 0,
            inputs: Vec::new(),
            rows: 0,
        }
    }

    pub fn reset(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.generation = 1;
        }
        self.inputs.clear();
        self.rows = 0;
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn global(&mut self, catalog: &RowCatalog, id: usize) -> usize {
        if self.stamp[id] == self.generation {
            return self.slot[id] as usize;
        }
        self.stamp[id] = self.generation;
        self.slot[id] = self.rows as u32;
        catalog.encode(id, &mut self.inputs);
        self.rows += 1;
        self.rows - 1
    }

    /// A row for an input outside the catalog.
    pub fn fresh(&mut self, space: ActionSpace, s: &[f64], a: &[f64]) -> usize {
        self.inputs.extend_from_slice(s);
        space.encode(a, &mut self.inputs);
        self.rows += 1;
        self.rows - 1
    }

    /// Row of (state uid, action): shared for discrete actions, fresh
    /// otherwise.
    pub fn state_action(&mut self, catalog: &RowCatalog, uid: usize, a: &[f64]) -> usize {
        match catalog.discrete_id(uid, a[0] as usize) {
            Some(id) if matches!(catalog.space(), ActionSpace::Discrete(_)) => self.global(catalog, id),
            _ => self.fresh(catalog.space(), catalog.state(uid), a),
        }
    }

    pub fn context(&mut self, catalog: &RowCatalog, g: &GlobalContext, block: usize) -> ContextSpec {
        ContextSpec {
            phi: g.phi.iter().map(|&id| RowRef::new(block, self.global(catalog, id))).collect(),
            phi_next: g
                .phi_next
                .iter()
                .map(|n| n.map(|id| RowRef::new(block, self.global(catalog, id))))
                .collect(),
            r_eff: g.r_eff.clone(),
        }
    }

    pub fn matrix(&self) -> crate::nn::Matrix {
        crate::nn::Matrix::from_vec(self.rows, self.width, self.inputs.clone()).expect("consistent width")
    }
}
