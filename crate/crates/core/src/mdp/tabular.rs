//! Explicit transition tables built from the tabular families.

use super::spec::{is_free_cell, ChainParams, ExplicitTable, FourRoomsParams, MdpKind, MdpSpec};
use super::MdpError;

/// Four-rooms moves: up, right, down, left.
pub const GRID_MOVES: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

#[derive(Clone, Debug, PartialEq)]
pub struct TabularModel {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a]` is a sparse distribution over next states.
    pub transitions: Vec<Vec<Vec<(usize, f64)>>>,
    pub action_reward: Vec<Vec<f64>>,
    pub arrival_reward: Vec<f64>,
    pub terminal: Vec<bool>,
    /// Episodes start uniformly at one of these states.
    pub start: Vec<usize>,
    /// Normalized planar coordinates appended to the one-hot embedding.
    pub coords: Vec<[f64; 2]>,
    pub gamma: f64,
}

impl TabularModel {
    pub fn build(spec: &MdpSpec) -> Result<Self, MdpError> {
        spec.validate()?;
        let m = match &spec.kind {
            MdpKind::Chain(p) => chain(p, spec.gamma),
            MdpKind::FourRooms(p) => four_rooms(p, spec.gamma, p.goal),
            MdpKind::Explicit(t) => explicit(t, spec.gamma),
            MdpKind::PointMass(_) => {
                return Err(MdpError::InvalidSpec("point-mass has no transition table".into()))
            }
        };
        Ok(m)
    }

    /// The four-rooms model with the goal moved to the decoy cell.
    pub fn build_decoy(spec: &MdpSpec) -> Result<Self, MdpError> {
        match &spec.kind {
            MdpKind::FourRooms(p) => {
                spec.validate()?;
                Ok(four_rooms(p, spec.gamma, p.decoy))
            }
            _ => Err(MdpError::InvalidSpec(format!(
                "decoy behavior is only defined for four-rooms and point-mass, not {}",
                spec.family()
            ))),
        }
    }

    pub fn reward(&self, s: usize, a: usize, next: usize) -> f64 {
        self.action_reward[s][a] + self.arrival_reward[next]
    }

    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.transitions[s][a]
            .iter()
            .map(|&(n, p)| p * self.reward(s, a, n))
            .sum()
    }

    pub fn reward_bound(&self) -> f64 {
        let mut b = 0.0f64;
        for s in 0..self.n_states {
            if self.terminal[s] {
                continue;
            }
            for a in 0..self.n_actions {
                for &(n, _) in &self.transitions[s][a] {
                    b = b.max(self.reward(s, a, n).abs());
                }
            }
        }
        b
    }

    pub fn state_dim(&self) -> usize {
        self.n_states + 2
    }

    /// One-hot of the state index followed by its coordinates.
    pub fn embed(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.state_dim()];
        v[s] = 1.0;
        v[self.n_states] = self.coords[s][0];
        v[self.n_states + 1] = self.coords[s][1];
        v
    }

    /// Inverse of [`embed`](Self::embed).
    pub fn decode(&self, state: &[f64]) -> Option<usize> {
        if state.len() != self.state_dim() {
            return None;
        }
        let hot = state[..self.n_states].iter().position(|&x| x == 1.0)?;
        (self.embed(hot) == state).then_some(hot)
    }
}

fn chain(p: &ChainParams, gamma: f64) -> TabularModel {
    let n = p.n_states;
    let goal = n - 1;
    let mut m = TabularModel {
        n_states: n,
        n_actions: 2,
        transitions: vec![vec![vec![]; 2]; n],
        action_reward: vec![vec![p.step_reward; 2]; n],
        arrival_reward: vec![0.0; n],
        terminal: vec![false; n],
        start: vec![0],
        coords: (0..n).map(|i| [i as f64 / (n - 1) as f64, 0.0]).collect(),
        gamma,
    };
    m.arrival_reward[goal] = p.goal_reward;
    m.terminal[goal] = true;
    for s in 0..n {
        let left = s.saturating_sub(1);
        let right = (s + 1).min(goal);
        for (a, intended) in [(0, left), (1, right)] {
            let other = if a == 0 { right } else { left };
            m.transitions[s][a] = merge(vec![(intended, 1.0 - p.slip / 2.0), (other, p.slip / 2.0)]);
        }
    }
    m
}

/// Room index (top-left, top-right, bottom-left, bottom-right); hallway cells
/// belong to the room above or to the left.
pub fn room_of((r, c): (usize, usize)) -> usize {
    let right = c >= 7;
    let bottom = if right { r >= 8 } else { r >= 7 };
    usize::from(right) + 2 * usize::from(bottom)
}

pub fn four_rooms_cells() -> Vec<(usize, usize)> {
    (0..13)
        .flat_map(|r| (0..13).map(move |c| (r, c)))
        .filter(|&rc| is_free_cell(rc))
        .collect()
}

fn four_rooms(p: &FourRoomsParams, gamma: f64, goal: (usize, usize)) -> TabularModel {
    let cells = four_rooms_cells();
    let n = cells.len();
    let index = |rc: (usize, usize)| cells.iter().position(|&x| x == rc);
    let goal_idx = index(goal).expect("validated goal cell");
    let mut m = TabularModel {
        n_states: n,
        n_actions: 4,
        transitions: vec![vec![vec![]; 4]; n],
        action_reward: cells.iter().map(|&rc| vec![p.room_rewards[room_of(rc)]; 4]).collect(),
        arrival_reward: vec![0.0; n],
        terminal: vec![false; n],
        start: (0..n).filter(|&i| i != goal_idx).collect(),
        coords: cells
            .iter()
            .map(|&(r, c)| [(c as f64 - 1.0) / 10.0, (r as f64 - 1.0) / 10.0])
            .collect(),
        gamma,
    };
    m.arrival_reward[goal_idx] = p.goal_reward;
    m.terminal[goal_idx] = true;
    for (s, &(r, c)) in cells.iter().enumerate() {
        let dest: Vec<usize> = GRID_MOVES
            .iter()
            .map(|&(dr, dc)| {
                let nr = (r as isize + dr) as usize;
                let nc = (c as isize + dc) as usize;
                if is_free_cell((nr, nc)) {
                    index((nr, nc)).expect("free cell is indexed")
                } else {
                    s
                }
            })
            .collect();
        for a in 0..4 {
            let mut row = vec![(dest[a], 1.0 - p.slip)];
            row.extend(dest.iter().map(|&d| (d, p.slip / 4.0)));
            m.transitions[s][a] = merge(row);
        }
    }
    m
}

fn explicit(t: &ExplicitTable, gamma: f64) -> TabularModel {
    let n = t.n_states;
    let mut transitions = t.transitions.clone();
    // Terminal states never act; give them a self-loop so the table is total.
    for s in 0..n {
        if t.terminal[s] {
            transitions[s] = vec![vec![(s, 1.0)]; t.n_actions];
        }
    }
    TabularModel {
        n_states: n,
        n_actions: t.n_actions,
        transitions,
        action_reward: t.action_reward.clone(),
        arrival_reward: t.arrival_reward.clone(),
        terminal: t.terminal.clone(),
        start: t.start.clone(),
        coords: (0..n)
            .map(|i| [if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 }, 0.0])
            .collect(),
        gamma,
    }
}

/// Combines duplicate next states and drops zero-probability entries.
fn merge(row: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (n, p) in row {
        if p == 0.0 {
            continue;
        }
        match out.iter_mut().find(|(m, _)| *m == n) {
            Some(e) => e.1 += p,
            None => out.push((n, p)),
        }
    }
    out.sort_by_key(|e| e.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        let mut slippery = MdpSpec::four_rooms();
        if let MdpKind::FourRooms(p) = &mut slippery.kind {
            p.slip = 0.3;
        }
        for spec in [MdpSpec::chain(5, 0.9), MdpSpec::four_rooms(), slippery] {
            let m = TabularModel::build(&spec).unwrap();
            for s in 0..m.n_states {
                for a in 0..m.n_actions {
                    let total: f64 = m.transitions[s][a].iter().map(|e| e.1).sum();
                    assert!((total - 1.0).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn embedding_round_trips() {
        let m = TabularModel::build(&MdpSpec::four_rooms()).unwrap();
        assert_eq!(m.state_dim(), 106);
        for s in 0..m.n_states {
            assert_eq!(m.decode(&m.embed(s)), Some(s));
        }
        assert_eq!(m.decode(&vec![0.0; 106]), None);
    }

    #[test]
    fn rooms_are_assigned_by_quadrant() {
        assert_eq!(room_of((1, 1)), 0);
        assert_eq!(room_of((1, 11)), 1);
        assert_eq!(room_of((11, 1)), 2);
        assert_eq!(room_of((11, 11)), 3);
        assert_eq!(room_of((6, 2)), 0);
        assert_eq!(room_of((7, 9)), 1);
    }
}
