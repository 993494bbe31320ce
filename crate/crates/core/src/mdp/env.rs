//! Steppable environments over [`MdpSpec`]s.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::spec::{MdpKind, MdpSpec, PointMassParams};
use super::{MdpError, TabularModel};
use crate::rng::{stream, streams, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionSpace {
    /// Actions are stored as a single-element vector holding the index.
    Discrete(usize),
    Box { dim: usize, low: f64, high: f64 },
}

impl ActionSpace {
    /// Length of the stored action vector.
    pub fn dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Box { dim, .. } => dim,
        }
    }

    /// Length of the action encoding fed to networks (one-hot for discrete).
    pub fn encoded_dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete(n) => n,
            ActionSpace::Box { dim, .. } => dim,
        }
    }

    pub fn encode(&self, a: &[f64], out: &mut Vec<f64>) {
        match *self {
            ActionSpace::Discrete(n) => {
                let start = out.len();
                out.resize(start + n, 0.0);
                out[start + a[0] as usize] = 1.0;
            }
            ActionSpace::Box { .. } => out.extend_from_slice(a),
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match *self {
            ActionSpace::Discrete(n) => vec![rng.random_range(0..n) as f64],
            ActionSpace::Box { dim, low, high } => {
                (0..dim).map(|_| rng.random_range(low..=high)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

#[derive(Clone, Debug)]
enum Dynamics {
    Tabular(Arc<TabularModel>),
    PointMass(PointMassParams),
}

/// An environment. The `*_with` methods take an explicit RNG and are pure
/// with respect to `self`; `reset`/`step` draw from the env's own stream.
#[derive(Clone, Debug)]
pub struct Environment {
    spec: MdpSpec,
    dynamics: Dynamics,
    rng: StreamRng,
}

pub fn make_env(spec: &MdpSpec) -> Result<Environment, MdpError> {
    spec.validate()?;
    let dynamics = match &spec.kind {
        MdpKind::PointMass(p) => Dynamics::PointMass(p.clone()),
        _ => Dynamics::Tabular(Arc::new(TabularModel::build(spec)?)),
    };
    Ok(Environment {
        spec: spec.clone(),
        dynamics,
        rng: stream(spec.seed, streams::ENV),
    })
}

impl Environment {
    pub fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    pub fn tabular(&self) -> Option<&TabularModel> {
        match &self.dynamics {
            Dynamics::Tabular(m) => Some(m),
            Dynamics::PointMass(_) => None,
        }
    }

    pub fn gamma(&self) -> f64 {
        self.spec.gamma
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn state_dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::Tabular(m) => m.state_dim(),
            Dynamics::PointMass(_) => 2,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match &self.dynamics {
            Dynamics::Tabular(m) => ActionSpace::Discrete(m.n_actions),
            Dynamics::PointMass(_) => ActionSpace::Box {
                dim: 2,
                low: -1.0,
                high: 1.0,
            },
        }
    }

    /// Tabular state index of an embedded state.
    pub fn state_index(&self, state: &[f64]) -> Option<usize> {
        self.tabular().and_then(|m| m.decode(state))
    }

    pub fn reset(&mut self) -> Vec<f64> {
        let mut rng = self.rng.clone();
        let s = self.reset_with(&mut rng);
        self.rng = rng;
        s
    }

    pub fn step(&mut self, state: &[f64], action: &[f64]) -> Result<StepOutcome, MdpError> {
        let mut rng = self.rng.clone();
        let out = self.step_with(state, action, &mut rng);
        self.rng = rng;
        out
    }

    pub fn reset_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::Tabular(m) => m.embed(m.start[rng.random_range(0..m.start.len())]),
            Dynamics::PointMass(p) => loop {
                let s = vec![rng.random::<f64>(), rng.random::<f64>()];
                if !in_disk(&s, p.goal, p.goal_radius) {
                    break s;
                }
            },
        }
    }

    pub fn step_with<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        action: &[f64],
        rng: &mut R,
    ) -> Result<StepOutcome, MdpError> {
        match &self.dynamics {
            Dynamics::Tabular(m) => {
                let s = m
                    .decode(state)
                    .ok_or_else(|| MdpError::InvalidState(format!("{state:?}")))?;
                let a = discrete_action(action, m.n_actions)?;
                if m.terminal[s] {
                    return Err(MdpError::InvalidState(format!("state {s} is terminal")));
                }
                let next = sample_row(&m.transitions[s][a], rng);
                Ok(StepOutcome {
                    next_state: m.embed(next),
                    reward: m.reward(s, a, next),
                    terminal: m.terminal[next],
                })
            }
            Dynamics::PointMass(p) => {
                if state.len() != 2 || action.len() != 2 || action.iter().any(|x| !x.is_finite()) {
                    return Err(MdpError::InvalidAction(format!("{action:?} at {state:?}")));
                }
                let mut next = vec![0.0; 2];
                for i in 0..2 {
                    let a = action[i].clamp(-1.0, 1.0);
                    let noise = if p.noise_std > 0.0 {
                        p.noise_std * Distribution::<f64>::sample(&StandardNormal, rng)
                    } else {
                        0.0
                    };
                    next[i] = (state[i] + p.step_size * a + p.drift[i] + noise).clamp(0.0, 1.0);
                }
                let terminal = in_disk(&next, p.goal, p.goal_radius);
                let reward = p.region_rewards[quadrant(state)] + if terminal { p.goal_reward } else { 0.0 };
                Ok(StepOutcome {
                    next_state: next,
                    reward,
                    terminal,
                })
            }
        }
    }
}

pub fn quadrant(s: &[f64]) -> usize {
    usize::from(s[0] >= 0.5) + 2 * usize::from(s[1] >= 0.5)
}

pub fn in_disk(s: &[f64], center: [f64; 2], radius: f64) -> bool {
    let dx = s[0] - center[0];
    let dy = s[1] - center[1];
    dx * dx + dy * dy <= radius * radius
}

fn discrete_action(action: &[f64], n: usize) -> Result<usize, MdpError> {
    match action {
        [a] if a.fract() == 0.0 && *a >= 0.0 && (*a as usize) < n => Ok(*a as usize),
        _ => Err(MdpError::InvalidAction(format!("{action:?} (expected index < {n})"))),
    }
}

fn sample_row<R: Rng + ?Sized>(row: &[(usize, f64)], rng: &mut R) -> usize {
    if row.len() == 1 {
        return row[0].0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(n, p) in row {
        acc += p;
        if u < acc {
            return n;
        }
    }
    row[row.len() - 1].0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_right_move_reaches_goal() {
        let env = make_env(&MdpSpec::chain(4, 0.9)).unwrap();
        let m = env.tabular().unwrap();
        let mut rng = stream(0, "t");
        let out = env.step_with(&m.embed(2), &[1.0], &mut rng).unwrap();
        assert_eq!(out.next_state, m.embed(3));
        assert_eq!(out.reward, 1.0);
        assert!(out.terminal);
    }

    #[test]
    fn point_mass_zero_action_without_drift_is_identity() {
        let mut spec = MdpSpec::point_mass();
        if let MdpKind::PointMass(p) = &mut spec.kind {
            p.noise_std = 0.0;
        }
        let mut env = make_env(&spec).unwrap();
        let out = env.step(&[0.5, 0.5], &[0.0, 0.0]).unwrap();
        assert_eq!(out.next_state, vec![0.5, 0.5]);
        assert!(!out.terminal);
    }

    #[test]
    fn bad_actions_are_rejected() {
        let mut env = make_env(&MdpSpec::chain(4, 0.9)).unwrap();
        let s = env.reset();
        assert!(env.step(&s, &[2.0]).is_err());
        assert!(env.step(&s, &[0.5]).is_err());
    }
}
