use std::io::Write;

use serde_json::json;

use super::OracleError;
use crate::mdp::TabularModel;

/// Optimal action values with the sweep history that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    pub q: Vec<Vec<f64>>,
    pub gamma: f64,
    /// Sup-norm Bellman residual of the final sweep.
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub terminal: Vec<bool>,
}

/// `table[s]` lists `(action, probability)`.
pub type PolicyTable = Vec<Vec<(usize, f64)>>;

impl QTable {
    pub fn n_states(&self) -> usize {
        self.q.len()
    }

    pub fn value(&self, s: usize) -> f64 {
        if self.terminal[s] {
            return 0.0;
        }
        self.q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action; the lowest index wins ties.
    pub fn greedy(&self, s: usize) -> usize {
        let mut best = 0;
        for a in 1..self.q[s].len() {
            if self.q[s][a] > self.q[s][best] {
                best = a;
            }
        }
        best
    }

    pub fn greedy_actions(&self) -> Vec<usize> {
        (0..self.n_states()).map(|s| self.greedy(s)).collect()
    }

    /// CSV with a JSON metadata comment line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let meta = json!({"kind": "q_table", "gamma": self.gamma, "residual": self.residual});
        writeln!(w, "# {meta}")?;
        writeln!(w, "state,action,q_star,v_star,greedy,terminal")?;
        for s in 0..self.n_states() {
            for a in 0..self.q[s].len() {
                writeln!(
                    w,
                    "{s},{a},{},{},{},{}",
                    self.q[s][a],
                    self.value(s),
                    u8::from(self.greedy(s) == a),
                    u8::from(self.terminal[s])
                )?;
            }
        }
        Ok(())
    }
}

fn backup(m: &TabularModel, v: &[f64], s: usize, a: usize) -> f64 {
    let mut total = 0.0;
    for &(n, p) in &m.transitions[s][a] {
        let cont = if m.terminal[n] { 0.0 } else { m.gamma * v[n] };
        total += p * (m.action_reward[s][a] + m.arrival_reward[n] + cont);
    }
    total
}

/// Bellman-optimality sweeps until the sup-norm residual is at most `tol`.
pub fn value_iteration(m: &TabularModel, tol: f64, max_iters: usize) -> Result<QTable, OracleError> {
    if !(tol > 0.0) {
        return Err(OracleError::Invalid(format!("tol must be positive, got {tol}")));
    }
    let (ns, na) = (m.n_states, m.n_actions);
    let mut q = vec![vec![0.0; na]; ns];
    let mut history = Vec::new();
    for _ in 0..max_iters {
        let v: Vec<f64> = (0..ns)
            .map(|s| {
                if m.terminal[s] {
                    0.0
                } else {
                    q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect();
        let mut residual = 0.0f64;
        for s in 0..ns {
            if m.terminal[s] {
                continue;
            }
            for a in 0..na {
                let new = backup(m, &v, s, a);
                residual = residual.max((new - q[s][a]).abs());
                q[s][a] = new;
            }
        }
        history.push(residual);
        if residual <= tol {
            return Ok(QTable {
                q,
                gamma: m.gamma,
                residual,
                residual_history: history,
                terminal: m.terminal.clone(),
            });
        }
    }
    Err(OracleError::NonConvergence {
        iters: max_iters,
        residual: history.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// Discounted action values of a fixed stochastic policy.
pub fn policy_evaluation(
    m: &TabularModel,
    policy: &PolicyTable,
    tol: f64,
    max_iters: usize,
) -> Result<QTable, OracleError> {
    if policy.len() != m.n_states {
        return Err(OracleError::Dim(format!(
            "policy has {} states, model {}",
            policy.len(),
            m.n_states
        )));
    }
    let (ns, na) = (m.n_states, m.n_actions);
    let mut q = vec![vec![0.0; na]; ns];
    let mut history = Vec::new();
    for _ in 0..max_iters {
        let v: Vec<f64> = (0..ns)
            .map(|s| {
                if m.terminal[s] {
                    0.0
                } else {
                    policy[s].iter().map(|&(a, p)| p * q[s][a]).sum()
                }
            })
            .collect();
        let mut residual = 0.0f64;
        for s in 0..ns {
            if m.terminal[s] {
                continue;
            }
            for a in 0..na {
                let new = backup(m, &v, s, a);
                residual = residual.max((new - q[s][a]).abs());
                q[s][a] = new;
            }
        }
        history.push(residual);
        if residual <= tol {
            return Ok(QTable {
                q,
                gamma: m.gamma,
                residual,
                residual_history: history,
                terminal: m.terminal.clone(),
            });
        }
    }
    Err(OracleError::NonConvergence {
        iters: max_iters,
        residual: history.last().copied().unwrap_or(f64::INFINITY),
    })
}

pub fn greedy_policy_table(actions: &[usize]) -> PolicyTable {
    actions.iter().map(|&a| vec![(a, 1.0)]).collect()
}

pub fn uniform_policy_table(m: &TabularModel) -> PolicyTable {
    let p = 1.0 / m.n_actions as f64;
    vec![(0..m.n_actions).map(|a| (a, p)).collect(); m.n_states]
}

/// Expected undiscounted return over at most `horizon` steps, averaged
/// uniformly over the start states.
pub fn finite_horizon_return(m: &TabularModel, policy: &PolicyTable, horizon: usize) -> f64 {
    let ns = m.n_states;
    let mut v = vec![0.0; ns];
    for _ in 0..horizon {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            if m.terminal[s] {
                continue;
            }
            let mut total = 0.0;
            for &(a, pa) in &policy[s] {
                for &(n, p) in &m.transitions[s][a] {
                    let cont = if m.terminal[n] { 0.0 } else { v[n] };
                    total += pa * p * (m.action_reward[s][a] + m.arrival_reward[n] + cont);
                }
            }
            next[s] = total;
        }
        v = next;
    }
    m.start.iter().map(|&s| v[s]).sum::<f64>() / m.start.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{MdpSpec, TabularModel};

    fn absorbing() -> TabularModel {
        let spec = MdpSpec::from_config_text(
            "family = explicit\nn_states = 1\nn_actions = 2\np.0.0 = 0:1\np.0.1 = 0:1\n",
        )
        .unwrap();
        TabularModel::build(&spec).unwrap()
    }

    #[test]
    fn absorbing_zero_reward_state_has_zero_values() {
        let q = value_iteration(&absorbing(), 1e-10, 1000).unwrap();
        assert_eq!(q.q, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn two_state_chain_matches_rollout_sum() {
        // Reward 1 per step for staying in state 0 via action 0; action 1
        // reaches the terminal state 1 with reward 1.
        let spec = MdpSpec::from_config_text(
            "family = explicit\ngamma = 0.9\nn_states = 2\nn_actions = 2\n\
             p.0.0 = 0:1\np.0.1 = 1:1\nr.0.0 = 1\narrive.1 = 1\nterminal = 1\n",
        )
        .unwrap();
        let m = TabularModel::build(&spec).unwrap();
        let q = value_iteration(&m, 1e-12, 100_000).unwrap();
        let stay: f64 = (0..1000).map(|t| 0.9f64.powi(t)).sum();
        assert!((q.q[0][0] - stay).abs() < 1e-9);
        // Taking action 1 first: reward 1, then terminal.
        assert!((q.q[0][1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn residuals_never_increase() {
        let m = TabularModel::build(&MdpSpec::four_rooms()).unwrap();
        let q = value_iteration(&m, 1e-10, 100_000).unwrap();
        assert!(q.residual <= 1e-10);
        for w in q.residual_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn greedy_policy_is_a_fixed_point() {
        let m = TabularModel::build(&MdpSpec::four_rooms()).unwrap();
        let q = value_iteration(&m, 1e-10, 100_000).unwrap();
        let pi = q.greedy_actions();
        let qp = policy_evaluation(&m, &greedy_policy_table(&pi), 1e-11, 100_000).unwrap();
        for s in 0..m.n_states {
            if m.terminal[s] {
                continue;
            }
            // Improvement picks an action whose value equals the current one.
            let improved = qp.greedy(s);
            assert!((qp.q[s][improved] - qp.q[s][pi[s]]).abs() < 1e-8, "state {s}");
        }
    }

    #[test]
    fn optimal_policy_beats_uniform_over_finite_horizon() {
        let m = TabularModel::build(&MdpSpec::four_rooms()).unwrap();
        let q = value_iteration(&m, 1e-10, 100_000).unwrap();
        let best = finite_horizon_return(&m, &greedy_policy_table(&q.greedy_actions()), 100);
        let rand = finite_horizon_return(&m, &uniform_policy_table(&m), 100);
        assert!(best > rand + 0.5, "{best} vs {rand}");
    }
}
