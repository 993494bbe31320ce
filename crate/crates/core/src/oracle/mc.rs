use rand::RngCore;

use super::OracleError;
use crate::mdp::Environment;
use crate::rng::{substream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

/// Monte-Carlo discounted return from taking `a` in `s` and then following
/// `policy`, truncated after `horizon` steps in total.
pub fn mc_q_estimate(
    env: &Environment,
    policy: &dyn Fn(&[f64], &mut dyn RngCore) -> Vec<f64>,
    s: &[f64],
    a: &[f64],
    n_rollouts: usize,
    horizon: usize,
    gamma: f64,
    seed: u64,
) -> Result<McEstimate, OracleError> {
    if n_rollouts == 0 {
        return Err(OracleError::Invalid("n_rollouts must be at least 1".into()));
    }
    let mut returns = Vec::with_capacity(n_rollouts);
    for i in 0..n_rollouts {
        let mut rng: StreamRng = substream(seed, "mc-rollout", i as u64);
        let mut state = s.to_vec();
        let mut action = a.to_vec();
        let mut total = 0.0;
        let mut discount = 1.0;
        for _ in 0..horizon {
            let out = env
                .step_with(&state, &action, &mut rng)
                .map_err(|e| OracleError::Invalid(e.to_string()))?;
            total += discount * out.reward;
            discount *= gamma;
            if out.terminal {
                break;
            }
            state = out.next_state;
            action = policy(&state, &mut rng);
        }
        returns.push(total);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = if returns.len() > 1 {
        returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_err: (var / n).sqrt(),
        n: returns.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{make_env, MdpSpec};
    use crate::oracle::{value_iteration, VI_TOL, VI_MAX_ITERS};

    #[test]
    fn zero_reward_env_gives_zero() {
        let mut spec = MdpSpec::chain(4, 0.9);
        if let crate::mdp::MdpKind::Chain(p) = &mut spec.kind {
            p.goal_reward = 0.0;
        }
        let env = make_env(&spec).unwrap();
        let m = env.tabular().unwrap();
        let pol = |_: &[f64], _: &mut dyn RngCore| vec![1.0];
        let est = mc_q_estimate(&env, &pol, &m.embed(0), &[1.0], 3, 20, 0.9, 1).unwrap();
        assert_eq!(est.mean, 0.0);
    }

    #[test]
    fn deterministic_chain_single_rollout_is_closed_form() {
        let env = make_env(&MdpSpec::chain(4, 0.9)).unwrap();
        let m = env.tabular().unwrap();
        let pol = |_: &[f64], _: &mut dyn RngCore| vec![1.0];
        let est = mc_q_estimate(&env, &pol, &m.embed(0), &[1.0], 1, 20, 0.9, 1).unwrap();
        // Goal reached on the third step.
        assert!((est.mean - 0.81).abs() < 1e-15);
    }

    #[test]
    fn agrees_with_dp_on_a_stochastic_table() {
        let mut spec = MdpSpec::chain(5, 0.9);
        if let crate::mdp::MdpKind::Chain(p) = &mut spec.kind {
            p.slip = 0.3;
            p.step_reward = -0.1;
        }
        let env = make_env(&spec).unwrap();
        let m = env.tabular().unwrap().clone();
        let q = value_iteration(&m, VI_TOL, VI_MAX_ITERS).unwrap();
        let greedy = q.greedy_actions();
        let pol = move |s: &[f64], _: &mut dyn RngCore| vec![greedy[m.decode(s).unwrap()] as f64];
        let m = env.tabular().unwrap();
        for (s, a) in [(0usize, 1usize), (2, 0)] {
            let est = mc_q_estimate(&env, &pol, &m.embed(s), &[a as f64], 4000, 400, 0.9, 3).unwrap();
            assert!(
                (est.mean - q.q[s][a]).abs() <= 3.0 * est.std_err,
                "{est:?} vs {}",
                q.q[s][a]
            );
        }
    }
}
