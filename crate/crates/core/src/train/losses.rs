//! Scalar forms of the training objectives. The trainer builds the same
//! quantities on the tape; these are the reference definitions.

use super::TrainError;

/// ρ_τ(u) = |τ − 𝟙{u < 0}|·u².
pub fn expectile_loss(u: f64, tau: f64) -> Result<f64, TrainError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(TrainError::Config(vec![format!("tau {tau} outside (0, 1)")]));
    }
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    Ok(w * u * u)
}

/// exp(β·advantage) clipped to `clip`.
pub fn awr_weight(advantage: f64, beta: f64, clip: f64) -> f64 {
    (beta * advantage).exp().min(clip)
}

/// y = r + γ·V(s'), with V = 0 past a terminal transition.
pub fn bellman_target(r: f64, v_next: f64, terminal: bool, gamma: f64) -> f64 {
    if terminal {
        r
    } else {
        r + gamma * v_next
    }
}

/// Mean of ρ_τ(Q̂ − y).
pub fn iql_critic_loss(q: &[f64], targets: &[f64], tau: f64) -> Result<f64, TrainError> {
    aligned(q.len(), targets.len())?;
    let mut total = 0.0;
    for (qi, yi) in q.iter().zip(targets) {
        total += expectile_loss(qi - yi, tau)?;
    }
    Ok(total / q.len() as f64)
}

/// Mean of −w·log π(a|s) with w = min(exp(β(Q̂ − V)), clip).
pub fn iql_policy_loss(q: &[f64], v: &[f64], log_prob: &[f64], beta: f64, clip: f64) -> Result<f64, TrainError> {
    aligned(q.len(), v.len())?;
    aligned(q.len(), log_prob.len())?;
    let total: f64 = (0..q.len())
        .map(|i| -awr_weight(q[i] - v[i], beta, clip) * log_prob[i])
        .sum();
    Ok(total / q.len() as f64)
}

/// Σ over both critics of mean (Q̂_k − y)².
pub fn td3bc_critic_loss(q1: &[f64], q2: &[f64], targets: &[f64]) -> Result<f64, TrainError> {
    aligned(q1.len(), targets.len())?;
    aligned(q2.len(), targets.len())?;
    let n = targets.len() as f64;
    let mse = |q: &[f64]| q.iter().zip(targets).map(|(a, y)| (a - y) * (a - y)).sum::<f64>() / n;
    Ok(mse(q1) + mse(q2))
}

/// y = r + γ·min(Q̂'_1, Q̂'_2) for non-terminal transitions.
pub fn td3bc_target(r: f64, q1_next: f64, q2_next: f64, terminal: bool, gamma: f64) -> f64 {
    bellman_target(r, q1_next.min(q2_next), terminal, gamma)
}

/// −λ·mean Q̂(s, π(s)) + α·mean ‖π(s) − a‖², with λ = 1 unless `normalize`
/// is set, in which case the loss is −(α / mean|Q̂|)·mean Q̂ + mean ‖π(s) − a‖².
pub fn td3bc_actor_loss(
    q_pi: &[f64],
    pi: &[Vec<f64>],
    a: &[Vec<f64>],
    alpha: f64,
    normalize: bool,
) -> Result<f64, TrainError> {
    aligned(q_pi.len(), pi.len())?;
    aligned(q_pi.len(), a.len())?;
    let n = q_pi.len() as f64;
    let mean_q = q_pi.iter().sum::<f64>() / n;
    let bc = pi
        .iter()
        .zip(a)
        .map(|(p, b)| p.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
        .sum::<f64>()
        / n;
    Ok(if normalize {
        let lambda = alpha / (q_pi.iter().map(|q| q.abs()).sum::<f64>() / n).max(1e-12);
        -lambda * mean_q + bc
    } else {
        -mean_q + alpha * bc
    })
}

fn aligned(a: usize, b: usize) -> Result<(), TrainError> {
    if a != b || a == 0 {
        return Err(TrainError::Config(vec![format!("misaligned batch: {a} vs {b}")]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expectile_examples() {
        assert_eq!(expectile_loss(2.0, 0.5).unwrap(), 2.0);
        assert_eq!(expectile_loss(0.0, 0.3).unwrap(), 0.0);
        assert!((expectile_loss(-1.0, 0.7).unwrap() - 0.3).abs() < 1e-15);
        assert!((expectile_loss(1.0, 0.7).unwrap() - 0.7).abs() < 1e-15);
        assert!(expectile_loss(1.0, 1.0).is_err());
    }

    #[test]
    fn expectile_identity() {
        for i in 0..50 {
            let u = -3.0 + 0.13 * i as f64;
            for j in 1..10 {
                let tau = j as f64 / 10.0;
                let s = expectile_loss(u, tau).unwrap() + expectile_loss(-u, tau).unwrap();
                assert!((s - u * u).abs() <= 1e-12);
                let mirrored = expectile_loss(-u, 1.0 - tau).unwrap();
                assert!((expectile_loss(u, tau).unwrap() - mirrored).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn critic_loss_without_bootstrap_is_half_mse() {
        let q = [1.0, 2.0, -1.0];
        let r = [0.5, 2.5, 0.0];
        let y: Vec<f64> = r.iter().map(|&r| bellman_target(r, 123.0, false, 0.0)).collect();
        let mse = q.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 3.0;
        assert!((iql_critic_loss(&q, &y, 0.5).unwrap() - 0.5 * mse).abs() < 1e-15);
        assert_eq!(iql_critic_loss(&q, &q, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn awr_examples() {
        assert_eq!(iql_policy_loss(&[1.0, 2.0], &[1.0, 2.0], &[-0.5, -1.5], 3.0, 100.0).unwrap(), 1.0);
        let l = iql_policy_loss(&[0.5], &[0.0], &[-2.0], 2.0, 100.0).unwrap();
        assert!((l - std::f64::consts::E * 2.0).abs() < 1e-12);
        assert_eq!(awr_weight(10.0, 1.0, 100.0), 100.0);
        assert!(awr_weight(-50.0, 1.0, 100.0) > 0.0);
    }

    #[test]
    fn td3bc_examples() {
        assert_eq!(td3bc_target(1.0, 3.0, 2.0, false, 0.5), 2.0);
        assert_eq!(td3bc_target(1.0, 3.0, 2.0, true, 0.5), 1.0);
        assert_eq!(td3bc_critic_loss(&[1.0], &[3.0], &[2.0]).unwrap(), 2.0);
        let pi = vec![vec![0.5, 0.0]];
        let a = vec![vec![0.0, 0.0]];
        assert_eq!(td3bc_actor_loss(&[2.0], &pi, &a, 2.5, false).unwrap(), -2.0 + 2.5 * 0.25);
        assert_eq!(td3bc_actor_loss(&[2.0], &pi, &a, 0.0, false).unwrap(), -2.0);
        assert_eq!(td3bc_actor_loss(&[2.0], &a, &a, 2.5, false).unwrap(), -2.0);
        assert_eq!(td3bc_actor_loss(&[-2.0], &pi, &a, 2.5, true).unwrap(), 2.5 + 0.25);
    }
}
