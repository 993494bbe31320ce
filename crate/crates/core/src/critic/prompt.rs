//! Prompt matrices Z₀ of shape (2d+1)×(N+1).

use super::CriticError;
use crate::nn::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptMatrix {
    pub z: Matrix,
    pub n: usize,
    pub d: usize,
    pub gamma: f64,
    pub beta_rtg: f64,
}

/// Raw context columns in feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptColumns<'a> {
    pub phi: &'a [Vec<f64>],
    /// φ(s', a'); all zeros for terminal transitions.
    pub phi_next: &'a [Vec<f64>],
    pub rewards: &'a [f64],
    /// (RTG_s, RTG_s') per column; required when β_rtg < 1.
    pub rtg: Option<(&'a [f64], &'a [f64])>,
}

/// r' = r + γ(1−β)·RTG_{s'} − (1−β)·RTG_s.
pub fn effective_reward(r: f64, rtg: f64, rtg_next: f64, gamma: f64, beta_rtg: f64) -> f64 {
    r + gamma * (1.0 - beta_rtg) * rtg_next - (1.0 - beta_rtg) * rtg
}

/// Rows 0..d hold φ_j, rows d..2d hold γβ·φ'_j, row 2d holds r'_j; the query
/// column carries φ_query and zeros.
pub fn assemble_prompt(
    cols: &PromptColumns<'_>,
    query_phi: &[f64],
    gamma: f64,
    beta_rtg: f64,
) -> Result<PromptMatrix, CriticError> {
    if !(0.0..=1.0).contains(&beta_rtg) {
        return Err(CriticError::Invalid(format!("beta_rtg {beta_rtg} outside [0, 1]")));
    }
    let n = cols.phi.len();
    let d = query_phi.len();
    if n == 0 {
        return Err(CriticError::EmptyContext);
    }
    if cols.phi_next.len() != n || cols.rewards.len() != n {
        return Err(CriticError::Shape("context columns have different lengths".into()));
    }
    if cols.phi.iter().chain(cols.phi_next).any(|v| v.len() != d) {
        return Err(CriticError::Shape(format!("feature vectors must have length {d}")));
    }
    let r_eff: Vec<f64> = match cols.rtg {
        Some((rtg, rtg_next)) => {
            if rtg.len() != n || rtg_next.len() != n {
                return Err(CriticError::Shape("RTG columns have the wrong length".into()));
            }
            (0..n)
                .map(|j| effective_reward(cols.rewards[j], rtg[j], rtg_next[j], gamma, beta_rtg))
                .collect()
        }
        None if beta_rtg < 1.0 => return Err(CriticError::MissingRtg),
        None => cols.rewards.to_vec(),
    };
    let scale = gamma * beta_rtg;
    let mut z = Matrix::zeros(2 * d + 1, n + 1);
    for j in 0..n {
        for i in 0..d {
            z.set(i, j, cols.phi[j][i]);
            z.set(d + i, j, scale * cols.phi_next[j][i]);
        }
        z.set(2 * d, j, r_eff[j]);
    }
    for i in 0..d {
        z.set(i, n, query_phi[i]);
    }
    Ok(PromptMatrix {
        z,
        n,
        d,
        gamma,
        beta_rtg,
    })
}

/// The dense-reward prompt: rows φ, γ·φ', r.
pub fn dense_prompt(
    phi: &[Vec<f64>],
    phi_next: &[Vec<f64>],
    rewards: &[f64],
    query_phi: &[f64],
    gamma: f64,
) -> Result<PromptMatrix, CriticError> {
    let n = phi.len();
    let d = query_phi.len();
    if n == 0 {
        return Err(CriticError::EmptyContext);
    }
    if phi_next.len() != n || rewards.len() != n {
        return Err(CriticError::Shape("context columns have different lengths".into()));
    }
    let mut z = Matrix::zeros(2 * d + 1, n + 1);
    for j in 0..n {
        for i in 0..d {
            z.set(i, j, phi[j][i]);
            z.set(d + i, j, gamma * phi_next[j][i]);
        }
        z.set(2 * d, j, rewards[j]);
    }
    for i in 0..d {
        z.set(i, n, query_phi[i]);
    }
    Ok(PromptMatrix {
        z,
        n,
        d,
        gamma,
        beta_rtg: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_reward_example() {
        let r = effective_reward(1.0, 4.0, 3.0, 0.9, 0.5);
        assert!((r - 0.35).abs() < 1e-15);
        let phi = vec![vec![1.0, 0.0]];
        let next = vec![vec![0.5, 0.5]];
        let p = assemble_prompt(
            &PromptColumns {
                phi: &phi,
                phi_next: &next,
                rewards: &[1.0],
                rtg: Some((&[4.0], &[3.0])),
            },
            &[0.2, 0.3],
            0.9,
            0.5,
        )
        .unwrap();
        assert!((p.z.get(4, 0) - 0.35).abs() < 1e-15);
        assert_eq!(p.z.get(2, 0), 0.45 * 0.5);
        assert_eq!(p.z.get(4, 1), 0.0);
        assert_eq!(p.z.get(1, 1), 0.3);
    }

    #[test]
    fn beta_one_gives_raw_rewards_and_gamma_scaling() {
        let phi = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let next = vec![vec![0.5, 0.6], vec![0.7, 0.8]];
        let rewards = [2.0, -1.0];
        let p = assemble_prompt(
            &PromptColumns {
                phi: &phi,
                phi_next: &next,
                rewards: &rewards,
                rtg: Some((&[5.0, 1.0], &[3.0, 0.0])),
            },
            &[1.0, 1.0],
            0.9,
            1.0,
        )
        .unwrap();
        let dense = dense_prompt(&phi, &next, &rewards, &[1.0, 1.0], 0.9).unwrap();
        assert_eq!(p.z, dense.z);
    }

    #[test]
    fn zero_rewards_and_rtgs_give_zero_reward_row() {
        let phi = vec![vec![0.1]; 3];
        let p = assemble_prompt(
            &PromptColumns {
                phi: &phi,
                phi_next: &phi,
                rewards: &[0.0; 3],
                rtg: Some((&[0.0; 3], &[0.0; 3])),
            },
            &[1.0],
            0.99,
            0.3,
        )
        .unwrap();
        assert!((0..4).all(|j| p.z.get(2, j) == 0.0));
    }

    #[test]
    fn missing_rtg_is_an_error_below_beta_one() {
        let phi = vec![vec![0.1]];
        let cols = PromptColumns {
            phi: &phi,
            phi_next: &phi,
            rewards: &[1.0],
            rtg: None,
        };
        assert!(matches!(
            assemble_prompt(&cols, &[1.0], 0.9, 0.5),
            Err(CriticError::MissingRtg)
        ));
        assert!(assemble_prompt(&cols, &[1.0], 0.9, 1.0).is_ok());
    }
}
