use super::OracleError;

/// One context transition in raw form; the oracle derives r' itself.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTransition {
    pub phi: Vec<f64>,
    pub phi_next: Vec<f64>,
    pub r: f64,
    pub rtg: f64,
    pub rtg_next: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TdTrace {
    /// w₀ = 0, w₁, …, w_L.
    pub weights: Vec<Vec<f64>>,
    pub q_hat: f64,
}

/// Explicit in-context TD iterates:
/// w_{ℓ+1} = w_ℓ + (1/N)·C_ℓ·Σ_j (r'_j + γβ·w_ℓᵀφ'_j − w_ℓᵀφ_j)·φ_j
/// with r'_j = r_j + γ(1−β)·RTG_{s'_j} − (1−β)·RTG_{s_j}. `c_list[ℓ]` is
/// row-major d×d.
pub fn td_iterates(
    context: &[OracleTransition],
    query_phi: &[f64],
    c_list: &[Vec<Vec<f64>>],
    gamma: f64,
    beta_rtg: f64,
) -> Result<TdTrace, OracleError> {
    let d = query_phi.len();
    let n = context.len();
    if n == 0 {
        return Err(OracleError::Invalid("empty context".into()));
    }
    for (j, t) in context.iter().enumerate() {
        if t.phi.len() != d || t.phi_next.len() != d {
            return Err(OracleError::Dim(format!("context column {j} has wrong feature length")));
        }
    }
    for (l, c) in c_list.iter().enumerate() {
        if c.len() != d || c.iter().any(|row| row.len() != d) {
            return Err(OracleError::Dim(format!("C_{l} is not {d}x{d}")));
        }
    }
    let r_eff: Vec<f64> = context
        .iter()
        .map(|t| t.r + gamma * (1.0 - beta_rtg) * t.rtg_next - (1.0 - beta_rtg) * t.rtg)
        .collect();
    let mut w = vec![0.0; d];
    let mut weights = vec![w.clone()];
    for c in c_list {
        let mut g = vec![0.0; d];
        for (j, t) in context.iter().enumerate() {
            let mut next_val = 0.0;
            let mut cur_val = 0.0;
            for i in 0..d {
                next_val += w[i] * t.phi_next[i];
                cur_val += w[i] * t.phi[i];
            }
            let delta = r_eff[j] + gamma * beta_rtg * next_val - cur_val;
            for i in 0..d {
                g[i] += delta * t.phi[i];
            }
        }
        let mut new_w = w.clone();
        for i in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += c[i][k] * g[k];
            }
            new_w[i] += acc / n as f64;
        }
        w = new_w;
        weights.push(w.clone());
    }
    let q_hat = (0..d).map(|i| query_phi[i] * w[i]).sum();
    Ok(TdTrace { weights, q_hat })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_c_gives_zero_estimate() {
        let ctx = vec![OracleTransition {
            phi: vec![0.3, -0.2],
            phi_next: vec![0.1, 0.4],
            r: 2.0,
            rtg: 1.0,
            rtg_next: 0.5,
        }];
        let c = vec![vec![vec![0.0; 2]; 2]; 3];
        let t = td_iterates(&ctx, &[1.0, 1.0], &c, 0.9, 0.5).unwrap();
        assert_eq!(t.q_hat, 0.0);
        assert_eq!(t.weights.len(), 4);
    }

    #[test]
    fn single_step_hand_expansion() {
        let ctx = vec![OracleTransition {
            phi: vec![1.0, 0.0],
            phi_next: vec![0.0, 0.0],
            r: 1.0,
            rtg: 0.0,
            rtg_next: 0.0,
        }];
        // N = 1, C₀ = N·I.
        let c = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]];
        let t = td_iterates(&ctx, &[0.5, 0.0], &c, 0.9, 1.0).unwrap();
        assert_eq!(t.weights[1], vec![1.0, 0.0]);
        assert_eq!(t.q_hat, 0.5);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let ctx = vec![OracleTransition {
            phi: vec![1.0],
            phi_next: vec![0.0, 0.0],
            r: 1.0,
            rtg: 0.0,
            rtg_next: 0.0,
        }];
        assert!(td_iterates(&ctx, &[0.5, 0.0], &[], 0.9, 1.0).is_err());
    }
}
