//! Literal matrix form of the linear-attention layer. Quadratic in N and
//! only used as a reference for the structured kernel.

use super::{CriticError, PromptMatrix};
use crate::nn::Matrix;

/// P: a single 1 in the bottom-right corner of a (2d+1)×(2d+1) matrix.
pub fn p_matrix(d: usize) -> Matrix {
    let mut p = Matrix::zeros(2 * d + 1, 2 * d + 1);
    p.set(2 * d, 2 * d, 1.0);
    p
}

/// G = [[−Cᵀ, Cᵀ, 0], [0, 0, 0], [0, 0, 0]].
pub fn g_matrix(c: &Matrix) -> Matrix {
    let d = c.rows();
    let mut g = Matrix::zeros(2 * d + 1, 2 * d + 1);
    for i in 0..d {
        for j in 0..d {
            g.set(i, j, -c.get(j, i));
            g.set(i, d + j, c.get(j, i));
        }
    }
    g
}

/// M = diag(I_N, 0).
pub fn mask_matrix(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n + 1, n + 1);
    for i in 0..n {
        m.set(i, i, 1.0);
    }
    m
}

/// Z + (1/N)·P Z M (Zᵀ G Z).
pub fn lin_attn_layer(z: &Matrix, c: &Matrix, n: usize) -> Result<Matrix, CriticError> {
    let d = c.rows();
    if c.cols() != d || z.rows() != 2 * d + 1 || z.cols() != n + 1 {
        return Err(CriticError::Shape(format!(
            "layer expects Z {}x{} and C {d}x{d}, got Z {:?} and C {:?}",
            2 * d + 1,
            n + 1,
            z.shape(),
            c.shape()
        )));
    }
    let pzm = p_matrix(d).matmul(z)?.matmul(&mask_matrix(n))?;
    let ztgz = z.t_matmul(&g_matrix(c).matmul(z)?)?;
    let mut out = pzm.matmul(&ztgz)?;
    out.scale_in_place(1.0 / n as f64);
    Ok(z.add(&out)?)
}

/// Stacks the literal layers and reads Q̂ = −Z_L[2d, N].
pub fn dense_forward(prompt: &PromptMatrix, cs: &[Matrix]) -> Result<f64, CriticError> {
    let mut z = prompt.z.clone();
    for c in cs {
        z = lin_attn_layer(&z, c, prompt.n)?;
    }
    Ok(-z.get(2 * prompt.d, prompt.n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::{assemble_prompt, PromptColumns};

    #[test]
    fn zero_c_is_identity() {
        let z = Matrix::from_vec(5, 3, (0..15).map(|x| x as f64 * 0.1).collect()).unwrap();
        assert_eq!(lin_attn_layer(&z, &Matrix::zeros(2, 2), 2).unwrap(), z);
    }

    #[test]
    fn zero_rewards_leave_the_query_cell_at_zero() {
        let phi = vec![vec![0.3, -0.5], vec![0.9, 0.1]];
        let next = vec![vec![0.2, 0.2], vec![-0.4, 0.7]];
        let p = assemble_prompt(
            &PromptColumns {
                phi: &phi,
                phi_next: &next,
                rewards: &[0.0, 0.0],
                rtg: None,
            },
            &[1.0, -1.0],
            0.9,
            1.0,
        )
        .unwrap();
        let c = Matrix::from_vec(2, 2, vec![0.7, 0.2, -0.3, 1.1]).unwrap();
        let out = lin_attn_layer(&p.z, &c, 2).unwrap();
        assert_eq!(out.get(4, 2), 0.0);
    }

    #[test]
    fn g_has_the_expected_blocks() {
        let c = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = g_matrix(&c);
        assert_eq!(g.get(0, 1), -3.0);
        assert_eq!(g.get(0, 3), 3.0);
        assert_eq!(g.get(1, 2), 2.0);
        assert!((2..5).all(|r| (0..5).all(|k| g.get(r, k) == 0.0)));
    }
}
