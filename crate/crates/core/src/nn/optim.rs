//! Adam and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::{Matrix, NnError, Parameterized};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<P: Parameterized + ?Sized>(params: &P, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .tensors()
            .iter()
            .map(|t| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step<P: Parameterized + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &[Matrix],
    ) -> Result<(), NnError> {
        let mut tensors = params.tensors_mut();
        if tensors.len() != grads.len() || tensors.len() != self.first_moment.len() {
            return Err(NnError::Shape(format!(
                "optimizer: {} tensors, {} grads, {} moments",
                tensors.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for ((t, g), m) in tensors.iter().zip(grads).zip(&self.first_moment) {
            if t.shape() != g.shape() || t.shape() != m.shape() {
                return Err(NnError::Shape(format!(
                    "optimizer: tensor {:?} grad {:?}",
                    t.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, t) in tensors.iter_mut().enumerate() {
            let g = grads[i].as_slice();
            let m = self.first_moment[i].as_mut_slice();
            let v = self.second_moment[i].as_mut_slice();
            for (j, p) in t.as_mut_slice().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::frobenius_norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct W(Vec<Matrix>);
    impl Parameterized for W {
        fn tensors(&self) -> Vec<&Matrix> {
            self.0.iter().collect()
        }
        fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
            self.0.iter_mut().collect()
        }
        fn tensor_names(&self) -> Vec<String> {
            (0..self.0.len()).map(|i| format!("w{i}")).collect()
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = W(vec![Matrix::row_vector(&[1.0, -2.0])]);
        let mut opt = OptimizerState::new(&w, 0.1);
        opt.step(&mut w, &[Matrix::zeros(1, 2)]).unwrap();
        assert_eq!(w.0[0].as_slice(), &[1.0, -2.0]);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut w = W(vec![Matrix::scalar(1.0)]);
        let mut opt = OptimizerState::new(&w, 0.1);
        let g = Matrix::scalar(2.0 * w.0[0].item());
        opt.step(&mut w, &[g]).unwrap();
        assert!(w.0[0].item().abs() < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = 0.5 wᵀ A w - bᵀ w with A = diag(1, 3).
        let a = [1.0, 3.0];
        let b = [1.0, -2.0];
        let mut w = W(vec![Matrix::row_vector(&[4.0, 4.0])]);
        let mut opt = OptimizerState::new(&w, 0.05);
        let grad = |w: &W| {
            let x = w.0[0].as_slice();
            Matrix::row_vector(&[a[0] * x[0] - b[0], a[1] * x[1] - b[1]])
        };
        for _ in 0..2000 {
            let g = grad(&w);
            opt.step(&mut w, &[g]).unwrap();
        }
        let gn = grad(&w).frobenius_norm_sq().sqrt();
        assert!(gn < 1e-6, "gradient norm {gn}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut w = W(vec![Matrix::row_vector(&[1.0, -2.0])]);
        let mut opt = OptimizerState::new(&w, 0.1);
        assert!(opt.step(&mut w, &[Matrix::zeros(2, 1)]).is_err());
        assert!(opt.step(&mut w, &[]).is_err());
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![Matrix::row_vector(&[3.0, 4.0])];
        assert_eq!(clip_gradients(&mut g, 10.0), 5.0);
        assert_eq!(g[0].as_slice(), &[3.0, 4.0]);
        let mut g = vec![Matrix::row_vector(&[12.0, 16.0])];
        assert_eq!(clip_gradients(&mut g, 10.0), 20.0);
        assert_eq!(g[0].as_slice(), &[6.0, 8.0]);
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded_and_idempotent(
            xs in prop::collection::vec(-100.0f64..100.0, 1..20),
            ys in prop::collection::vec(-100.0f64..100.0, 1..20),
            max_norm in 0.01f64..50.0,
        ) {
            let mut g = vec![Matrix::row_vector(&xs), Matrix::column_vector(&ys)];
            clip_gradients(&mut g, max_norm);
            prop_assert!(global_norm(&g) <= max_norm + 1e-9);
            let once = g.clone();
            clip_gradients(&mut g, max_norm);
            for (a, b) in g.iter().zip(&once) {
                for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
                    prop_assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
                }
            }
        }
    }
}
