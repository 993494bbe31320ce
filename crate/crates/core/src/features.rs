//! The bounded feature map φ(s, a) ∈ (−1, 1)^d.
//!
//! State and action are concatenated (actions one-hot for discrete spaces)
//! and fed through a ReLU MLP with layer norm, dropout and a tanh output, so
//! ‖φ‖₂ < √d for every input.

use rand::Rng;

use crate::mdp::ActionSpace;
use crate::nn::{Activation, Matrix, MlpParams, MlpSpec, NnError, Parameterized};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec {
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub hidden: Vec<usize>,
    pub d: usize,
    pub layer_norm: bool,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureParams {
    pub mlp: MlpParams,
    pub d: usize,
    pub state_dim: usize,
    pub action_space: ActionSpace,
}

impl FeatureSpec {
    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_space.encoded_dim()
    }

    pub fn mlp_spec(&self) -> MlpSpec {
        MlpSpec {
            input: self.input_dim(),
            hidden: self.hidden.clone(),
            output: self.d,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Tanh,
            layer_norm: self.layer_norm,
            dropout: self.dropout,
        }
    }
}

impl FeatureParams {
    pub fn init<R: Rng + ?Sized>(spec: &FeatureSpec, rng: &mut R) -> Self {
        Self {
            mlp: MlpParams::init(&spec.mlp_spec(), rng),
            d: spec.d,
            state_dim: spec.state_dim,
            action_space: spec.action_space,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_space.encoded_dim()
    }

    /// Appends the network input for (s, a) to `out`.
    pub fn encode_into(&self, s: &[f64], a: &[f64], out: &mut Vec<f64>) -> Result<(), NnError> {
        if s.len() != self.state_dim || a.len() != self.action_space.dim() {
            return Err(NnError::Shape(format!(
                "featurize expects state {} and action {}, got {} and {}",
                self.state_dim,
                self.action_space.dim(),
                s.len(),
                a.len()
            )));
        }
        if let ActionSpace::Discrete(n) = self.action_space {
            if !(a[0] >= 0.0 && (a[0] as usize) < n && a[0].fract() == 0.0) {
                return Err(NnError::Shape(format!("discrete action {} out of range", a[0])));
            }
        }
        out.extend_from_slice(s);
        self.action_space.encode(a, out);
        Ok(())
    }

    pub fn featurize(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut x = Vec::with_capacity(self.input_dim());
        self.encode_into(s, a, &mut x)?;
        self.mlp.forward_vec(&x)
    }

    /// Evaluation-mode features for encoded inputs (one per row).
    pub fn featurize_encoded(&self, inputs: &Matrix) -> Result<Matrix, NnError> {
        self.mlp.forward(inputs)
    }
}

impl Parameterized for FeatureParams {
    fn tensors(&self) -> Vec<&Matrix> {
        self.mlp.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.mlp.tensors_mut()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.mlp
            .tensor_names()
            .into_iter()
            .map(|n| format!("features.{n}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn spec(d: usize) -> FeatureSpec {
        FeatureSpec {
            state_dim: 3,
            action_space: ActionSpace::Discrete(4),
            hidden: vec![16, 16],
            d,
            layer_norm: true,
            dropout: 0.1,
        }
    }

    #[test]
    fn components_stay_inside_unit_interval_and_norm_bound_holds() {
        let mut rng = stream(5, "features");
        let p = FeatureParams::init(&spec(16), &mut rng);
        for _ in 0..10_000 {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let a = vec![rng.random_range(0..4) as f64];
            let phi = p.featurize(&s, &a).unwrap();
            assert!(phi.iter().all(|x| x.abs() < 1.0));
            assert!(phi.iter().map(|x| x * x).sum::<f64>().sqrt() <= 4.0);
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut p = FeatureParams::init(&spec(4), &mut stream(1, "f"));
        for t in p.tensors_mut() {
            t.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        }
        assert_eq!(p.featurize(&[1.0, 2.0, 3.0], &[2.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn shape_errors() {
        let p = FeatureParams::init(&spec(4), &mut stream(1, "f"));
        assert!(p.featurize(&[1.0], &[0.0]).is_err());
        assert!(p.featurize(&[1.0, 2.0, 3.0], &[7.0]).is_err());
    }
}
