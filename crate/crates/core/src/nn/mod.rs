//! Dense kernels, MLPs, reverse-mode gradients, Adam and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod tape;

use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use matrix::{dot, Matrix};
pub use mlp::{Activation, DenseLayer, MlpParams, MlpSpec, MlpVars};
pub use optim::{clip_gradients, global_norm, OptimizerState};
pub use tape::{CustomOp, Gradients, Tape, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("no gradient rule for primitive `{0}`")]
    Unsupported(&'static str),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Anything that owns an ordered list of trainable tensors.
pub trait Parameterized {
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;
    fn tensor_names(&self) -> Vec<String>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn named_tensors(&self) -> Vec<(String, Matrix)> {
        self.tensor_names()
            .into_iter()
            .zip(self.tensors().into_iter().cloned())
            .collect()
    }

    /// Overwrites tensors from a name-keyed list; every name must be present
    /// with a matching shape.
    fn load_named(&mut self, named: &[(String, Matrix)]) -> Result<(), NnError> {
        let names = self.tensor_names();
        for (name, t) in names.iter().zip(self.tensors_mut()) {
            let src = named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m)
                .ok_or_else(|| NnError::Format(format!("missing tensor `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(NnError::Shape(format!(
                    "tensor `{name}`: stored {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// `self ← (1 − rate)·self + rate·source`.
    fn polyak_from(&mut self, source: &Self, rate: f64) {
        let src: Vec<Matrix> = source.tensors().into_iter().cloned().collect();
        for (t, s) in self.tensors_mut().into_iter().zip(&src) {
            for (a, b) in t.as_mut_slice().iter_mut().zip(s.as_slice()) {
                *a = (1.0 - rate) * *a + rate * b;
            }
        }
    }
}
