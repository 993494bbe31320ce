//! The in-context critic: prompt construction and the linear-attention stack
//! whose forward pass runs TD updates on a context-dependent weight vector.

pub mod dense;
pub mod params;
pub mod prompt;
pub mod stack;

use thiserror::Error;

use crate::nn::NnError;

pub use dense::{dense_forward, g_matrix, lin_attn_layer, mask_matrix, p_matrix};
pub use params::{
    build_prompt, c_histogram_csv, context_plan, critic_forward, critic_forward_batch, forward_columns,
    CriticParams, CriticSpec, CriticVars, InputRows, C_INIT_NOISE, C_INIT_SCALE,
};
pub use prompt::{assemble_prompt, dense_prompt, effective_reward, PromptColumns, PromptMatrix};
pub use stack::{stack_forward, ContextSpec, Readout, RowRef, StackOp, StackOutput, StackPlan};

#[derive(Debug, Error)]
pub enum CriticError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid critic input: {0}")]
    Invalid(String),
    #[error("context is empty")]
    EmptyContext,
    #[error("RTG fields are required when beta_rtg < 1")]
    MissingRtg,
    #[error(transparent)]
    Nn(#[from] NnError),
}
