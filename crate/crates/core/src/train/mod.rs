//! Offline training of the in-context critic with IQL or TD3+BC policy
//! extraction.
//!
//! Every step draws its randomness from per-step substreams of the root
//! seed (batch, retrieval, policy samples, dropout), so a run resumed from a
//! checkpoint continues bit-identically.

mod config;
mod losses;
mod policy;
mod rows;
mod trainer;

use thiserror::Error;

pub use config::{TrainConfig, Variant};
pub use losses::{
    awr_weight, bellman_target, expectile_loss, iql_critic_loss, iql_policy_loss, td3bc_actor_loss,
    td3bc_critic_loss, td3bc_target,
};
pub use policy::{argmax, PolicyKind, PolicyParams, PolicyVars, LOG_STD_MAX, LOG_STD_MIN};
pub use rows::{GlobalContext, LocalRows, RowCatalog};
pub use trainer::{
    train, IqlTargets, LossEval, MetricsRow, StepBatch, StepGradCheck, TrainOutcome, TrainState, Trainer, METRICS_COLUMNS,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Kv(#[from] crate::kv::KvError),
    #[error(transparent)]
    Critic(#[from] crate::critic::CriticError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Mdp(#[from] crate::mdp::MdpError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),
    #[error(transparent)]
    Eval(#[from] Box<crate::eval::EvalError>),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize, dump: Box<serde_json::Value> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
}

impl From<crate::eval::EvalError> for TrainError {
    fn from(e: crate::eval::EvalError) -> Self {
        TrainError::Eval(Box::new(e))
    }
}
