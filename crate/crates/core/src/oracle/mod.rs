//! Brute-force reference implementations.
//!
//! Everything here is written with plain loops over `Vec<f64>` and shares no
//! numerical code with the critic, retrieval or training modules, so that
//! cross-checks against them mean something.

mod dp;
mod mc;
mod td;
mod topk;

use thiserror::Error;

pub use dp::{
    finite_horizon_return, greedy_policy_table, policy_evaluation, uniform_policy_table,
    value_iteration, PolicyTable, QTable,
};
pub use mc::{mc_q_estimate, McEstimate};
pub use td::{td_iterates, OracleTransition, TdTrace};
pub use topk::{brute_topk, brute_topk_high_reward, oracle_distance};

/// Default value-iteration tolerance.
pub const VI_TOL: f64 = 1e-10;
pub const VI_MAX_ITERS: usize = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("value iteration did not converge in {iters} sweeps (residual {residual:e})")]
    NonConvergence { iters: usize, residual: f64 },
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}
