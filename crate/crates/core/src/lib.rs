//! In-context compositional Q-learning on synthetic MDPs.
//!
//! Local Q-functions are inferred from retrieved transitions by a structured
//! linear-attention stack whose forward pass performs TD/SARSA updates on a
//! context-dependent weight vector. Tabular environments come with exact
//! dynamic-programming oracles, so every estimate can be checked.

pub mod cli;
pub mod critic;
pub mod eval;
pub mod features;
pub mod kv;
pub mod mdp;
pub mod nn;
pub mod oracle;
pub mod retrieval;
pub mod rng;
pub mod train;
pub mod verify;
