//! Synthetic MDPs, behavior policies and offline dataset generation.

mod behavior;
mod dataset;
mod env;
pub mod spec;
mod tabular;

use thiserror::Error;

pub use behavior::{BehaviorComponent, BehaviorKind, BehaviorPolicy, BehaviorSpec};
pub use dataset::{
    compute_rtg, generate_dataset, DatasetHeader, Episode, TrajectoryBatch, Transition,
    TransitionDataset, RTG_GAMMA,
};
pub use env::{in_disk, make_env, quadrant, ActionSpace, Environment, StepOutcome};
pub use spec::{ChainParams, ExplicitTable, FourRoomsParams, MdpKind, MdpSpec, PointMassParams};
pub use tabular::{four_rooms_cells, room_of, TabularModel, GRID_MOVES};

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("invalid MDP spec: {0}")]
    InvalidSpec(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("invalid behavior spec `{0}`")]
    Behavior(String),
    #[error("episode has no steps")]
    EmptyEpisode,
    #[error("dataset format: {0}")]
    Format(String),
    #[error("oracle failure: {0}")]
    Oracle(String),
    #[error(transparent)]
    Config(#[from] crate::kv::KvError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
