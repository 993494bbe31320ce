//! Exact transition retrieval: state-similar, random and high-reward contexts.
//!
//! The index is a dense row-major state matrix scanned exhaustively. Ties at
//! equal distance go to the lower row, which makes every query deterministic.

mod index;
mod neighbors;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use index::{coverage_ratio, RetrievalIndex, RetrievedContext};
pub use neighbors::{precompute_neighbors, NeighborTable, SIDECAR_MAGIC};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("k = {k} is outside 1..={size}")]
    BadK { k: usize, size: usize },
    #[error("k_pool = {k_pool} must satisfy k ({k}) ≤ k_pool ≤ index size ({size})")]
    BadPool { k: usize, k_pool: usize, size: usize },
    #[error("query has dimension {got}, index has {want}")]
    Dim { got: usize, want: usize },
    #[error("ideal set is empty")]
    EmptyIdeal,
    #[error("unknown {what} `{value}`")]
    Parse { what: &'static str, value: String },
    #[error("neighbor sidecar: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    L2,
    /// 1 − cosine similarity; zero vectors are at distance 1 from everything.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    StateSimilar,
    Random,
    /// The `k` highest-reward transitions among the `pool` nearest.
    HighReward { pool: usize },
}

impl FromStr for Metric {
    type Err = RetrievalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(RetrievalError::Parse {
                what: "metric",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L2 => "l2",
            Metric::Cosine => "cosine",
        })
    }
}

/// `state-similar`, `random`, or `high-reward[:pool]` (pool defaults to 60).
impl FromStr for Strategy {
    type Err = RetrievalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || RetrievalError::Parse {
            what: "retrieval strategy",
            value: s.into(),
        };
        match s.split_once(':') {
            None => match s {
                "state-similar" => Ok(Strategy::StateSimilar),
                "random" => Ok(Strategy::Random),
                "high-reward" => Ok(Strategy::HighReward { pool: 60 }),
                _ => Err(err()),
            },
            Some(("high-reward", pool)) => Ok(Strategy::HighReward {
                pool: pool.parse().map_err(|_| err())?,
            }),
            Some(_) => Err(err()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::StateSimilar => f.write_str("state-similar"),
            Strategy::Random => f.write_str("random"),
            Strategy::HighReward { pool } => write!(f, "high-reward:{pool}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for s in ["state-similar", "random", "high-reward:60", "high-reward:7"] {
            assert_eq!(s.parse::<Strategy>().unwrap().to_string(), s);
        }
        assert_eq!(
            "high-reward".parse::<Strategy>().unwrap(),
            Strategy::HighReward { pool: 60 }
        );
        assert!("nearest".parse::<Strategy>().is_err());
        assert_eq!("cosine".parse::<Metric>().unwrap(), Metric::Cosine);
    }
}
