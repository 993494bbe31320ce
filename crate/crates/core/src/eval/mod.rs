//! Policy evaluation, Q-estimate accuracy, ablation grids and the local
//! least-squares probe.
//!
//! Every CSV written here starts with a `# {json}` metadata line.

mod ablate;
mod accuracy;
mod probe;
pub mod stats;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::mdp::{BehaviorPolicy, BehaviorSpec, Environment};
use crate::oracle::{finite_horizon_return, greedy_policy_table, uniform_policy_table, value_iteration, VI_MAX_ITERS, VI_TOL};
use crate::rng::{derive_seed, substream, streams};
use crate::train::{PolicyParams, TrainError};

pub use ablate::{ablate, evaluate_trained, AblationCell, AblationGrid, AblationTable, CellMetrics};
pub use accuracy::{critic_greedy_return, q_accuracy, q_accuracy_tabular, tabular_sample, QAccuracy, QPair};
pub use probe::{bound_trend_probe, ProbeConfig, ProbeRow, ProbeSummary};

/// Episodes used for Monte-Carlo references on continuous envs.
pub const REFERENCE_EPISODES: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mdp(#[from] crate::mdp::MdpError),
    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),
    #[error(transparent)]
    Critic(#[from] crate::critic::CriticError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
    #[error(transparent)]
    Train(Box<TrainError>),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Train(Box::new(e))
    }
}

/// Returns of the uniform policy and of the reference-optimal policy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct References {
    pub random: f64,
    pub optimal: f64,
    /// Exact finite-horizon values (tabular) rather than rollout means.
    pub exact: bool,
}

/// Tabular envs use exact finite-horizon returns of the uniform and
/// DP-greedy policies; continuous envs average rollouts of the uniform and
/// straight-to-goal controllers.
pub fn references(env: &Environment, seed: u64, episodes: usize) -> Result<References, EvalError> {
    if let Some(m) = env.tabular() {
        let q = value_iteration(m, VI_TOL, VI_MAX_ITERS)?;
        return Ok(References {
            random: finite_horizon_return(m, &uniform_policy_table(m), env.horizon()),
            optimal: finite_horizon_return(m, &greedy_policy_table(&q.greedy_actions()), env.horizon()),
            exact: true,
        });
    }
    let mc = |spec: BehaviorSpec, name: &str| -> Result<f64, EvalError> {
        let b = BehaviorPolicy::build(&spec, env)?;
        let s = derive_seed(seed, name, 0);
        let mut act_rng = substream(s, streams::POLICY_SAMPLING, 0);
        let eps = rollouts(env, episodes.max(1), s, |st| Ok(b.act(0, st, &mut act_rng)))?;
        Ok(stats::mean(&eps.iter().map(|e| e.ret).collect::<Vec<_>>()))
    };
    Ok(References {
        random: mc(BehaviorSpec::uniform(), "reference-random")?,
        optimal: mc(BehaviorSpec::epsilon_optimal(0.0), "reference-optimal")?,
        exact: false,
    })
}

/// 100·(ret − random)/(optimal − random); NaN when the references coincide.
pub fn normalized_score(ret: f64, refs: &References) -> f64 {
    let span = refs.optimal - refs.random;
    if span.abs() < 1e-12 {
        return f64::NAN;
    }
    100.0 * (ret - refs.random) / span
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub ret: f64,
    pub length: usize,
    pub terminal: bool,
}

/// Undiscounted rollouts up to the env horizon; episode i draws its
/// dynamics noise from substream i of `seed`.
pub fn rollouts(
    env: &Environment,
    n: usize,
    seed: u64,
    mut act: impl FnMut(&[f64]) -> Result<Vec<f64>, EvalError>,
) -> Result<Vec<EpisodeResult>, EvalError> {
    let mut out = Vec::with_capacity(n);
    for ep in 0..n {
        let mut rng = substream(seed, streams::ENV, ep as u64);
        let mut s = env.reset_with(&mut rng);
        let mut ret = 0.0;
        let mut length = 0;
        let mut terminal = false;
        while length < env.horizon() {
            let a = act(&s)?;
            let o = env.step_with(&s, &a, &mut rng)?;
            ret += o.reward;
            length += 1;
            if o.terminal {
                terminal = true;
                break;
            }
            s = o.next_state;
        }
        out.push(EpisodeResult {
            episode: ep,
            ret,
            length,
            terminal,
        });
    }
    Ok(out)
}

/// Rollouts of the policy's deterministic action.
pub fn rollout_returns(env: &Environment, policy: &PolicyParams, n: usize, seed: u64) -> Result<Vec<EpisodeResult>, EvalError> {
    rollouts(env, n, seed, |s| Ok(policy.greedy_one(s)?))
}

/// Exact finite-horizon return of the deterministic policy on a tabular env.
pub fn exact_policy_return(env: &Environment, policy: &PolicyParams) -> Result<Option<f64>, EvalError> {
    let Some(m) = env.tabular() else {
        return Ok(None);
    };
    let states: Vec<Vec<f64>> = (0..m.n_states).map(|s| m.embed(s)).collect();
    let actions = policy.greedy(&crate::nn::Matrix::from_rows(&states).map_err(TrainError::from)?)?;
    let table: Vec<usize> = actions.iter().map(|a| a[0] as usize).collect();
    Ok(Some(finite_horizon_return(m, &greedy_policy_table(&table), env.horizon())))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub seed: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_score: f64,
    /// Exact return and score of the deterministic policy (tabular only).
    pub exact_return: Option<f64>,
    pub exact_normalized_score: Option<f64>,
    /// Exact score of the critic-greedy policy argmax_a Q̂(s, a | Ω_s) (tabular).
    pub critic_greedy_normalized_score: Option<f64>,
    pub references: References,
    pub q_accuracy: Option<QAccuracySummary>,
    /// Mean coverage ratio of the contexts used for Q accuracy, if measured.
    pub coverage: Option<f64>,
    pub config_fingerprint: String,
    pub episodes: Vec<EpisodeResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QAccuracySummary {
    pub n: usize,
    pub spearman: f64,
    pub pearson: f64,
    pub mae: f64,
}

impl EvalReport {
    /// The exact score when available, the rollout score otherwise.
    pub fn score(&self) -> f64 {
        self.exact_normalized_score.unwrap_or(self.normalized_score)
    }

    pub fn episodes_csv(&self) -> String {
        let meta = json!({
            "kind": "eval_episodes",
            "n_episodes": self.n_episodes,
            "seed": self.seed,
            "reference_random": self.references.random,
            "reference_optimal": self.references.optimal,
            "config_fingerprint": self.config_fingerprint,
        });
        let rows = self
            .episodes
            .iter()
            .map(|e| format!("{},{},{},{}", e.episode, e.ret, e.length, e.terminal));
        csv_with_meta(&meta, "episode,return,length,terminal", rows)
    }
}

/// Rollout evaluation of `policy`, plus the exact score on tabular envs.
pub fn evaluate_policy(env: &Environment, policy: &PolicyParams, n_episodes: usize, seed: u64) -> Result<EvalReport, EvalError> {
    if n_episodes == 0 {
        return Err(EvalError::Invalid("n_episodes must be at least 1".into()));
    }
    let refs = references(env, seed, REFERENCE_EPISODES)?;
    let episodes = rollout_returns(env, policy, n_episodes, derive_seed(seed, streams::EVAL, 0))?;
    let rets: Vec<f64> = episodes.iter().map(|e| e.ret).collect();
    let mean_return = stats::mean(&rets);
    let exact_return = exact_policy_return(env, policy)?;
    Ok(EvalReport {
        n_episodes,
        seed,
        mean_return,
        std_return: stats::std_dev(&rets),
        normalized_score: normalized_score(mean_return, &refs),
        exact_normalized_score: exact_return.map(|r| normalized_score(r, &refs)),
        exact_return,
        critic_greedy_normalized_score: None,
        references: refs,
        q_accuracy: None,
        coverage: None,
        config_fingerprint: String::new(),
        episodes,
    })
}

pub fn csv_with_meta(meta: &serde_json::Value, header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = format!("# {meta}\n{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{make_env, MdpSpec};

    #[test]
    fn anchors_on_four_rooms() {
        let env = make_env(&MdpSpec::four_rooms()).unwrap();
        let refs = references(&env, 0, 10).unwrap();
        assert!(refs.exact && refs.optimal > refs.random);
        assert_eq!(normalized_score(refs.random, &refs), 0.0);
        assert_eq!(normalized_score(refs.optimal, &refs), 100.0);
        // Rollouts of the uniform policy land near 0.
        let b = BehaviorPolicy::build(&BehaviorSpec::uniform(), &env).unwrap();
        let mut rng = substream(1, "t", 0);
        let eps = rollouts(&env, 400, 3, |s| Ok(b.act(0, s, &mut rng))).unwrap();
        let m = stats::mean(&eps.iter().map(|e| e.ret).collect::<Vec<_>>());
        assert!(normalized_score(m, &refs).abs() < 15.0, "{}", normalized_score(m, &refs));
    }

    #[test]
    fn continuous_references_are_ordered() {
        let env = make_env(&MdpSpec::point_mass()).unwrap();
        let refs = references(&env, 0, 20).unwrap();
        assert!(!refs.exact && refs.optimal > refs.random);
    }
}
