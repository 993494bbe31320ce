use rayon::prelude::*;
use serde_json::json;

use super::{
    critic_greedy_return, csv_with_meta, evaluate_policy, normalized_score, q_accuracy_tabular, stats, tabular_sample, EvalError, EvalReport, QAccuracy};
use crate::mdp::{make_env, TransitionDataset};
use crate::oracle::{value_iteration, VI_MAX_ITERS, VI_TOL};
use crate::retrieval::{RetrievalIndex, Strategy};
use crate::train::{train, TrainConfig, TrainState};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub context: Vec<usize>,
    pub layers: Vec<usize>,
    pub retrieval: Vec<Strategy>,
}

impl AblationGrid {
    pub fn single(config: &TrainConfig) -> Self {
        Self {
            context: vec![config.context],
            layers: vec![config.layers],
            retrieval: vec![config.retrieval],
        }
    }

    pub fn cells(&self) -> Vec<(usize, usize, Strategy)> {
        let mut out = Vec::new();
        for &c in &self.context {
            for &l in &self.layers {
                for &r in &self.retrieval {
                    out.push((c, l, r));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellMetrics {
    /// Exact normalized score on tabular envs, rollout score otherwise.
    pub score: f64,
    pub mean_return: f64,
    pub normalized_score: f64,
    pub exact_normalized_score: Option<f64>,
    pub spearman: Option<f64>,
    pub mae: Option<f64>,
    pub critic_greedy_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub context: usize,
    pub layers: usize,
    pub retrieval: Strategy,
    pub seed: u64,
    pub result: Result<CellMetrics, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

/// Evaluation of a trained state as `eval` reports it: rollouts of the
/// policy alone, plus Q accuracy against DP on tabular envs.
pub fn evaluate_trained(
    config: &TrainConfig,
    dataset: &TransitionDataset,
    state: &TrainState,
) -> Result<(EvalReport, Option<QAccuracy>), EvalError> {
    let env = make_env(&config.env)?;
    let mut report = evaluate_policy(&env, &state.policy, config.eval_episodes.max(1), config.seed)?;
    report.config_fingerprint = config.fingerprint();
    let acc = match env.tabular() {
        Some(m) => {
            let oracle = value_iteration(m, VI_TOL, VI_MAX_ITERS)?;
            let index = RetrievalIndex::build(dataset, config.metric);
            let sample = tabular_sample(&env, dataset, None, config.seed)?;
            let acc = q_accuracy_tabular(&state.critics[0], dataset, &index, config.retrieval, &env, &oracle, &sample, config.seed)?;
            report.q_accuracy = Some(acc.summary());
            let greedy = critic_greedy_return(&state.critics[0], dataset, &index, config.retrieval, &env, config.seed)?;
            report.critic_greedy_normalized_score = Some(normalized_score(greedy, &report.references));
            Some(acc)
        }
        None => None,
    };
    Ok((report, acc))
}

fn run_cell(config: &TrainConfig, dataset: &TransitionDataset) -> Result<CellMetrics, EvalError> {
    let outcome = train(config, dataset, None)?;
    let (report, acc) = evaluate_trained(config, dataset, &outcome.state)?;
    Ok(CellMetrics {
        score: report.score(),
        mean_return: report.mean_return,
        normalized_score: report.normalized_score,
        exact_normalized_score: report.exact_normalized_score,
        spearman: acc.as_ref().map(|a| a.spearman),
        mae: acc.as_ref().map(|a| a.mae),
        critic_greedy_score: report.critic_greedy_normalized_score,
    })
}

/// One train+eval per (cell, seed). `datasets` pairs each seed with its
/// dataset. Failures are recorded per cell and never abort the grid.
pub fn ablate(base: &TrainConfig, datasets: &[(u64, TransitionDataset)], grid: &AblationGrid) -> Result<AblationTable, EvalError> {
    let cells = grid.cells();
    if cells.is_empty() || datasets.is_empty() {
        return Err(EvalError::Invalid("ablation grid and seed list must be nonempty".into()));
    }
    let jobs: Vec<(usize, usize, Strategy, u64, &TransitionDataset)> = cells
        .iter()
        .flat_map(|&(c, l, r)| datasets.iter().map(move |(s, d)| (c, l, r, *s, d)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(context, layers, retrieval, seed, dataset)| {
            let mut cfg = base.clone();
            cfg.context = context;
            cfg.layers = layers;
            cfg.retrieval = retrieval;
            cfg.seed = seed;
            AblationCell {
                context,
                layers,
                retrieval,
                seed,
                result: run_cell(&cfg, dataset).map_err(|e| e.to_string()),
            }
        })
        .collect();
    Ok(AblationTable { cells })
}

impl AblationTable {
    /// Per-seed scores of one cell, in seed order.
    pub fn scores(&self, context: usize, layers: usize, retrieval: Strategy) -> Vec<(u64, Option<f64>)> {
        self.cells
            .iter()
            .filter(|c| c.context == context && c.layers == layers && c.retrieval == retrieval)
            .map(|c| (c.seed, c.result.as_ref().ok().map(|m| m.score)))
            .collect()
    }

    pub fn runs_csv(&self, meta: serde_json::Value) -> String {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        let rows = self.cells.iter().map(|c| match &c.result {
            Ok(m) => format!(
                "{},{},{},{},ok,{},{},{},{},{},{},{},",
                c.context,
                c.layers,
                c.retrieval,
                c.seed,
                m.score,
                m.mean_return,
                m.normalized_score,
                opt(m.exact_normalized_score),
                opt(m.spearman),
                opt(m.mae),
                opt(m.critic_greedy_score)
            ),
            Err(e) => format!(
                "{},{},{},{},error,,,,,,,,{}",
                c.context,
                c.layers,
                c.retrieval,
                c.seed,
                e.replace([',', '\n'], ";")
            ),
        });
        csv_with_meta(
            &json!({"kind": "ablation_runs", "extra": meta}),
            "context,layers,retrieval,seed,status,score,mean_return,normalized_score,exact_normalized_score,spearman,mae,critic_greedy_score,error",
            rows,
        )
    }

    /// Mean and sample std of the score per cell over successful seeds.
    pub fn summary_csv(&self, meta: serde_json::Value) -> String {
        let mut keys: Vec<(usize, usize, Strategy)> = Vec::new();
        for c in &self.cells {
            if !keys.contains(&(c.context, c.layers, c.retrieval)) {
                keys.push((c.context, c.layers, c.retrieval));
            }
        }
        let rows = keys.into_iter().map(|(c, l, r)| {
            let scores = self.scores(c, l, r);
            let ok: Vec<f64> = scores.iter().filter_map(|s| s.1).collect();
            format!(
                "{c},{l},{r},{},{},{},{}",
                ok.len(),
                scores.len() - ok.len(),
                stats::mean(&ok),
                stats::std_dev(&ok)
            )
        });
        csv_with_meta(
            &json!({"kind": "ablation_summary", "extra": meta}),
            "context,layers,retrieval,n_ok,n_failed,score_mean,score_std",
            rows,
        )
    }
}
