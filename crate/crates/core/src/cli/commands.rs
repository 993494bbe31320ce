use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde_json::json;

use super::manifest::{write_file, write_outputs};
use super::{
    read_outputs, AblateArgs, CliError, Command, EvalArgs, GenDataArgs, QdumpArgs, ReplayArgs, RunManifest, TrainArgs,
    VerifyArgs,
};
use crate::critic::Readout;
use crate::eval::{
    ablate as run_ablation, evaluate_trained, q_accuracy, q_accuracy_tabular, tabular_sample, AblationGrid, QAccuracy,
};
use crate::kv::FlatConfig;
use crate::mdp::{generate_dataset, make_env, BehaviorPolicy, BehaviorSpec, Environment, MdpSpec, TransitionDataset};
use crate::nn::checkpoint::Checkpoint;
use crate::oracle::{mc_q_estimate, value_iteration, VI_MAX_ITERS, VI_TOL};
use crate::retrieval::{RetrievalIndex, RetrievedContext, Strategy};
use crate::rng::{derive_seed, streams, substream};
use crate::train::{TrainConfig, TrainError, TrainState, Trainer, METRICS_COLUMNS};
use crate::verify::{run_verify, VerifyOptions};

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<TransitionDataset, CliError> {
    TransitionDataset::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| invalid(format!("checkpoint {}: {e}", path.display())))
}

fn checkpoint_config(ckpt: &Checkpoint, path: &Path) -> Result<FlatConfig, CliError> {
    let text = ckpt.meta["config"]
        .as_str()
        .ok_or_else(|| invalid(format!("checkpoint {} carries no config", path.display())))?;
    FlatConfig::parse(text).map_err(invalid)
}

fn json_text(v: &impl serde::Serialize) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(runtime)
}

/// Config file (or `fallback`), then `--set`, then dedicated flags.
fn resolve_config(
    path: Option<&Path>,
    fallback: Option<FlatConfig>,
    set: &[String],
    flags: &[(&str, Option<String>)],
) -> Result<TrainConfig, CliError> {
    let mut cfg = match path {
        Some(p) => FlatConfig::parse(&read_text(p)?).map_err(invalid)?,
        None => fallback.unwrap_or_default(),
    };
    cfg.apply_overrides(set).map_err(invalid)?;
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v);
        }
    }
    Ok(TrainConfig::from_config(&cfg)?)
}

pub fn gen_data(cmd: &Command, a: &GenDataArgs) -> Result<(), CliError> {
    let env_path = Path::new(&a.env);
    let mut cfg = if env_path.is_file() {
        FlatConfig::parse(&read_text(env_path)?).map_err(invalid)?
    } else {
        let mut c = FlatConfig::new();
        c.set("family", &a.env);
        c
    };
    cfg.apply_overrides(&a.set).map_err(invalid)?;
    let spec = MdpSpec::from_config(&cfg).map_err(invalid)?;
    let behavior: BehaviorSpec = a.behavior.parse().map_err(invalid)?;
    if a.episodes == 0 {
        return Err(invalid("--episodes must be at least 1"));
    }
    let env = make_env(&spec).map_err(invalid)?;
    let policy = BehaviorPolicy::build(&behavior, &env).map_err(invalid)?;

    let mut manifest = RunManifest::new(cmd);
    manifest.config = Some(format!("{}behavior={behavior}\n", spec.to_config_text()));
    manifest.seeds.insert("data".into(), a.seed);
    manifest.outputs = vec!["dataset.jsonl".into()];
    if env_path.is_file() {
        manifest = manifest.input(env_path)?;
    }
    manifest.write(&a.out)?;

    let data = generate_dataset(&env, &policy, a.episodes, a.max_steps.unwrap_or(spec.horizon), a.seed).map_err(runtime)?;
    data.save(&a.out.join("dataset.jsonl")).map_err(runtime)?;
    write_outputs(&a.out, &[PathBuf::from("dataset.jsonl")])?;
    println!(
        "wrote {} transitions ({} episodes) to {}",
        data.len(),
        a.episodes,
        a.out.join("dataset.jsonl").display()
    );
    Ok(())
}

pub fn train(cmd: &Command, a: &TrainArgs) -> Result<(), CliError> {
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let fallback = match (&resume, &a.resume) {
        (Some(c), Some(p)) => Some(checkpoint_config(c, p)?),
        _ => None,
    };
    let config = resolve_config(
        a.config.as_deref(),
        fallback,
        &a.set,
        &[("seed", a.seed.map(|s| s.to_string())), ("steps", a.steps.map(|s| s.to_string()))],
    )?;
    let data = load_dataset(&a.data)?;
    let env = make_env(&config.env).map_err(invalid)?;
    let state = resume.as_ref().map(|c| TrainState::from_checkpoint(c, &config, &env)).transpose()?;

    let mut manifest = RunManifest::new(cmd).input(&a.data)?;
    for p in [&a.config, &a.resume].into_iter().flatten() {
        manifest = manifest.input(p)?;
    }
    manifest.config = Some(config.to_text());
    manifest.dataset_hashes.push(data.hash());
    manifest.seeds.insert("root".into(), config.seed);
    manifest.outputs = vec!["config.txt".into(), "metrics.csv".into(), "checkpoints/".into(), "final.ckpt".into()];
    manifest.write(&a.out)?;
    write_file(&a.out.join("config.txt"), config.to_text().as_bytes())?;

    let mut trainer = Trainer::new(config.clone(), data, state)?;
    let ckpt_dir = a.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(runtime)?;
    let metrics_path = a.out.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(runtime)?);
    writeln!(metrics, "{METRICS_COLUMNS}").map_err(runtime)?;
    let mut written = vec![PathBuf::from("config.txt"), PathBuf::from("metrics.csv")];
    let result = trainer.run(|row, state| {
        let io = |e: std::io::Error| TrainError::Checkpoint(e.to_string());
        writeln!(metrics, "{}", row.to_csv_line()).map_err(io)?;
        metrics.flush().map_err(io)?;
        let name = PathBuf::from("checkpoints").join(format!("step_{:08}.ckpt", row.step));
        state.to_checkpoint(&config).save(&a.out.join(&name))?;
        written.push(name);
        println!(
            "step {:>8}  critic {:.5}  policy {:.5}  return {:.4}  score {:.2}",
            row.step, row.critic_loss, row.policy_loss, row.eval_return, row.eval_return_normalized
        );
        Ok(())
    });
    drop(metrics);
    if let Err(e) = result {
        if let TrainError::NonFinite { dump, .. } = &e {
            write_file(&a.out.join("nonfinite.json"), json_text(dump)?.as_bytes())?;
        }
        return Err(match e {
            TrainError::Checkpoint(m) => runtime(m),
            other => other.into(),
        });
    }
    trainer.state.to_checkpoint(&config).save(&a.out.join("final.ckpt")).map_err(runtime)?;
    written.push(PathBuf::from("final.ckpt"));
    write_outputs(&a.out, &written)?;
    println!("finished at step {}; outputs in {}", trainer.state.step, a.out.display());
    Ok(())
}

/// Checkpoint, its config and the dataset, ready to evaluate.
struct Loaded {
    config: TrainConfig,
    data: TransitionDataset,
    env: Environment,
    state: TrainState,
    manifest: RunManifest,
}

fn load_trained(cmd: &Command, checkpoint: &Path, data: &Path, flags: &[(&str, Option<String>)]) -> Result<Loaded, CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let config = resolve_config(None, Some(checkpoint_config(&ckpt, checkpoint)?), &[], flags)?;
    let dataset = load_dataset(data)?;
    let env = make_env(&config.env).map_err(invalid)?;
    if dataset.header.env_spec_hash != config.env.hash() {
        return Err(invalid("dataset was generated on a different env spec than the checkpoint's"));
    }
    let state = TrainState::from_checkpoint(&ckpt, &config, &env)?;
    let mut manifest = RunManifest::new(cmd).input(checkpoint)?.input(data)?;
    manifest.config = Some(config.to_text());
    manifest.dataset_hashes.push(dataset.hash());
    manifest.seeds.insert("eval".into(), config.seed);
    Ok(Loaded {
        config,
        data: dataset,
        env,
        state,
        manifest,
    })
}

pub fn eval(cmd: &Command, a: &EvalArgs) -> Result<(), CliError> {
    let flags = [
        ("eval_episodes", a.episodes.map(|n| n.to_string())),
        ("seed", a.seed.map(|s| s.to_string())),
    ];
    let mut l = load_trained(cmd, &a.checkpoint, &a.data, &flags)?;
    let tabular = l.env.tabular().is_some();
    l.manifest.outputs = vec!["report.json".into(), "episodes.csv".into()];
    if tabular {
        l.manifest.outputs.push("q_pairs.csv".into());
    }
    l.manifest.write(&a.out)?;

    let (report, acc) = evaluate_trained(&l.config, &l.data, &l.state)?;
    write_file(&a.out.join("report.json"), json_text(&report)?.as_bytes())?;
    write_file(&a.out.join("episodes.csv"), report.episodes_csv().as_bytes())?;
    let mut files = vec![PathBuf::from("report.json"), PathBuf::from("episodes.csv")];
    if let Some(acc) = &acc {
        let meta = json!({"kind": "q_pairs", "config_fingerprint": report.config_fingerprint});
        write_file(&a.out.join("q_pairs.csv"), acc.pairs_csv(meta).as_bytes())?;
        files.push(PathBuf::from("q_pairs.csv"));
    }
    write_outputs(&a.out, &files)?;
    println!(
        "mean return {:.4} (std {:.4}) over {} episodes; normalized score {:.2}",
        report.mean_return, report.std_return, report.n_episodes, report.normalized_score
    );
    if let Some(s) = report.exact_normalized_score {
        println!("exact normalized score {s:.2}");
    }
    if let Some(q) = &report.q_accuracy {
        println!("Q accuracy on {} pairs: spearman {:.4} pearson {:.4} mae {:.4}", q.n, q.spearman, q.pearson, q.mae);
    }
    Ok(())
}

pub fn verify(cmd: &Command, a: &VerifyArgs) -> Result<(), CliError> {
    let opts = VerifyOptions {
        seed: a.seed,
        quick: a.quick,
        readout: if a.inject_sign_flip { Readout::Raw } else { Readout::Negated },
    };
    if let Some(out) = &a.out {
        let mut manifest = RunManifest::new(cmd);
        manifest.seeds.insert("verify".into(), a.seed);
        manifest.outputs = vec!["report.json".into(), "summary.txt".into(), "failing.json".into()];
        manifest.write(out)?;
    }
    let report = run_verify(&opts);
    print!("{}", report.summary());
    for s in &report.suites {
        println!("  {} took {} ms", s.name, s.elapsed_ms);
    }
    if let Some(out) = &a.out {
        let failing: Vec<_> = report.suites.iter().filter_map(|s| s.failing.clone()).collect();
        write_file(&out.join("report.json"), json_text(&report)?.as_bytes())?;
        write_file(&out.join("summary.txt"), report.summary().as_bytes())?;
        write_file(&out.join("failing.json"), json_text(&failing)?.as_bytes())?;
        write_outputs(out, &["report.json", "summary.txt", "failing.json"].map(PathBuf::from))?;
    }
    if report.passed() {
        return Ok(());
    }
    let failed: Vec<String> = report
        .suites
        .iter()
        .filter(|s| !s.passed)
        .map(|s| match &s.failing {
            Some(f) => format!("{}: {f}", s.name),
            None => s.name.clone(),
        })
        .collect();
    Err(CliError::Check(format!("verification failed\n{}", failed.join("\n"))))
}

pub fn ablate(cmd: &Command, a: &AblateArgs) -> Result<(), CliError> {
    let base = resolve_config(a.config.as_deref(), None, &a.set, &[])?;
    if !a.seeds.is_empty() && a.seeds.len() != a.data.len() {
        return Err(invalid(format!("{} seeds for {} datasets", a.seeds.len(), a.data.len())));
    }
    let mut datasets = Vec::with_capacity(a.data.len());
    for (i, p) in a.data.iter().enumerate() {
        let d = load_dataset(p)?;
        let seed = a.seeds.get(i).copied().unwrap_or(d.header.seed);
        datasets.push((seed, d));
    }
    let retrieval = if a.retrieval.is_empty() {
        vec![base.retrieval]
    } else {
        a.retrieval
            .iter()
            .map(|r| r.parse::<Strategy>().map_err(invalid))
            .collect::<Result<_, _>>()?
    };
    let grid = AblationGrid {
        context: if a.context.is_empty() { vec![base.context] } else { a.context.clone() },
        layers: if a.layers.is_empty() { vec![base.layers] } else { a.layers.clone() },
        retrieval,
    };
    let mut manifest = RunManifest::new(cmd);
    for p in a.data.iter().chain(&a.config) {
        manifest = manifest.input(p)?;
    }
    manifest.config = Some(base.to_text());
    manifest.dataset_hashes = datasets.iter().map(|(_, d)| d.hash()).collect();
    for (s, _) in &datasets {
        manifest.seeds.insert(format!("dataset{}", manifest.seeds.len()), *s);
    }
    manifest.outputs = vec!["runs.csv".into(), "summary.csv".into()];
    manifest.write(&a.out)?;

    let table = run_ablation(&base, &datasets, &grid)?;
    let meta = json!({"kind": "ablation", "base_fingerprint": base.fingerprint()});
    write_file(&a.out.join("runs.csv"), table.runs_csv(meta.clone()).as_bytes())?;
    write_file(&a.out.join("summary.csv"), table.summary_csv(meta).as_bytes())?;
    write_outputs(&a.out, &["runs.csv", "summary.csv"].map(PathBuf::from))?;
    for c in &table.cells {
        match &c.result {
            Ok(m) => println!(
                "context {:>3} layers {:>3} {:<16} seed {:>4}  score {:.2}",
                c.context,
                c.layers,
                c.retrieval.to_string(),
                c.seed,
                m.score
            ),
            Err(e) => println!(
                "context {:>3} layers {:>3} {:<16} seed {:>4}  failed: {e}",
                c.context,
                c.layers,
                c.retrieval.to_string(),
                c.seed
            ),
        }
    }
    Ok(())
}

pub fn qdump(cmd: &Command, a: &QdumpArgs) -> Result<(), CliError> {
    if a.samples == 0 {
        return Err(invalid("--samples must be at least 1"));
    }
    let mut l = load_trained(cmd, &a.checkpoint, &a.data, &[])?;
    l.manifest.seeds.insert("qdump".into(), a.seed);
    let index = RetrievalIndex::build(&l.data, l.config.metric);
    let critic = &l.state.critics[0];
    let (acc, oracle_kind): (QAccuracy, &str) = match l.env.tabular() {
        Some(m) => {
            let sample = tabular_sample(&l.env, &l.data, Some(a.samples), a.seed)?;
            if sample.len() < a.samples {
                return Err(invalid(format!("only {} state-action pairs are available", sample.len())));
            }
            l.manifest.outputs = vec!["qdump.csv".into()];
            l.manifest.write(&a.out)?;
            let oracle = value_iteration(m, VI_TOL, VI_MAX_ITERS).map_err(runtime)?;
            let acc = q_accuracy_tabular(critic, &l.data, &index, l.config.retrieval, &l.env, &oracle, &sample, a.seed)?;
            (acc, "dp")
        }
        None => {
            if a.samples > l.data.len() {
                return Err(invalid(format!("only {} transitions are available", l.data.len())));
            }
            if a.mc_rollouts == 0 {
                return Err(invalid("--mc-rollouts must be at least 1"));
            }
            l.manifest.outputs = vec!["qdump.csv".into()];
            l.manifest.write(&a.out)?;
            let mut rng = substream(a.seed, streams::EVAL, 3);
            let mut picks = rand::seq::index::sample(&mut rng, l.data.len(), a.samples).into_vec();
            picks.sort_unstable();
            let reference = BehaviorPolicy::build(&BehaviorSpec::epsilon_optimal(0.0), &l.env).map_err(runtime)?;
            let act = |s: &[f64], r: &mut dyn RngCore| reference.act(0, s, r);
            let mut contexts: Vec<RetrievedContext> = Vec::with_capacity(picks.len());
            let mut queries = Vec::with_capacity(picks.len());
            let mut oracle_q = Vec::with_capacity(picks.len());
            for (i, &ti) in picks.iter().enumerate() {
                let t = &l.data.transitions[ti];
                let mut rr = substream(a.seed, streams::RETRIEVAL, i as u64);
                contexts.push(index.retrieve(l.config.retrieval, &t.s, critic.n_context, &mut rr).map_err(runtime)?);
                let est = mc_q_estimate(
                    &l.env,
                    &act,
                    &t.s,
                    &t.a,
                    a.mc_rollouts,
                    l.env.horizon(),
                    l.config.gamma,
                    derive_seed(a.seed, "qdump-mc", i as u64),
                )
                .map_err(runtime)?;
                queries.push((t.s.clone(), t.a.clone()));
                oracle_q.push(est.mean);
            }
            let refs: Vec<&RetrievedContext> = contexts.iter().collect();
            (q_accuracy(critic, &l.data, &refs, &oracle_q, &queries)?, "mc-reference-controller")
        }
    };
    let meta = json!({
        "kind": "qdump",
        "oracle": oracle_kind,
        "samples": a.samples,
        "seed": a.seed,
        "config_fingerprint": l.config.fingerprint(),
    });
    write_file(&a.out.join("qdump.csv"), acc.pairs_csv(meta).as_bytes())?;
    write_outputs(&a.out, &[PathBuf::from("qdump.csv")])?;
    println!(
        "{} pairs: spearman {:.4} pearson {:.4} mae {:.4}",
        acc.pairs.len(),
        acc.spearman,
        acc.pearson,
        acc.mae
    );
    Ok(())
}

pub fn replay(a: &ReplayArgs) -> Result<(), CliError> {
    let manifest = RunManifest::load(&a.manifest)?;
    if matches!(manifest.args, Command::Replay(_)) {
        return Err(invalid("cannot replay a replay"));
    }
    let original = a
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .ok_or_else(|| invalid("manifest has no parent directory"))?;
    if original.canonicalize().ok() == a.out.canonicalize().ok() && a.out.exists() {
        return Err(invalid("--out must differ from the original output directory"));
    }
    let expected = read_outputs(&original)?;
    for (path, hash) in &manifest.inputs {
        let now = super::hash_file(Path::new(path))?;
        if &now != hash {
            return Err(invalid(format!("input {path} changed since the original run")));
        }
    }
    let mut cmd = manifest.args.clone();
    cmd.set_out(a.out.clone());
    super::run(&cmd)?;
    let got = read_outputs(&a.out)?;
    let mut mismatched = Vec::new();
    for (name, hash) in &expected.files {
        match got.files.get(name) {
            Some(h) if h == hash => println!("identical  {name}"),
            Some(_) => mismatched.push(format!("differs    {name}")),
            None => mismatched.push(format!("missing    {name}")),
        }
    }
    for name in got.files.keys().filter(|n| !expected.files.contains_key(*n)) {
        mismatched.push(format!("unexpected {name}"));
    }
    if mismatched.is_empty() {
        println!("replay of {} reproduced all {} outputs", manifest.command, expected.files.len());
        Ok(())
    } else {
        Err(CliError::Check(format!("replay differs:\n{}", mismatched.join("\n"))))
    }
}
