//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. The
//! process fails only when a criterion outside `KNOWN_FAILURES` fails.
//! `ICQL_ACCEPTANCE_QUICK=1` shrinks the training budgets for a smoke run;
//! the verdicts printed then are not the acceptance verdicts.

use std::collections::HashSet;
use std::time::Instant;

use rand::Rng;

use icql::cli::{main_with_args, read_outputs, EXIT_OK, MANIFEST_FILE};
use icql::eval::{ablate, bound_trend_probe, evaluate_trained, AblationGrid, ProbeConfig};
use icql::features::FeatureParams;
use icql::mdp::{generate_dataset, make_env, BehaviorPolicy, BehaviorSpec, Environment, MdpKind, MdpSpec, TransitionDataset};
use icql::retrieval::Strategy;
use icql::rng::substream;
use icql::train::{expectile_loss, train, TrainConfig, TrainState};
use icql::verify;

/// Criteria that fail for reasons analysed in the project notes; they are
/// reported but do not fail the run.
const KNOWN_FAILURES: &[&str] = &["expectile-identity", "ablation-context-length", "ablation-retrieval"];

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Line {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn quick() -> bool {
    std::env::var("ICQL_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1")
}

fn report(lines: &mut Vec<Line>, name: &'static str, passed: bool, detail: String) {
    println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    lines.push(Line { name, passed, detail });
}

fn medium_datasets(env: &Environment) -> Vec<(u64, TransitionDataset)> {
    let b = BehaviorPolicy::build(&BehaviorSpec::epsilon_optimal(0.3), env).unwrap();
    SEEDS.iter().map(|&s| (s, generate_dataset(env, &b, 200, 100, s).unwrap())).collect()
}

fn verify_suites(lines: &mut Vec<Line>) {
    let t = Instant::now();
    let th = verify::theorem_equivalence(0, false, icql::critic::Readout::Negated);
    let secs = t.elapsed().as_secs_f64();
    report(
        lines,
        "theorem-equivalence",
        th.passed && th.instances >= 1000 && secs < 30.0,
        format!("{} instances, max rel error {:.3e}, {secs:.2} s", th.instances, th.max_error),
    );
    let pr = verify::prompt_reduction(0, 200);
    report(lines, "prompt-reduction", pr.passed, format!("{} contexts bit-identical", pr.instances));
    let gc = verify::gradient_checks(0, 20);
    report(lines, "gradient-checks", gc.passed, format!("{}, max rel error {:.3e}", gc.detail, gc.max_error));
    let rt = verify::retrieval_oracle(0, 500, 50);
    report(lines, "retrieval-exactness", rt.passed, rt.detail);
}

fn expectile(lines: &mut Vec<Line>) {
    let rho = |u: f64, tau: f64| expectile_loss(u, tau).unwrap();
    let mut literal = 0.0f64;
    let mut symmetric = 0.0f64;
    let mut mirrored = 0.0f64;
    let mut half = 0.0f64;
    for i in 0..=40 {
        let u = -4.0 + 0.2 * i as f64;
        for j in 1..20 {
            let tau = j as f64 / 20.0;
            literal = literal.max((rho(u, tau) + rho(-u, 1.0 - tau) - u * u).abs());
            symmetric = symmetric.max((rho(u, tau) + rho(-u, tau) - u * u).abs());
            mirrored = mirrored.max((rho(u, tau) - rho(-u, 1.0 - tau)).abs());
        }
        half = half.max((rho(u, 0.5) - 0.5 * u * u).abs());
    }
    report(
        lines,
        "expectile-identity",
        literal <= 1e-12 && half == 0.0,
        format!(
            "literal rho_tau(u)+rho_(1-tau)(-u)=u^2 max error {literal:.3e}; \
             rho_tau(u)+rho_tau(-u)=u^2 max error {symmetric:.3e}; \
             rho_tau(u)=rho_(1-tau)(-u) max error {mirrored:.3e}; tau=0.5 halving error {half:.1e}"
        ),
    );
}

fn max_feature_norm(f: &FeatureParams, env: &Environment, seed: u64) -> f64 {
    let mut rng = substream(seed, "acceptance-features", 0);
    let dim = env.state_dim();
    let n_actions = 4;
    (0..100_000)
        .map(|_| {
            let s: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = vec![rng.random_range(0..n_actions) as f64];
            f.featurize(&s, &a).unwrap().iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}

fn feature_norm(lines: &mut Vec<Line>, env: &Environment, trained: &TrainState, config: &TrainConfig) {
    let bound = (config.feature_dim as f64).sqrt();
    let random = TrainState::init(config, env).unwrap();
    let r = max_feature_norm(&random.critics[0].features, env, 1);
    let t = max_feature_norm(&trained.critics[0].features, env, 2);
    report(
        lines,
        "feature-norm-bound",
        r <= bound && t <= bound,
        format!("max |phi| random {r:.4}, trained {t:.4}, bound sqrt(d) = {bound:.4}"),
    );
}

fn end_to_end(lines: &mut Vec<Line>, data: &[(u64, TransitionDataset)]) -> (TrainState, TrainConfig) {
    let steps = if quick() { 2_000 } else { 50_000 };
    let mut first = None;
    let mut ok = 0;
    let mut parts = Vec::new();
    let mut slowest = 0.0f64;
    for (seed, d) in data {
        let cfg = TrainConfig {
            seed: *seed,
            steps,
            eval_interval: steps,
            ..TrainConfig::default()
        };
        let t = Instant::now();
        let outcome = train(&cfg, d, None).unwrap();
        let (rep, acc) = evaluate_trained(&cfg, d, &outcome.state).unwrap();
        slowest = slowest.max(t.elapsed().as_secs_f64());
        let sp = acc.as_ref().map_or(f64::NAN, |a| a.spearman);
        let score = rep.score();
        if sp >= 0.6 && score >= 80.0 {
            ok += 1;
        }
        parts.push(format!(
            "seed {seed}: spearman {sp:.3} score {score:.1} critic-greedy {:.1}",
            rep.critic_greedy_normalized_score.unwrap_or(f64::NAN)
        ));
        if first.is_none() {
            first = Some((outcome.state, cfg));
        }
    }
    report(
        lines,
        "end-to-end-value-quality",
        ok >= 4,
        format!("{ok}/5 seeds meet spearman>=0.6 and score>=80 at {steps} steps ({}); slowest seed {slowest:.0} s", parts.join("; ")),
    );
    first.unwrap()
}

/// Four-rooms with slip 0.1 and a behavior that never follows the optimal
/// policy: half decoy-seeking, half uniform.
fn noisy_datasets() -> (MdpSpec, Vec<(u64, TransitionDataset)>) {
    let mut spec = MdpSpec::four_rooms();
    if let MdpKind::FourRooms(p) = &mut spec.kind {
        p.slip = 0.1;
    }
    let env = make_env(&spec).unwrap();
    let b = BehaviorPolicy::build(&"0.5*decoy:0.3+0.5*uniform".parse().unwrap(), &env).unwrap();
    let data = SEEDS.iter().map(|&s| (s, generate_dataset(&env, &b, 200, 100, s).unwrap())).collect();
    (spec, data)
}

fn ablations(lines: &mut Vec<Line>) {
    let (spec, data) = noisy_datasets();
    let steps = if quick() { 500 } else { 5_000 };
    let base = TrainConfig {
        env: spec,
        steps,
        eval_interval: steps,
        eval_episodes: 1,
        ..TrainConfig::default()
    };
    let ss = Strategy::StateSimilar;
    let by_context = AblationGrid {
        context: vec![20, 40],
        layers: vec![base.layers],
        retrieval: vec![ss],
    };
    let random_only = AblationGrid {
        context: vec![20],
        layers: vec![base.layers],
        retrieval: vec![Strategy::Random],
    };
    let mut table = ablate(&base, &data, &by_context).unwrap();
    table.cells.extend(ablate(&base, &data, &random_only).unwrap().cells);
    let cell = |c: usize, r: Strategy| -> Vec<f64> {
        table.scores(c, base.layers, r).into_iter().map(|(_, s)| s.unwrap_or(f64::NAN)).collect()
    };
    // Critic-level diagnostics: score of argmax_a Q̂ and Spearman against Q*.
    let diag = |c: usize, r: Strategy| -> String {
        let m: Vec<_> = table
            .cells
            .iter()
            .filter(|x| x.context == c && x.retrieval == r)
            .filter_map(|x| x.result.as_ref().ok())
            .collect();
        let g: Vec<String> = m.iter().map(|m| format!("{:.1}", m.critic_greedy_score.unwrap_or(f64::NAN))).collect();
        let sp: Vec<String> = m.iter().map(|m| format!("{:.2}", m.spearman.unwrap_or(f64::NAN))).collect();
        format!("critic-greedy [{}] spearman [{}]", g.join(" "), sp.join(" "))
    };
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    let wins = |a: &[f64], b: &[f64]| a.iter().zip(b).filter(|(x, y)| x > y).count();

    let (c20, c40) = (cell(20, ss), cell(40, ss));
    let w = wins(&c20, &c40);
    report(
        lines,
        "ablation-context-length",
        w >= 4,
        format!(
            "context 20 beats 40 in {w}/5 seeds at {steps} steps; scores 20: [{}] 40: [{}]; diagnostics 20: {} 40: {}",
            fmt(&c20),
            fmt(&c40),
            diag(20, ss),
            diag(40, ss)
        ),
    );
    let rnd = cell(20, Strategy::Random);
    let w = wins(&c20, &rnd);
    report(
        lines,
        "ablation-retrieval",
        w >= 4,
        format!(
            "state-similar beats random in {w}/5 seeds at {steps} steps; scores state-similar: [{}] random: [{}]; \
             diagnostics state-similar: {} random: {}",
            fmt(&c20),
            fmt(&rnd),
            diag(20, ss),
            diag(20, Strategy::Random)
        ),
    );
}

fn probe(lines: &mut Vec<Line>, env: &Environment, data: &[(u64, TransitionDataset)]) {
    let refs: Vec<(u64, &TransitionDataset)> = data.iter().map(|(s, d)| (*s, d)).collect();
    let summary = bound_trend_probe(env, &refs, &ProbeConfig::default()).unwrap();
    let holds = SEEDS.iter().filter(|&&s| summary.trend_holds(s, 4, 32) == Some(true)).count();
    let parts: Vec<String> = SEEDS
        .iter()
        .map(|&s| {
            let m = |k| summary.row(s, k).map_or(f64::NAN, |r| r.pointwise_median);
            format!("seed {s}: k=4 {:.4} k=32 {:.4}", m(4), m(32))
        })
        .collect();
    report(lines, "bound-trend-probe", holds >= 4, format!("{holds}/5 seeds ({})", parts.join("; ")));
}

fn determinism(lines: &mut Vec<Line>) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let cfg = d.join("small.cfg");
    std::fs::write(&cfg, "steps = 20\nbatch = 8\neval_interval = 10\neval_episodes = 3\ncontext = 6\nlayers = 2\nfeature_dim = 4\nhidden = 16\npolicy_hidden = 16\n").unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    let data = format!("{}/dataset.jsonl", p("data"));
    let ckpt = format!("{}/final.ckpt", p("train"));
    let runs: Vec<(&str, Vec<String>)> = vec![
        ("data", vec!["gen-data".into(), "--episodes".into(), "30".into(), "--seed".into(), "7".into()]),
        ("train", vec!["train".into(), "--config".into(), cfg.clone(), "--data".into(), data.clone()]),
        ("eval", vec!["eval".into(), "--checkpoint".into(), ckpt.clone(), "--data".into(), data.clone()]),
        ("qdump", vec!["qdump".into(), "--checkpoint".into(), ckpt, "--data".into(), data.clone(), "--samples".into(), "50".into()]),
        ("ablate", vec!["ablate".into(), "--config".into(), cfg, "--data".into(), data, "--context".into(), "4,6".into()]),
        ("verify", vec!["verify".into(), "--quick".into()]),
    ];
    let mut identical = Vec::new();
    let mut failed = Vec::new();
    for (name, mut args) in runs {
        args.extend(["--out".to_string(), p(name)]);
        let run = |a: &[String]| main_with_args(std::iter::once("icql".to_string()).chain(a.iter().cloned()));
        if run(&args) != EXIT_OK {
            failed.push(format!("{name} did not run"));
            continue;
        }
        let replay = [
            "replay".to_string(),
            "--manifest".into(),
            format!("{}/{MANIFEST_FILE}", p(name)),
            "--out".into(),
            p(&format!("{name}-replay")),
        ];
        let same = run(&replay) == EXIT_OK
            && read_outputs(&d.join(name)).ok() == read_outputs(&d.join(format!("{name}-replay"))).ok();
        if same {
            identical.push(name);
        } else {
            failed.push(format!("{name} differs on replay"));
        }
    }
    report(
        lines,
        "determinism",
        failed.is_empty(),
        format!("bit-identical replays: {}{}", identical.join(", "), if failed.is_empty() { String::new() } else { format!("; {}", failed.join(", ")) }),
    );
}

fn main() {
    let start = Instant::now();
    let mut lines = Vec::new();
    verify_suites(&mut lines);
    expectile(&mut lines);
    let env = make_env(&MdpSpec::four_rooms()).unwrap();
    let data = medium_datasets(&env);
    let (trained, config) = end_to_end(&mut lines, &data);
    feature_norm(&mut lines, &env, &trained, &config);
    ablations(&mut lines);
    probe(&mut lines, &env, &data);
    determinism(&mut lines);

    let known: HashSet<&str> = KNOWN_FAILURES.iter().copied().collect();
    let unexpected: Vec<&str> = lines.iter().filter(|l| !l.passed && !known.contains(l.name)).map(|l| l.name).collect();
    let passed = lines.iter().filter(|l| l.passed).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0} s{}",
        lines.len(),
        start.elapsed().as_secs_f64(),
        if quick() { " (quick budgets)" } else { "" }
    );
    for l in lines.iter().filter(|l| !l.passed && known.contains(l.name)) {
        println!("known failure {}: {}", l.name, l.detail);
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
