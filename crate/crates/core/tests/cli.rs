use std::fs;
use std::path::{Path, PathBuf};

use icql::cli::{hash_file, main_with_args, read_outputs, RunManifest, EXIT_CHECK, EXIT_INVALID, EXIT_OK, MANIFEST_FILE};
use icql::mdp::TransitionDataset;
use icql::nn::Checkpoint;

const SMALL: &str = "\
steps = 6
batch = 4
eval_interval = 3
eval_episodes = 2
context = 5
layers = 2
feature_dim = 4
hidden = 8
policy_hidden = 8
value_samples = 2
";

fn icql(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("icql").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_rows(csv: &str) -> Vec<&str> {
    csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

/// Four-rooms dataset plus a small config file.
fn setup(dir: &Path) -> (PathBuf, PathBuf) {
    let data_dir = dir.join("data");
    assert_eq!(icql(&["gen-data", "--episodes", "20", "--seed", "3", "--out", s(&data_dir)]), EXIT_OK);
    let cfg = dir.join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    (data_dir.join("dataset.jsonl"), cfg)
}

#[test]
fn gen_data_is_reproducible_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = ["gen-data", "--env", "chain", "--episodes", "1", "--seed", "9"];
    assert_eq!(icql(&[&args[..], &["--out", s(&a)]].concat()), EXIT_OK);
    assert_eq!(icql(&[&args[..], &["--out", s(&b)]].concat()), EXIT_OK);
    let fa = a.join("dataset.jsonl");
    assert_eq!(hash_file(&fa).unwrap(), hash_file(&b.join("dataset.jsonl")).unwrap());
    let d = TransitionDataset::load(&fa).unwrap();
    assert_eq!(d.episode_ranges().len(), 1);
    let again = dir.path().join("again.jsonl");
    d.save(&again).unwrap();
    assert_eq!(fs::read(&fa).unwrap(), fs::read(&again).unwrap());
    assert!(a.join(MANIFEST_FILE).exists());
}

#[test]
fn bad_inputs_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path());
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "contxt = 5\nbatch = 0\n").unwrap();
    let out = dir.path().join("o");
    assert_eq!(icql(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]), EXIT_INVALID);
    assert_eq!(icql(&["eval", "--checkpoint", "/nonexistent.ckpt", "--data", s(&data), "--out", s(&out)]), EXIT_INVALID);
    assert_eq!(icql(&["gen-data", "--behavior", "nonsense", "--out", s(&out)]), EXIT_INVALID);
    assert_eq!(icql(&["no-such-command"]), EXIT_INVALID);
}

#[test]
fn train_eval_qdump_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let d = dir.path();

    let zero = d.join("zero");
    assert_eq!(icql(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&zero), "--steps", "0"]), EXIT_OK);
    assert!(zero.join("final.ckpt").exists());
    assert_eq!(fs::read_dir(zero.join("checkpoints")).unwrap().count(), 0);
    assert!(data_rows(&fs::read_to_string(zero.join("metrics.csv")).unwrap()).is_empty());

    let run = d.join("run");
    assert_eq!(icql(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--seed", "4"]), EXIT_OK);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let steps: Vec<&str> = data_rows(&metrics).iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["3", "6"]);

    // Resume from step 3 with a longer budget: numbering continues.
    let resumed = d.join("resumed");
    let ckpt3 = run.join("checkpoints/step_00000003.ckpt");
    assert_eq!(icql(&["train", "--resume", s(&ckpt3), "--data", s(&data), "--out", s(&resumed), "--steps", "9"]), EXIT_OK);
    let metrics = fs::read_to_string(resumed.join("metrics.csv")).unwrap();
    let steps: Vec<&str> = data_rows(&metrics).iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["6", "9"]);
    // The resumed step-6 state and row match the uninterrupted run's.
    let load = |p: PathBuf| Checkpoint::load(&p).unwrap().tensors;
    assert_eq!(
        load(resumed.join("checkpoints/step_00000006.ckpt")),
        load(run.join("checkpoints/step_00000006.ckpt"))
    );
    let full = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(data_rows(&metrics)[0], data_rows(&full)[1]);

    let ev = d.join("eval");
    let final_ckpt = run.join("final.ckpt");
    assert_eq!(icql(&["eval", "--checkpoint", s(&final_ckpt), "--data", s(&data), "--episodes", "10", "--out", s(&ev)]), EXIT_OK);
    assert_eq!(data_rows(&fs::read_to_string(ev.join("episodes.csv")).unwrap()).len(), 10);
    assert!(ev.join("q_pairs.csv").exists());

    let qd = d.join("qdump");
    assert_eq!(icql(&["qdump", "--checkpoint", s(&final_ckpt), "--data", s(&data), "--samples", "37", "--out", s(&qd)]), EXIT_OK);
    assert_eq!(data_rows(&fs::read_to_string(qd.join("qdump.csv")).unwrap()).len(), 37);
}

#[test]
fn ablate_singleton_matches_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let d = dir.path();
    let run = d.join("run");
    assert_eq!(icql(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--seed", "3"]), EXIT_OK);
    let ev = d.join("eval");
    assert_eq!(icql(&["eval", "--checkpoint", s(&run.join("final.ckpt")), "--data", s(&data), "--out", s(&ev)]), EXIT_OK);
    let ab = d.join("ablate");
    assert_eq!(icql(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&ab)]), EXIT_OK);

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    let runs = fs::read_to_string(ab.join("runs.csv")).unwrap();
    let lines: Vec<&str> = runs.lines().filter(|l| !l.starts_with('#')).collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(lines.len(), 2);
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()].parse::<f64>().unwrap();
    assert_eq!(col("mean_return"), report["mean_return"].as_f64().unwrap());
    assert_eq!(col("spearman"), report["q_accuracy"]["spearman"].as_f64().unwrap());
}

#[test]
fn verify_quick_passes_and_catches_sign_flip() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dir.path().join("ok");
    let again = dir.path().join("again");
    assert_eq!(icql(&["verify", "--quick", "--seed", "2", "--out", s(&ok)]), EXIT_OK);
    assert_eq!(icql(&["verify", "--quick", "--seed", "2", "--out", s(&again)]), EXIT_OK);
    assert_eq!(fs::read(ok.join("report.json")).unwrap(), fs::read(again.join("report.json")).unwrap());

    let bad = dir.path().join("bad");
    assert_eq!(icql(&["verify", "--quick", "--inject-sign-flip", "--out", s(&bad)]), EXIT_CHECK);
    let failing: serde_json::Value = serde_json::from_str(&fs::read_to_string(bad.join("failing.json")).unwrap()).unwrap();
    assert_eq!(failing[0]["suite"], "theorem-equivalence");
}

#[test]
fn replay_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let d = dir.path();
    let run = d.join("run");
    assert_eq!(icql(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]), EXIT_OK);
    let replayed = d.join("replayed");
    assert_eq!(icql(&["replay", "--manifest", s(&run.join(MANIFEST_FILE)), "--out", s(&replayed)]), EXIT_OK);
    assert_eq!(read_outputs(&run).unwrap(), read_outputs(&replayed).unwrap());

    let m = RunManifest::load(&run.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.command, "train");
    assert!(m.config.unwrap().contains("context = 5"));

    // A changed input is refused.
    fs::write(&cfg, format!("{SMALL}seed = 1\n")).unwrap();
    let again = d.join("again");
    assert_eq!(icql(&["replay", "--manifest", s(&run.join(MANIFEST_FILE)), "--out", s(&again)]), EXIT_INVALID);
}
