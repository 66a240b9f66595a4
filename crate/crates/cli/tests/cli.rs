use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mrfnln"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small, fast training setup: tiny network, a handful of steps, plain L1.
const FAST: &str = r#"
[network]
base_channels = 8
stage_depths = [1, 1, 2, 1, 1]

[train]
iterations = 4
batch_size = 2
crop_size = 32
log_every = 2
checkpoint_every = 2

[loss]
variant = "none"
"#;

fn dataset(dir: &Path) -> PathBuf {
    let o = run(&["synth", "--scenes", "3", "--size", "32", "--per-clean", "1", "--seed", "5", "--out", s(dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("manifest.jsonl")
}

fn fast_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, format!("{FAST}{extra}")).unwrap();
    p
}

fn records(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("records.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_counts_pairs_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["synth", "--scenes", "3", "--size", "32", "--per-clean", "2", "--seed", "7", "--out", s(d)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let lines = std::fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);
    for f in ["hazy/scene_000_0.png", "hazy/scene_002_1.png"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn synth_without_input_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("o");
    let o = run(&["synth", "--clean", s(&t.path().join("missing")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("manifest.jsonl").exists());
    assert_eq!(run(&["synth", "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["count", "--preset", "XL"]).status.code(), Some(2));
    assert_eq!(run(&["count", "--convention", "gflops"]).status.code(), Some(2));
    assert_eq!(run(&["count", "--threads", "0"]).status.code(), Some(2));
    let t = tempfile::tempdir().unwrap();
    let bad = t.path().join("bad.toml");
    std::fs::write(&bad, "[train]\ncrop_size = 40\n").unwrap();
    let o = run(&["count", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("crop_size"));
}

#[test]
fn emitted_config_reparses_to_itself() {
    let t = tempfile::tempdir().unwrap();
    let first = run(&["count", "--preset", "tiny", "--seed", "11", "--emit-config"]);
    assert!(first.status.success());
    let p = t.path().join("eff.toml");
    std::fs::write(&p, &first.stdout).unwrap();
    let second = run(&["count", "--config", s(&p), "--emit-config"]);
    assert_eq!(stdout(&first), stdout(&second));
    assert!(stdout(&first).contains("seed = 11"));
}

#[test]
fn count_reports_preset_b() {
    let t = tempfile::tempdir().unwrap();
    let o = run(&["count", "--preset", "B", "--res", "256", "--out", s(t.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("params 1200340"), "{text}");
    assert!(text.contains("Macs convention"));
    let cost = std::fs::read_to_string(t.path().join("cost.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(cost.lines().last().unwrap()).unwrap();
    assert_eq!(last["params"], 1_200_340);
    assert_eq!(records(t.path())[0]["command"], "count");
}

#[test]
fn contrastive_training_needs_a_proxy() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(&t.path().join("data"));
    let cfg = fast_config(t.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("\"none\"", "\"dfcr\"");
    std::fs::write(&cfg, text).unwrap();
    let o = run(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&t.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--proxy"));
}

#[test]
fn train_resume_and_eval_agree() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(&t.path().join("data"));
    let cfg = fast_config(t.path(), "");
    let full = t.path().join("full");
    let o = run(&["train", "--threads", "1", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&full)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(full.join("step_2.ckpt").exists());

    // resume the step-2 checkpoint and finish the run elsewhere
    let resumed = t.path().join("resumed");
    let o = run(&[
        "train",
        "--threads",
        "1",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--resume",
        s(&full.join("step_2.ckpt")),
        "--out",
        s(&resumed),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(full.join("model.ckpt")).unwrap(),
        std::fs::read(resumed.join("model.ckpt")).unwrap()
    );

    let rec = &records(&full)[0];
    assert_eq!(rec["command"], "train");
    assert_eq!(rec["config"]["train"]["iterations"], 4);
    assert_eq!(rec["losses"].as_array().unwrap().len(), 2);
    assert_eq!(rec["config_hash"].as_str().unwrap().len(), 64);
    let trained_psnr = rec["eval"]["mean_psnr"].as_f64().unwrap();

    let ev = t.path().join("ev");
    let ckpt = full.join("model.ckpt");
    let args = [
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--manifest",
        s(&manifest),
        "--out",
        s(&ev),
    ];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let psnr = records(&ev)[0]["eval"]["mean_psnr"].as_f64().unwrap();
    assert_eq!(psnr, trained_psnr);
    assert!(psnr.is_finite());

    // a checkpoint of another architecture is a configuration error
    let o = run(&["eval", "--preset", "B", "--checkpoint", s(&full.join("model.ckpt")), "--manifest", s(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablation_survives_failing_cells() {
    let t = tempfile::tempdir().unwrap();
    let manifest = dataset(&t.path().join("data"));
    let grid = r#"
[ablate]
blocks = ["fab", "msfab"]
attention = ["cnl_spds"]
losses = ["none", "dfcr"]
seeds = [0]
"#;
    let cfg = fast_config(t.path(), grid);
    let text = std::fs::read_to_string(&cfg).unwrap().replace("iterations = 4", "iterations = 2");
    std::fs::write(&cfg, text).unwrap();
    let out = t.path().join("o");
    // no proxy: the two contrastive cells fail, the others still run
    let o = run(&["ablate", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let recs = records(&out);
    assert_eq!(recs.len(), 4);
    assert_eq!(recs.iter().filter(|r| r["error"].is_string()).count(), 2);
    assert!(recs.iter().all(|r| r["error"].is_string() == r["eval"].is_null()));

    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().skip(1).take(4).collect();
    let psnrs: Vec<f64> = rows
        .iter()
        .filter(|l| !l.contains("failed"))
        .map(|l| l.split_whitespace().nth(4).unwrap().parse().unwrap())
        .collect();
    assert_eq!(psnrs.len(), 2);
    assert!(psnrs[0] >= psnrs[1]);
    assert!(rows[2].contains("failed") && rows[3].contains("failed"));
}

#[test]
fn bench_reports_the_attention_ratio() {
    let t = tempfile::tempdir().unwrap();
    let o = run(&["bench", "--preset", "tiny", "--res", "64", "--reps", "1", "--out", s(t.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("attention stage: spds"));
    let rec = &records(t.path())[0];
    assert!(rec["details"]["forward_s"].as_f64().unwrap() > 0.0);
}
