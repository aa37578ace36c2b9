use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn clustr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clustr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"
steps = 2
batch = 2
eval_every = 0
eval_batch = 2

[model]
embed_dim = 8
stage_depths = [1, 1, 1, 1]
cluster_counts = [3, 3, 3, 3]
k1_counts = [2, 2, 2, 2]
experts_per_cluster = 2
k2 = 2
heads = 2
fsb_k = 3

[data]
tasks = ["noise", "rain", "haze"]
train_sources = 2
eval_sources = 1
patch = 32
source_size = 48
eval_size = 32
noise_sigma = 25.0
"#;

#[test]
fn help_and_bad_arguments() {
    assert_eq!(clustr(&["--help"]).status.code(), Some(0));
    assert_eq!(clustr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(clustr(&["synth"]).status.code(), Some(1));
}

#[test]
fn synth_writes_pairs_and_rejects_unknown_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let r = clustr(&[
        "synth",
        "--out",
        p(&out),
        "--tasks",
        "noise,haze",
        "--sources",
        "2",
        "--size",
        "32",
        "--seed",
        "3",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read_dir(out.join("noise/degraded")).unwrap().count(), 2);
    assert_eq!(fs::read_dir(out.join("haze/clean")).unwrap().count(), 2);
    let r = clustr(&["synth", "--out", p(&out), "--tasks", "snow"]);
    assert_eq!(r.status.code(), Some(1));
    let r = clustr(&["synth", "--out", p(&out), "--size", "40"]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn train_eval_diagnose_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = dir.path().join("run");
    let r = clustr(&["train", "--config", p(&cfg), "--out", p(&run), "--seed", "5"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let ck = run.join("model.ck");
    assert!(ck.exists());
    assert!(run.join("summary.json").exists());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,task,psnr,ssim"));
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 3);

    // resume to a longer budget
    let r = clustr(&[
        "train",
        "--config",
        p(&cfg),
        "--out",
        p(&run),
        "--resume",
        p(&ck),
        "--steps",
        "3",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 4);

    let data = dir.path().join("data");
    assert!(clustr(&["synth", "--out", p(&data), "--sources", "1", "--size", "32"])
        .status
        .success());
    let ev = dir.path().join("eval.json");
    let r = clustr(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&ev)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(&ev).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);

    // eval is deterministic
    let ev2 = dir.path().join("eval2.json");
    assert!(
        clustr(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&ev2)])
            .status
            .success()
    );
    assert_eq!(fs::read(&ev).unwrap(), fs::read(&ev2).unwrap());

    let diag = dir.path().join("diag");
    let r = clustr(&["diagnose", "stats", "--checkpoint", p(&ck), "--out", p(&diag)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read_to_string(diag.join("stats.csv")).unwrap().lines().count(), 5);
    let r = clustr(&[
        "diagnose",
        "stats",
        "--traces",
        p(&diag.join("traces.jsonl")),
        "--out",
        p(&diag),
    ]);
    assert!(r.status.success());

    let img = data.join("noise/degraded");
    let img = fs::read_dir(img).unwrap().next().unwrap().unwrap().path();
    let r = clustr(&[
        "diagnose",
        "affinity",
        "--checkpoint",
        p(&ck),
        "--image",
        p(&img),
        "--stage",
        "2",
        "--out",
        p(&diag),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(diag.join("affinity_p0.png").exists() && diag.join("affinity.csv").exists());
    let r = clustr(&[
        "diagnose",
        "affinity",
        "--checkpoint",
        p(&ck),
        "--image",
        p(&img),
        "--stage",
        "9",
        "--out",
        p(&diag),
    ]);
    assert_eq!(r.status.code(), Some(1));

    let r = clustr(&["diagnose", "embed", "--checkpoint", p(&ck), "--out", p(&diag)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(diag.join("pca.csv").exists());
    let r = clustr(&["diagnose", "spectrum", "--checkpoint", p(&ck), "--out", p(&diag)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(diag.join("spectrum.csv").exists());
    let r = clustr(&["diagnose", "mse", "--checkpoint", p(&ck), "--out", p(&diag)]);
    assert!(r.status.success());
    assert!(diag.join("mse_stage1.csv").exists());
}

#[test]
fn empty_trace_file_is_a_parameter_error() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.jsonl");
    fs::write(&t, "").unwrap();
    let r = clustr(&["diagnose", "stats", "--traces", p(&t), "--out", p(dir.path())]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn mse_of_fresh_orthogonal_init_is_two_over_d() {
    let dir = tempfile::tempdir().unwrap();
    let r = clustr(&[
        "diagnose",
        "mse",
        "--init",
        "orthogonal",
        "--out",
        p(dir.path()),
        "--seed",
        "1",
    ]);
    assert!(r.status.success());
    let csv = fs::read_to_string(dir.path().join("mse_stage1.csv")).unwrap();
    let v: f64 = csv.lines().next().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((v - 2.0 / 16.0).abs() < 1e-9, "{v}");
}

#[test]
fn divergence_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, TINY.replace("steps = 2", "steps = 2\nlr = 1e300")).unwrap();
    let run = dir.path().join("run");
    let r = clustr(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(run.join("last_good.ck").exists());
}

#[test]
fn unknown_ablation_flag_is_a_parameter_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = clustr(&["ablate", "--variant", "x:use_magic", "--out", p(dir.path())]);
    assert_eq!(r.status.code(), Some(1));
    let r = clustr(&["train", "--ablate", "nope", "--out", p(dir.path())]);
    assert_eq!(r.status.code(), Some(1));
}
