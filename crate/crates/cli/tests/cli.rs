use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn repkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repkit"))
        .args(args)
        .env_remove("REPKIT_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json_stdout(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        )
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small teacher bundle with 30% flipped labels.
fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("synth");
    let o = repkit(&[
        "synth", "--out", s(&out), "--n-train", "120", "--n-test", "30", "--feature-dim", "6",
        "--num-classes", "3", "--separation", "2", "--teacher-scale", "1", "--corruption", "0.3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("bundle").join("manifest.json")
}

#[test]
fn distillation_fit_then_explain() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let fit_dir = dir.path().join("fit");
    let o = repkit(&[
        "fit", "--manifest", s(&manifest), "--loss", "softmax-distill", "--lambda", "0.001",
        "--out", s(&fit_dir), "--json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json_stdout(&o);
    assert_eq!(report["result"]["report"]["converged"], true);
    assert_eq!(report["config"]["lambda"], 0.001);
    assert!(fit_dir.join("weights.rpmx").exists());
    let on_disk: Value = serde_json::from_str(&fs::read_to_string(fit_dir.join("fit.json")).unwrap()).unwrap();
    assert_eq!(on_disk, report);

    let weights = fit_dir.join("weights.rpmx");
    let o = repkit(&[
        "explain", "--manifest", s(&manifest), "--weights", s(&weights), "--loss", "softmax-distill",
        "--lambda", "0.001", "--test", "0", "--class", "1", "--top-k", "3", "--json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let e = &json_stdout(&o)["result"]["explanation"];
    assert_eq!(e["class"], 1);
    assert!(e["excitatory"].as_array().unwrap().len() <= 3);
    assert!(e["inhibitory"].as_array().unwrap().len() <= 3);
    let bound = json_stdout(&o)["result"]["residual_bound"].as_f64().unwrap();
    assert!(e["residual"].as_f64().unwrap() <= bound);
}

#[test]
fn stored_alphas_are_checked_against_weights() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, lambda) in [(&a, "0.01"), (&b, "0.05")] {
        let o = repkit(&["fit", "--manifest", s(&manifest), "--lambda", lambda, "--out", s(out)]);
        assert_eq!(code(&o), 0);
        let o = repkit(&[
            "alphas", "--manifest", s(&manifest), "--weights", s(&out.join("weights.rpmx")),
            "--lambda", lambda, "--out", s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let explain = |alphas: &Path| {
        repkit(&[
            "explain", "--manifest", s(&manifest), "--weights", s(&a.join("weights.rpmx")),
            "--alphas", s(alphas), "--test", "2",
        ])
    };
    assert_eq!(code(&explain(&a.join("alphas.rpmx"))), 0);
    let o = explain(&b.join("alphas.rpmx"));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("alphas do not match"));

    let o = repkit(&[
        "fidelity", "--manifest", s(&manifest), "--weights", s(&a.join("weights.rpmx")),
        "--alphas", s(&a.join("alphas.rpmx")), "--json",
    ]);
    assert_eq!(code(&o), 0);
    let r = json_stdout(&o);
    assert!(r["result"]["train"]["pooled_pearson"].as_f64().unwrap() > 0.99);
    assert!(r["result"]["test"]["pooled_pearson"].as_f64().unwrap() > 0.99);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let mut outputs = Vec::new();
    let out = dir.path().join("run");
    for _ in 0..2 {
        if out.exists() {
            fs::remove_dir_all(&out).unwrap();
        }
        let o = repkit(&["fit", "--manifest", s(&manifest), "--out", s(&out), "--json"]);
        assert_eq!(code(&o), 0);
        let weights = out.join("weights.rpmx");
        let e = repkit(&[
            "explain", "--manifest", s(&manifest), "--weights", s(&weights), "--test", "3", "--json",
        ]);
        let t = repkit(&["toy-study", "--out", s(&out), "--json"]);
        let d = repkit(&[
            "debug-sim", "--manifest", s(&manifest), "--seeds", "2", "--fractions", "0.1,0.3", "--json",
        ]);
        outputs.push((
            o.stdout,
            fs::read(out.join("fit.json")).unwrap(),
            fs::read(&weights).unwrap(),
            e.stdout,
            t.stdout,
            fs::read(out.join("points.csv")).unwrap(),
            d.stdout,
        ));
    }
    assert!(outputs[0] == outputs[1]);
    let stdout = String::from_utf8(outputs[0].3.clone()).unwrap();
    assert!(!stdout.is_empty());
}

#[test]
fn parallel_seeds_do_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_repkit"))
            .args(["debug-sim", "--manifest", s(&manifest), "--seeds", "3", "--fractions", "0.2", "--json"])
            .env("REPKIT_THREADS", threads)
            .output()
            .unwrap()
    };
    let (one, four) = (run("1"), run("4"));
    assert_eq!(code(&one), 0);
    assert_eq!(one.stdout, four.stdout);
    assert_eq!(code(&run("zero")), 1);
}

#[test]
fn debug_sim_writes_metric_by_checkpoint_rows() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = dir.path().join("sim");
    let o = repkit(&["debug-sim", "--manifest", s(&manifest), "--seeds", "5", "--corruption", "0.4", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("curves.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert!(lines.next().unwrap().starts_with("metric,fraction_checked"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 10);
    for metric in ["representer", "influence", "random"] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(metric)).count(), 10);
    }
    let sim: Value = serde_json::from_str(&fs::read_to_string(out.join("sim.json")).unwrap()).unwrap();
    assert_eq!(sim["config"]["seeds"], 5);
    assert_eq!(sim["result"]["metadata"]["seeds"].as_array().unwrap().len(), 5);
    let hash = sim["config_hash"].as_str().unwrap();
    assert!(csv.contains(hash));
    assert!(fs::read_to_string(out.join("run.log")).unwrap().contains(hash));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let m = s(&manifest);

    assert_eq!(code(&repkit(&["fit", "--no-such-flag"])), 1);
    assert_eq!(code(&repkit(&["fit"])), 1);
    assert_eq!(code(&repkit(&["fit", "--manifest", m, "--loss", "hinge"])), 1);
    assert_eq!(code(&repkit(&["fit", "--manifest", m, "--lambda", "-1"])), 1);
    assert_eq!(code(&repkit(&["synth"])), 1);
    assert_eq!(code(&repkit(&["--help"])), 0);

    assert_eq!(code(&repkit(&["fit", "--manifest", s(&dir.path().join("missing.json"))])), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&repkit(&["ingest", "--manifest", s(&bad)])), 2);

    let out = dir.path().join("short");
    let o = repkit(&["fit", "--manifest", m, "--max-iters", "2", "--out", s(&out), "--json"]);
    assert_eq!(code(&o), 3);
    assert_eq!(json_stdout(&o)["result"]["report"]["converged"], false);
    assert!(out.join("fit.json").exists());
    assert!(out.join("weights.rpmx").exists());

    // consuming uncertified weights is a data error
    let w = out.join("weights.rpmx");
    for cmd in ["alphas", "explain", "fidelity", "influence"] {
        let o = repkit(&[cmd, "--manifest", m, "--weights", s(&w)]);
        assert_eq!(code(&o), 2, "{cmd}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("stale"), "{cmd}");
    }
    assert_eq!(code(&repkit(&["serve", "--manifest", s(&dir.path().join("missing.json"))])), 2);
}

#[test]
fn config_file_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let cfg = dir.path().join("repkit.toml");
    fs::write(&cfg, "[fit]\nlambda = 0.5\nmax_iters = 5000\n").unwrap();
    let lambda_of = |extra: &[&str]| {
        let mut args = vec!["fit", "--manifest", s(&manifest), "--json"];
        args.extend_from_slice(extra);
        let o = repkit(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let r = json_stdout(&o);
        (r["config"]["lambda"].as_f64().unwrap(), r["config"]["max_iters"].as_u64().unwrap(), r["config_hash"].clone())
    };
    let (l0, it0, h0) = lambda_of(&[]);
    let (l1, it1, h1) = lambda_of(&["--config", s(&cfg)]);
    let (l2, it2, h2) = lambda_of(&["--config", s(&cfg), "--lambda", "0.2"]);
    assert_eq!((l0, it0), (0.01, 100_000));
    assert_eq!((l1, it1), (0.5, 5000));
    assert_eq!((l2, it2), (0.2, 5000));
    assert!(h0 != h1 && h1 != h2);

    fs::write(&cfg, "[fit]\nlamda = 0.5\n").unwrap();
    assert_eq!(code(&repkit(&["fit", "--manifest", s(&manifest), "--config", s(&cfg)])), 1);
}

#[test]
fn ingest_reports_and_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    fs::create_dir_all(&raw).unwrap();
    fs::write(raw.join("train.csv"), "1,0\n0,0\n0.5,0.5\n1,1\n").unwrap();
    fs::write(raw.join("test.csv"), "1,2\n").unwrap();
    fs::write(raw.join("train_labels.txt"), "0\n1\n1\n0\n").unwrap();
    fs::write(raw.join("test_labels.txt"), "1\n").unwrap();
    let manifest = raw.join("manifest.json");
    fs::write(
        &manifest,
        r#"{"name":"tiny","n_train":4,"n_test":1,"feature_dim":2,"num_classes":2,
           "train_features":"train.csv","test_features":"test.csv",
           "train_labels":"train_labels.txt","test_labels":"test_labels.txt"}"#,
    )
    .unwrap();
    let out = dir.path().join("ingested");
    let o = repkit(&["ingest", "--manifest", s(&manifest), "--out", s(&out), "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json_stdout(&o);
    assert_eq!(r["result"]["warnings"].as_array().unwrap().len(), 1);
    assert!(out.join("input_manifest.json").exists());
    let normalized = out.join("bundle").join("manifest.json");
    let o = repkit(&["fit", "--manifest", s(&normalized)]);
    assert_eq!(code(&o), 0);
}

#[test]
fn toy_commands() {
    let dir = tempfile::tempdir().unwrap();
    let o = repkit(&["toy-study", "--out", s(dir.path()), "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json_stdout(&o)["result"].clone();
    assert!(r["max_abs_influence"].as_f64().unwrap() <= 1e-8);
    assert!(r["max_abs_alpha"].as_f64().unwrap() >= 1e-4);
    assert!(r.get("seconds").is_none());
    assert!(dir.path().join("points.csv").exists());

    let o = repkit(&["sensitivity", "--plain", "--probe", "-2.5,0.5", "--out", s(dir.path()), "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json_stdout(&o)["result"].clone();
    assert!(r["decomposition"]["relative_residual"].as_f64().unwrap() <= 1e-6);
    assert_eq!(r["decomposition"]["class"], 0);
    assert!(dir.path().join("maps.csv").exists());
    assert_eq!(code(&repkit(&["sensitivity", "--probe", "1,2,3"])), 1);
}

#[test]
fn influence_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = dir.path().join("fit");
    assert_eq!(code(&repkit(&["fit", "--manifest", s(&manifest), "--out", s(&out)])), 0);
    let o = repkit(&[
        "influence", "--manifest", s(&manifest), "--weights", s(&out.join("weights.rpmx")),
        "--test", "1", "--distribution", "5", "--json",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json_stdout(&o)["result"].clone();
    assert_eq!(r["report"]["values"].as_array().unwrap().len(), 120);
    assert_eq!(r["distributions"]["representer"]["total"], 5);

    let o = repkit(&["bench", "--manifest", s(&manifest), "--test-points", "3", "--out", s(&out), "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json_stdout(&o)["result"]["report"].clone();
    assert_eq!(r["representer"]["per_test_seconds"]["samples"], 3);
    assert_eq!(r["influence"]["fine_tuning_seconds"]["mean"], 0.0);
    assert!(fs::read_to_string(out.join("bench.txt")).unwrap().contains("Representer"));
}
