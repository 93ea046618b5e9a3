use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn sguda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sguda"))
        .args(args)
        .env("SGUDA_THREADS", "1")
        .output()
        .expect("spawn sguda")
}

fn tiny_config(dir: &Path) -> String {
    let cfg = json!({
        "data": { "num_source_identities": 12, "num_target_identities": 10, "num_test_identities": 6,
                  "samples_per_identity": 8, "input_dim": 8, "latent_dim": 4 },
        "encoder": { "input_dim": 8, "block_dims": [12, 12, 12], "embed_dim": 8, "shared_depth": 2 },
        "init_epochs": 4, "n_iter": 2, "n_epoch": 1,
        "pk": { "p": 4, "k": 4, "batches_per_epoch": 5 },
        "clusterer": "kmeans", "k": 8,
        "optimizer": { "lr": 0.01 }, "uda_lr": 0.01
    });
    let path = dir.join("tiny.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn resolved(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("config_resolved.json")).unwrap()).unwrap()
}

#[test]
fn help_exits_zero() {
    assert_eq!(sguda(&["--help"]).status.code(), Some(0));
    assert_eq!(sguda(&["uda-run", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(sguda(&[]).status.code(), Some(2));
    assert_eq!(sguda(&["uda-run", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(sguda(&["uda-run", "--p", "abc"]).status.code(), Some(2));
    assert_eq!(sguda(&["uda-run", "--mode", "sideways"]).status.code(), Some(2));
    assert_eq!(sguda(&["uda-run", "--reduction", "max"]).status.code(), Some(2));
    assert_eq!(sguda(&["uda-run", "--p", "2.0", "--out", out]).status.code(), Some(2));
    assert_eq!(sguda(&["sweep", "--axis", "p", "--out", out]).status.code(), Some(2));
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"no_such_key": 1}"#).unwrap();
    let o = sguda(&["generate", "--config", bad.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn runtime_failures_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let missing = tmp.path().join("missing");
    let o = sguda(&[
        "uda-run",
        "--data",
        missing.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = sguda(&[
        "evaluate",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn flags_override_config_file_and_toml_matches_json() {
    let tmp = tempfile::tempdir().unwrap();
    let toml_path = tmp.path().join("c.toml");
    fs::write(
        &toml_path,
        "seed = 9\nn_iter = 3\n[dbscan]\np = 0.01\nmin_samples = 5\n",
    )
    .unwrap();
    let json_path = tmp.path().join("c.json");
    fs::write(
        &json_path,
        r#"{"seed": 9, "n_iter": 3, "dbscan": {"p": 0.01, "min_samples": 5}}"#,
    )
    .unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(sguda(&[
        "generate",
        "--config",
        toml_path.to_str().unwrap(),
        "--out",
        a.to_str().unwrap()
    ])
    .status
    .success());
    assert!(sguda(&[
        "generate",
        "--config",
        json_path.to_str().unwrap(),
        "--out",
        b.to_str().unwrap()
    ])
    .status
    .success());
    assert_eq!(resolved(&a), resolved(&b));
    let r = resolved(&a);
    assert_eq!(r["seed"], 9);
    // a file sets exactly the fields it names; only the flag ties the data seed
    assert_eq!(r["data"]["seed"], 42);
    assert_eq!(r["dbscan"]["min_samples"], 5);

    let o = sguda(&[
        "generate",
        "--config",
        toml_path.to_str().unwrap(),
        "--p",
        "0.02",
        "--seed",
        "4",
        "--reduction",
        "mean",
        "--out",
        c.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let r = resolved(&c);
    assert_eq!(r["dbscan"]["p"], 0.02);
    assert_eq!(r["dbscan"]["min_samples"], 5);
    assert_eq!(r["n_iter"], 3);
    assert_eq!(r["seed"], 4);
    assert_eq!(r["data"]["seed"], 4);
    assert_eq!(r["loss"]["reduction"], "mean");
}

#[test]
fn defaults_are_documented_values() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(sguda(&["generate", "--out", tmp.path().to_str().unwrap()])
        .status
        .success());
    let r = resolved(tmp.path());
    assert_eq!(r["seed"], 42);
    assert_eq!(r["mode"], "source_guided");
    assert_eq!(r["clusterer"], "dbscan");
    assert_eq!(r["dbscan"]["p"], 0.0016);
    assert_eq!(r["pk"]["p"], 16);
    assert_eq!(r["pk"]["k"], 4);
    assert_eq!(r["encoder"]["shared_depth"], 3);
    assert_eq!(r["loss"]["margin"], 0.3);
    assert_eq!(r["n_iter"], 5);
    assert_eq!(r["n_epoch"], 5);
    assert_eq!(r["init_epochs"], 40);
}

#[test]
fn generate_then_train_and_evaluate_from_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let gen = tmp.path().join("gen");
    assert!(sguda(&["generate", "--config", &cfg, "--out", gen.to_str().unwrap()])
        .status
        .success());
    let data = gen.join("data");
    assert!(data.join("source_train.csv").exists());

    let init = tmp.path().join("init");
    let o = sguda(&[
        "init-train",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--out",
        init.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(init.join("init.ckpt").exists() && init.join("init_report.json").exists());

    let ev = tmp.path().join("eval");
    let o = sguda(&[
        "evaluate",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        init.join("init.ckpt").to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));

    // a source_only run evaluates the same initial encoder
    let so = tmp.path().join("so");
    let o = sguda(&[
        "uda-run",
        "--config",
        &cfg,
        "--data",
        data.to_str().unwrap(),
        "--mode",
        "source_only",
        "--out",
        so.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let r0: Value = serde_json::from_str(&fs::read_to_string(so.join("report_iter0.json")).unwrap()).unwrap();
    assert_eq!(r0["map"].as_f64().unwrap(), map);
}

#[test]
fn uda_run_writes_artifacts_and_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    let o = sguda(&["uda-run", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "config_resolved.json",
        "report_iter1.json",
        "report_iter2.json",
        "pseudo_iter1.csv",
        "loss_curve.csv",
        "encoder.ckpt",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(sguda(&["plot-data", "--run-dir", run.to_str().unwrap()])
        .status
        .success());
    let csv = fs::read_to_string(run.join("map_vs_axis.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("axis,value,map,cmc1,map_std\niteration,1,"));
}

#[test]
fn sweep_writes_one_row_per_value_with_std() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("sweep");
    let o = sguda(&[
        "sweep",
        "--config",
        &cfg,
        "--axis",
        "k",
        "--values",
        "4,6,8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis,value,map,cmc1,cmc5,cmc10,clusters,error,map_std");
    assert_eq!(lines.len(), 4);
    let std: Vec<&str> = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap()).collect();
    assert!(std.iter().all(|s| *s == std[0] && !s.is_empty()));
    // the axis must fit the clusterer
    let o = sguda(&[
        "sweep",
        "--config",
        &cfg,
        "--axis",
        "p",
        "--values",
        "0.1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(o.status.success() && csv.lines().nth(1).unwrap().contains("requires the dbscan clusterer"));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = sguda(&["gradcheck", "--seed", "7", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(!text.contains("FAIL"));
    assert!(text.contains("seed 9"));
}
