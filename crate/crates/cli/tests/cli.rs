//! Black-box tests of the `ddr` binary: artifact layout, exit codes, column
//! contracts. Training configs here are deliberately tiny; quality is covered
//! elsewhere.

use std::path::Path;
use std::process::{Command, Output};

fn ddr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary spawns")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_config(dir: &Path) -> &'static str {
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"mode":"ddr-joint","epochs":3,"batch_size":64,"lr":0.003,"patience":3,
            "arch":{"input_dim":1,"feature_widths":[8],"regression_widths":[8],
                    "injection":"linear","output_dim":1}}"#,
    )
    .unwrap();
    "cfg.json"
}

fn generate(dir: &Path, out: &str) {
    ok(&ddr(
        dir,
        &["generate", "--family", "linear-constant", "--n", "400", "--seed", "3", "--out", out],
    ));
}

fn train_small(dir: &Path, model: &str) {
    generate(dir, "d.csv");
    let cfg = small_config(dir);
    ok(&ddr(
        dir,
        &["train", "--data", "d.csv", "--out", model, "--config", cfg, "--seed", "7"],
    ));
}

#[test]
fn generate_is_deterministic_and_writes_a_parsable_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let msg = {
        ok(&ddr(dir, &["generate", "--family", "sin-constant", "--n", "50", "--out", "a.csv"]));
        ok(&ddr(dir, &["generate", "--family", "sin-constant", "--n", "50", "--out", "b.csv"]))
    };
    assert!(msg.contains("b.csv") && msg.contains("50 rows"), "{msg}");

    let a = std::fs::read(dir.join("a.csv")).unwrap();
    let b = std::fs::read(dir.join("b.csv")).unwrap();
    assert_eq!(a, b, "same spec, different csv bytes");

    let sidecar = std::fs::read_to_string(dir.join("a.csv.oracle.json")).unwrap();
    let spec: ddr_core::data::SyntheticSpec = serde_json::from_str(&sidecar).unwrap();
    assert_eq!(spec.n, 50);

    let header = String::from_utf8_lossy(&a);
    assert!(header.starts_with("x1,y\n"), "unexpected header: {header:.20}");
}

#[test]
fn unknown_family_is_a_usage_error_listing_the_families() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddr(dir.path(), &["generate", "--family", "banana", "--n", "10", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("ddr: error:"), "{err}");
    assert!(err.contains("linear-constant"), "families not listed: {err}");
}

#[test]
fn train_without_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddr(dir.path(), &["train", "--out", "m"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ddr: error:"));
}

#[test]
fn train_evaluate_roundtrip_reports_consistent_scores() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    train_small(dir, "m.ddr");
    assert!(dir.join("m.ddr.log.json").exists());
    assert!(dir.join("m.ddr.epochs.csv").exists());

    ok(&ddr(
        dir,
        &["evaluate", "--model", "m.ddr", "--data", "d.csv", "--oracle", "d.csv.oracle.json",
          "--out", "r.json"],
    ));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();

    assert_eq!(report["units"], "original");
    assert_eq!(report["crossing_grid"], 101);
    let per: Vec<f64> = report["per_decile"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(per.len(), 9);
    let qs = report["qs"].as_f64().unwrap();
    assert!((qs - per.iter().sum::<f64>()).abs() <= 1e-12);
    assert!(report["recover_q"].is_f64() && report["recover_f"].is_f64());
    assert_eq!(report["oracle_gap"]["per_decile"].as_array().unwrap().len(), 9);
}

#[test]
fn evaluate_csv_flag_emits_a_flat_record() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    train_small(dir, "m.ddr");
    ok(&ddr(
        dir,
        &["evaluate", "--model", "m.ddr", "--data", "d.csv", "--out", "r.json",
          "--csv", "r.csv"],
    ));
    let text = std::fs::read_to_string(dir.join("r.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("units,n_rows,qs,"), "{}", lines[0]);
}

#[test]
fn nine_net_baseline_writes_one_file_per_decile() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    generate(dir, "d.csv");
    std::fs::write(
        dir.join("f.json"),
        r#"{"mode":"fcnn","epochs":2,"batch_size":64,"lr":0.003,"patience":2,
            "arch":{"input_dim":1,"feature_widths":[8],"regression_widths":[8],
                    "injection":"linear","output_dim":1}}"#,
    )
    .unwrap();
    ok(&ddr(
        dir,
        &["train", "--data", "d.csv", "--out", "m", "--config", "f.json", "--seed", "1"],
    ));
    for k in 1..=9 {
        assert!(dir.join(format!("m.q{}0", k)).exists(), "missing m.q{}0", k);
    }

    ok(&ddr(dir, &["evaluate", "--model", "m", "--data", "d.csv", "--out", "r.json"]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
    // fixed-percentile nets are scored for crossings on their own deciles
    assert_eq!(report["crossing_grid"], 9);

    let out = ddr(dir, &["predict", "--model", "m", "--data", "d.csv", "--tau", "0.25"]);
    assert_eq!(out.status.code(), Some(1), "off-decile tau must fail");
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ddr: error:"));

    let out = ddr(dir, &["evaluate", "--model", "m", "--data", "d.csv", "--mode", "dual"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("F head"), "unexpected message: {err}");
}

#[test]
fn predict_emits_the_requested_columns() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    train_small(dir, "m.ddr");
    ok(&ddr(
        dir,
        &["predict", "--model", "m.ddr", "--data", "d.csv", "--tau", "0.1,0.5,0.9",
          "--ytilde", "0.5", "--median", "--mean", "--out", "p.csv"],
    ));
    let text = std::fs::read_to_string(dir.join("p.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "x1,q10,q50,q90,F(0.5),median,mean_trapz"
    );
    assert_eq!(lines.count(), 400);
}

#[test]
fn dual_alpha_one_matches_direct_predictions_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    train_small(dir, "m.ddr");
    ok(&ddr(
        dir,
        &["predict", "--model", "m.ddr", "--data", "d.csv", "--tau", "0.3", "--out", "a.csv"],
    ));
    ok(&ddr(
        dir,
        &["predict", "--model", "m.ddr", "--data", "d.csv", "--tau", "0.3",
          "--mode", "dual", "--alpha", "1", "--out", "b.csv"],
    ));
    assert_eq!(
        std::fs::read(dir.join("a.csv")).unwrap(),
        std::fs::read(dir.join("b.csv")).unwrap()
    );
}

#[test]
fn curves_writes_the_requested_grid() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    train_small(dir, "m.ddr");
    ok(&ddr(
        dir,
        &["curves", "--model", "m.ddr", "--grid", "21", "--out", "c.csv"],
    ));
    let text = std::fs::read_to_string(dir.join("c.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 22);
    assert_eq!(lines[0], "x,q10,q20,q30,q40,q50,q60,q70,q80,q90");
    assert!(lines[1].starts_with("-1,"), "{}", lines[1]);

    ok(&ddr(
        dir,
        &["curves", "--model", "m.ddr", "--grid", "5", "--taus", "0.25,0.75", "--mean",
          "--out", "c2.csv"],
    ));
    let text = std::fs::read_to_string(dir.join("c2.csv")).unwrap();
    assert!(text.starts_with("x,q25,q75,mean_trapz\n"), "{text:.40}");
}

#[test]
fn multi_seed_training_writes_suffixed_artifacts_in_seed_order() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    generate(dir, "d.csv");
    let cfg = small_config(dir);
    let msg = ok(&ddr(
        dir,
        &["train", "--data", "d.csv", "--out", "m", "--config", cfg, "--seeds", "2,1",
          "--jobs", "2"],
    ));
    for seed in [1, 2] {
        assert!(dir.join(format!("m.s{seed}")).exists());
        assert!(dir.join(format!("m.s{seed}.log.json")).exists());
        assert!(dir.join(format!("m.s{seed}.epochs.csv")).exists());
    }
    let first = msg.find("seed 2:").expect("first requested seed reported");
    let second = msg.find("seed 1:").expect("second requested seed reported");
    assert!(first < second, "seed messages out of request order: {msg}");
}
