use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use spvim_cli::commands::fit_model;
use spvim_cli::RunConfig;
use spvim_core::data::{Dataset, Metric, OutcomeTransform};
use tempfile::TempDir;

fn spvim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spvim"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = spvim(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

/// Runs a command expected to fail and returns the error kind.
fn fails(dir: &Path, args: &[&str]) -> String {
    let out = spvim(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err: Value = serde_json::from_slice(&out.stderr).expect("error is JSON");
    assert!(err["error"]["message"].is_string());
    err["error"]["kind"].as_str().unwrap().to_string()
}

fn simulate(dir: &Path, seed: u64, n: usize) -> PathBuf {
    let name = format!("sim{seed}_{n}.csv");
    ok(dir, &["simulate", "--seed", &seed.to_string(), "--n", &n.to_string(), "--out", &name]);
    dir.join(name)
}

#[test]
fn simulate_writes_header_plus_n_rows_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["simulate", "--out", "a.csv"]);
    ok(dir.path(), &["simulate", "--out", "b.csv"]);
    let a = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(a.lines().count(), 301);
    assert_eq!(a, fs::read_to_string(dir.path().join("b.csv")).unwrap());
    assert_eq!(
        fs::read(dir.path().join("a.json")).unwrap(),
        fs::read(dir.path().join("b.json")).unwrap()
    );
    ok(dir.path(), &["simulate", "--seed", "1", "--out", "c.csv"]);
    assert_ne!(a, fs::read_to_string(dir.path().join("c.csv")).unwrap());
}

#[test]
fn sidecar_variances_match_the_calibration_targets() {
    let dir = TempDir::new().unwrap();
    let mut sum = [0.0; 3];
    let seeds = 20;
    for seed in 0..seeds {
        let csv = simulate(dir.path(), seed, 300);
        let side: Value = serde_json::from_slice(&fs::read(csv.with_extension("json")).unwrap()).unwrap();
        let v = &side["variances"];
        for (s, key) in sum.iter_mut().zip(["mean", "spatial", "nugget"]) {
            *s += v[key].as_f64().unwrap() / seeds as f64;
        }
        assert_eq!(side["active"].as_array().unwrap().len(), 5);
    }
    for (got, target) in sum.iter().zip([2.21, 1.07, 1.02]) {
        assert!((got / target - 1.0).abs() <= 0.15, "{sum:?}");
    }
}

#[test]
fn predict_reproduces_in_process_fit() {
    let dir = TempDir::new().unwrap();
    let csv = simulate(dir.path(), 4, 80);
    let d = dir.path();
    for model in ["ukpls", "spatrf"] {
        ok(d, &[
            "fit", "--data", csv.to_str().unwrap(), "--model", model, "--components", "2",
            "--n-trees", "4", "--seed", "5", "--out", "m.json",
        ]);
        ok(d, &["predict", "--model-file", "m.json", "--data", csv.to_str().unwrap(), "--out", "p.csv"]);

        let mut cfg = RunConfig::default();
        for (k, v) in [("model", model), ("components", "2"), ("n_trees", "4"), ("seed", "5")] {
            cfg.set(k, v).unwrap();
        }
        let data = Dataset::from_csv_path(&csv, Metric::Euclidean, OutcomeTransform::Identity).unwrap();
        let fitted = fit_model(&cfg, &data).unwrap();
        let expected = fitted.predict(data.x(), data.sites()).unwrap();

        let mut rdr = csv::Reader::from_path(d.join("p.csv")).unwrap();
        let got: Vec<f64> = rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
        assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(&expected) {
            assert_eq!(a.to_bits(), b.to_bits(), "{model}");
        }
    }
}

#[test]
fn importance_emits_p_times_m_rows_and_a_report() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let csv = simulate(d, 2, 60);
    let data = csv.to_str().unwrap();
    ok(d, &["fit", "--data", data, "--model", "ukpls", "--components", "2", "--out", "m.json"]);
    ok(d, &["importance", "--model-file", "m.json", "--data", data, "--quantiles", "0.25,0.5,0.75", "--out", "imp.csv"]);
    let text = fs::read_to_string(d.join("imp.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("covariate,q_level,quantile_value,mu_bar"));
    assert_eq!(lines.count(), 30 * 3);
    let report: Value = serde_json::from_slice(&fs::read(d.join("imp.json")).unwrap()).unwrap();
    assert_eq!(report["policy"], "full_refit");
    assert_eq!(report["ranking"].as_array().unwrap().len(), 30);
    assert_eq!(report["contrasts"].as_array().unwrap().len(), 30);

    ok(d, &["importance", "--model-file", "m.json", "--data", data, "--quantiles", "0.1,0.9", "--policy", "weights", "--out", "two.csv"]);
    let report: Value = serde_json::from_slice(&fs::read(d.join("two.json")).unwrap()).unwrap();
    assert!(report["contrasts"].is_null());
    assert_eq!(fs::read_to_string(d.join("two.csv")).unwrap().lines().count(), 61);

    let summary = ok(d, &["report", "--model-file", "m.json", "--importance-file", "imp.json"]);
    assert_eq!(summary["kind"], "ukpls");
    assert_eq!(summary["latent_components"], 2);
    assert_eq!(summary["importance"]["ranking"], report_ranking(d));
}

fn report_ranking(d: &Path) -> Value {
    let r: Value = serde_json::from_slice(&fs::read(d.join("imp.json")).unwrap()).unwrap();
    r["ranking"].clone()
}

#[test]
fn end_to_end_ranking_recovers_the_active_blocks() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let csv = simulate(d, 21, 300);
    let data = csv.to_str().unwrap();
    ok(d, &["fit", "--data", data, "--model", "ukpls", "--out", "m.json"]);
    ok(d, &["importance", "--model-file", "m.json", "--data", data, "--policy", "weights", "--out", "imp.csv"]);
    let side: Value = serde_json::from_slice(&fs::read(csv.with_extension("json")).unwrap()).unwrap();
    let corr: Vec<f64> = serde_json::from_value(side["max_abs_corr_with_active"].clone()).unwrap();
    let names: Vec<String> = csv::Reader::from_path(&csv)
        .unwrap()
        .headers()
        .unwrap()
        .iter()
        .skip(4)
        .map(str::to_string)
        .collect();
    let ranking: Vec<String> = serde_json::from_value(report_ranking(d)).unwrap();
    for name in &ranking[..5] {
        let j = names.iter().position(|n| n == name).unwrap();
        assert!(corr[j] > 0.5, "{name} ranked in the top five with max |corr| {}", corr[j]);
    }
}

#[test]
fn commands_are_idempotent_and_leave_inputs_alone() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let csv = simulate(d, 8, 60);
    let data = csv.to_str().unwrap();
    let before = fs::read(&csv).unwrap();
    for out in ["m1.json", "m2.json"] {
        ok(d, &["fit", "--data", data, "--model", "spatrf", "--n-trees", "3", "--out", out]);
    }
    for out in ["i1.csv", "i2.csv"] {
        ok(d, &["--workers", "1", "importance", "--model-file", "m1.json", "--data", data, "--policy", "weights", "--out", out]);
    }
    ok(d, &["--workers", "4", "importance", "--model-file", "m1.json", "--data", data, "--policy", "weights", "--out", "i4.csv"]);
    for out in ["c1.json", "c2.json"] {
        ok(d, &["cv", "--data", data, "--model", "ukpls", "--components", "2", "--folds", "5", "--out", out]);
    }
    let same = |a: &str, b: &str| assert_eq!(fs::read(d.join(a)).unwrap(), fs::read(d.join(b)).unwrap(), "{a} vs {b}");
    same("m1.json", "m2.json");
    same("i1.csv", "i2.csv");
    same("i1.json", "i2.json");
    same("i1.csv", "i4.csv");
    same("c1.json", "c2.json");
    same("c1.errors.csv", "c2.errors.csv");
    assert_eq!(fs::read(&csv).unwrap(), before);

    let cv: Value = serde_json::from_slice(&fs::read(d.join("c1.json")).unwrap()).unwrap();
    assert_eq!(cv["per_fold_r2"].as_array().unwrap().len(), 5);
    assert!(cv["r2"].is_number());
    let errors = fs::read_to_string(d.join("c1.errors.csv")).unwrap();
    assert!(errors.starts_with("site_id,y,y_hat,error\n"));
    assert_eq!(errors.lines().count(), 61);
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), "# small run\nn = 40\nseed = 3\nout = cfg.csv\n").unwrap();
    ok(d, &["--config", "run.cfg", "simulate"]);
    assert_eq!(fs::read_to_string(d.join("cfg.csv")).unwrap().lines().count(), 41);
    ok(d, &["simulate", "--config", "run.cfg", "--n", "25"]);
    assert_eq!(fs::read_to_string(d.join("cfg.csv")).unwrap().lines().count(), 26);
}

#[test]
fn failures_report_machine_readable_errors() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let csv = simulate(d, 9, 40);
    let data = csv.to_str().unwrap();
    assert_eq!(fails(d, &["fit", "--data", "missing.csv", "--model", "ukpls", "--out", "m.json"]), "io");
    assert_eq!(fails(d, &["fit", "--data", data, "--model", "nonsense", "--out", "m.json"]), "config");
    assert_eq!(fails(d, &["fit", "--data", data, "--out", "m.json"]), "config");
    assert_eq!(fails(d, &["fit", "--data", data, "--model", "intercept", "--out", "m.json"]), "config");
    assert_eq!(fails(d, &["fit", "--no-such-flag"]), "usage");
    fs::write(d.join("bad.cfg"), "colour = red\n").unwrap();
    assert_eq!(fails(d, &["--config", "bad.cfg", "simulate", "--out", "x.csv"]), "config");

    ok(d, &["fit", "--data", data, "--model", "ukpls", "--components", "2", "--out", "m.json"]);
    let text = fs::read_to_string(d.join("m.json")).unwrap();
    fs::write(d.join("old.json"), text.replacen("\"format_version\":1", "\"format_version\":99", 1)).unwrap();
    assert_eq!(fails(d, &["predict", "--model-file", "old.json", "--data", data, "--out", "p.csv"]), "parse");

    // drop the last covariate column
    let narrow: String = fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    fs::write(d.join("narrow.csv"), narrow).unwrap();
    assert_eq!(fails(d, &["predict", "--model-file", "m.json", "--data", "narrow.csv", "--out", "p.csv"]), "invalid_input");
    assert_eq!(fails(d, &["importance", "--model-file", "m.json", "--data", "narrow.csv", "--out", "i.csv"]), "invalid_input");
    assert_eq!(fails(d, &["importance", "--model-file", "m.json", "--data", data, "--quantiles", "0.5,0.2", "--out", "i.csv"]), "config");
}

#[test]
fn predict_accepts_reordered_columns_without_outcome() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let csv = simulate(d, 12, 50);
    let data = csv.to_str().unwrap();
    ok(d, &["fit", "--data", data, "--model", "ukpls", "--components", "2", "--out", "m.json"]);
    ok(d, &["predict", "--model-file", "m.json", "--data", data, "--out", "a.csv"]);

    let mut rdr = csv::Reader::from_path(&csv).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(str::to_string).collect();
    let mut order: Vec<usize> = vec![0, 1, 2];
    order.extend((4..header.len()).rev());
    let mut w = csv::Writer::from_path(d.join("shuffled.csv")).unwrap();
    w.write_record(order.iter().map(|&c| header[c].as_str())).unwrap();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        w.write_record(order.iter().map(|&c| &rec[c])).unwrap();
    }
    w.flush().unwrap();
    ok(d, &["predict", "--model-file", "m.json", "--data", "shuffled.csv", "--out", "b.csv"]);
    assert_eq!(fs::read(d.join("a.csv")).unwrap(), fs::read(d.join("b.csv")).unwrap());
}
