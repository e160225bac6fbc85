use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn atlas_kit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atlas-kit"))
        .args(args)
        .env_remove("ATLAS_KIT_THREADS")
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(atlas_kit(&["--help"]).status.code(), Some(0));
    assert_eq!(atlas_kit(&["--version"]).status.code(), Some(0));
    assert_eq!(atlas_kit(&["plan", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = out.to_str().unwrap();
    assert_eq!(atlas_kit(&[]).status.code(), Some(2));
    assert_eq!(atlas_kit(&["fit", "--out", o]).status.code(), Some(2));
    assert_eq!(atlas_kit(&["plan", "--out", o, "--r", "4"]).status.code(), Some(2));
    assert_eq!(atlas_kit(&["plan", "--out", o, "--r", "4", "--phi-alpha", "0.2"]).status.code(), Some(2));
    assert_eq!(atlas_kit(&["eval", "--out", o, "--runs", "x.jsonl", "--catalog", "c.csv", "--axes", "q"]).status.code(), Some(2));
    assert!(!out.exists());
    let bad = Command::new(env!("CARGO_BIN_EXE_atlas-kit"))
        .args(["plan", "--out", o, "--r", "4", "--phi-alpha", "0.2", "--psi-beta", "0.1"])
        .env("ATLAS_KIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn data_errors_exit_one_and_leave_a_marker() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs.jsonl");
    fs::write(&runs, "{\"run_id\": \"broken\"\n").unwrap();
    let out = tmp.path().join("o");
    let o = atlas_kit(&["fit", "--out", out.to_str().unwrap(), "--runs", runs.to_str().unwrap(), "--law", "bsl", "--target", "fr"]);
    assert_eq!(o.status.code(), Some(1));
    let marker = fs::read_to_string(out.join("FAILED")).unwrap();
    assert!(!marker.trim().is_empty());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());

    let missing = atlas_kit(&["crossover", "--out", out.to_str().unwrap(), "--curves", "/nonexistent/curves.csv"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(fs::read_to_string(out.join("FAILED")).unwrap().contains("/nonexistent/curves.csv"));
}

#[test]
fn plan_from_ratios_matches_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    let o = atlas_kit(&["plan", "--out", out.to_str().unwrap(), "--r", "4", "--phi-alpha", "0.5", "--psi-beta=-0.25"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("FAILED").exists());
    let plan = json(&out.join("plan.json"));
    assert_eq!(plan["schema_version"], "atlas-kit.plan/1");
    let m = &plan["multipliers"];
    assert!((m["n_ratio"].as_f64().unwrap() - 2.0).abs() < 1e-12);
    assert!((m["d_t_ratio"].as_f64().unwrap() - 4f64.powf(-0.25)).abs() < 1e-12);
    assert!((m["c_ratio"].as_f64().unwrap() - 2.0 * 4.0 * 4f64.powf(-0.25)).abs() < 1e-12);
    let meta = json(&out.join("run_meta.json"));
    assert_eq!(meta["command"], "plan");
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("atlas.toml");
    fs::write(&cfg, "seed = 9\n[plan]\nr = 2.0\nphi_alpha = 0.5\npsi_beta = 0.0\nsweep = [1.0]\n").unwrap();
    let out = tmp.path().join("p");
    let o = atlas_kit(&["plan", "--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--r", "16"]);
    // The file's sweep needs exponents, which ratios do not give.
    assert_eq!(o.status.code(), Some(2));

    fs::write(&cfg, "seed = 9\n[plan]\nr = 2.0\nphi_alpha = 0.5\npsi_beta = 0.0\n").unwrap();
    let o = atlas_kit(&["plan", "--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--r", "16"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let plan = json(&out.join("plan.json"));
    assert_eq!(plan["config"]["r"], "16");
    assert_eq!(plan["config"]["seed"], "9");
    assert_eq!(plan["config"]["phi_alpha"], "0.5");
    assert!((plan["multipliers"]["n_ratio"].as_f64().unwrap() - 4.0).abs() < 1e-12);

    fs::write(&cfg, "[plan]\nnot_a_setting = 1\n").unwrap();
    let o = atlas_kit(&["plan", "--out", out.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--r", "16"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_then_fit_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n).to_string_lossy().into_owned();
    let o = atlas_kit(&["synth", "--out", &p("data"), "--noise", "0", "--seed", "1", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = format!("{}/runs.csv", p("data"));
    let catalog = format!("{}/catalog.csv", p("data"));
    let o = atlas_kit(&["fit", "--out", &p("fit"), "--runs", &runs, "--catalog", &catalog, "--target", "fr", "--transfer-set", "en,de,es"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let fit = json(&tmp.path().join("fit/fit.json"));
    assert!((fit["law"]["params"]["alpha"].as_f64().unwrap() - 0.35).abs() < 1e-4);
    assert!(fit["train_r2"].as_f64().unwrap() > 0.999_999);
    let residuals = fs::read_to_string(tmp.path().join("fit/residuals.csv")).unwrap();
    assert!(residuals.lines().count() > 100);

    let o = atlas_kit(&["eval", "--out", &p("eval"), "--runs", &runs, "--catalog", &catalog, "--law", "atlas_full", "--targets", "fr", "--axes", "n"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(tmp.path().join("eval/eval_table.txt")).unwrap();
    assert!(table.contains("R2(N)"));
    assert!(!tmp.path().join("eval/plot_eval.csv").exists());
}

#[test]
fn transfer_and_crossover_on_the_curve_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n).to_string_lossy().into_owned();
    assert_eq!(atlas_kit(&["synth", "--out", &p("bank"), "--preset", "curves", "--noise", "0"]).status.code(), Some(0));
    let curves = format!("{}/curves.csv", p("bank"));
    let o = atlas_kit(&["transfer", "--out", &p("t"), "--curves", &curves, "--d-mono", "1e9", "--d-max", "1e10", "--trees", "50"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let prov = json(&tmp.path().join("t/transfer_provenance.json"));
    let text = prov.to_string();
    assert!(text.contains("measured") && text.contains("estimated"));
    let matrix = fs::read_to_string(tmp.path().join("t/transfer_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().next().unwrap(), "source,de,en,es,fr,hi,sw");

    let o = atlas_kit(&["crossover", "--out", &p("x"), "--curves", &curves, "--budget-c", "1e30", "--n", "1e8"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&tmp.path().join("x/crossover.json"));
    assert_eq!(report["decision"], "pretrain");
    assert_eq!(report["rows"].as_array().unwrap().len(), 18);
}
