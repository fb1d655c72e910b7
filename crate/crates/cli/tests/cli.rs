use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use wmconf_cli::{run, run_bleu, run_detect, run_simulate, DetectArgs};
use wmconf_core::conformal::Method;
use wmconf_core::density::ShiftMethod;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn invoke(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(
        std::iter::once("wmconf").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn standard_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let cal = write(
        dir,
        "cal.csv",
        "essay_id,score,role\nc1,0.1,calibration\nc2,0.2,calibration\nc3,0.3,calibration\nc4,0.4,calibration\n",
    );
    let test = write(dir, "test.csv", "essay_id,score,role\nt1,0.05,test\n");
    (cal, test)
}

#[test]
fn detect_standard_example() {
    let dir = tempfile::tempdir().unwrap();
    let (cal, test) = standard_inputs(dir.path());
    let out = dir.path().join("out");
    let outcome = run_detect(&DetectArgs::new(&cal, &test, Method::Standard, &out)).unwrap();
    assert_eq!(outcome.decisions.len(), 1);
    assert_eq!(outcome.decisions[0].decision.conformal_p, 0.2);
    assert!(!outcome.decisions[0].decision.flagged);
    assert_eq!(
        fs::read_to_string(out.join("decisions.csv")).unwrap(),
        "essay_id,conformal_p,flagged\nt1,0.2,false\n"
    );
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["outputs"][0]["path"], "decisions.csv");
}

#[test]
fn detect_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (cal, test) = standard_inputs(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let (code, _, _) = invoke(&[
            "detect",
            "--cal",
            cal.to_str().unwrap(),
            "--test",
            test.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
    }
    for name in ["decisions.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn hierarchical_missing_group_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let cal = write(
        dir.path(),
        "cal.csv",
        "essay_id,score,group_id,role\nc1,0.1,a,calibration\nc2,0.2,,calibration\n",
    );
    let test = write(dir.path(), "test.csv", "essay_id,score,role\nt1,0.05,test\n");
    let out = dir.path().join("out");
    let (code, _, err) = invoke(&[
        "detect",
        "--cal",
        cal.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--method",
        "hierarchical",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    let line: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(line["error"], "schema_violation");
    assert_eq!(line["exit_code"], 2);
    let message = line["message"].as_str().unwrap();
    assert!(
        message.contains("row 2") && message.contains("group_id") && message.contains("c2"),
        "{message}"
    );
}

#[test]
fn hierarchical_detect_runs_with_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cal = write(
        dir.path(),
        "cal.csv",
        "essay_id,score,group_id,role\nc1,0.1,a,calibration\nc2,0.2,a,calibration\nc3,0.3,b,calibration\n",
    );
    let test = write(dir.path(), "test.csv", "essay_id,score,role\nt1,0.15,test\n");
    let outcome = run_detect(&DetectArgs::new(
        &cal,
        &test,
        Method::Hierarchical,
        dir.path().join("o"),
    ))
    .unwrap();
    // (1 + 1/2 + 0/1) / 3
    assert!((outcome.decisions[0].decision.conformal_p - 0.5).abs() < 1e-15);
    assert_eq!(outcome.manifest.details["n_groups"], 2);
}

fn weighted_inputs(dir: &Path, minority: usize) -> (PathBuf, PathBuf) {
    let mut cal = String::from("essay_id,score,population,role\n");
    for i in 0..40 {
        cal.push_str(&format!("maj{i},{},majority,calibration\n", 0.01 + 0.02 * i as f64));
    }
    for i in 0..minority {
        cal.push_str(&format!("min{i},{},minority,calibration\n", 0.001 + 0.003 * i as f64));
    }
    let mut test = String::from("essay_id,score,population,role\n");
    for i in 0..5 {
        test.push_str(&format!("t{i},{},minority,test\n", 0.0005 * (i + 1) as f64));
    }
    (write(dir, "cal.csv", &cal), write(dir, "test.csv", &test))
}

#[test]
fn weighted_quantile_records_min_branch_for_eight_minority_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (cal, test) = weighted_inputs(dir.path(), 8);
    let out = dir.path().join("out");
    let (code, _, err) = invoke(&[
        "detect",
        "--cal",
        cal.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--method",
        "weighted",
        "--shift",
        "quantile",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["details"]["branch"], "min");
    assert_eq!(manifest["details"]["minority_size"], 8);
    let decisions = fs::read_to_string(out.join("decisions.csv")).unwrap();
    assert_eq!(decisions.lines().count(), 6);
}

#[test]
fn weighted_branches_follow_minority_size() {
    let dir = tempfile::tempdir().unwrap();
    for (m, branch) in [(10, "min"), (11, "two_alpha"), (20, "two_alpha"), (21, "alpha")] {
        let (cal, test) = weighted_inputs(dir.path(), m);
        let mut args = DetectArgs::new(&cal, &test, Method::Weighted, dir.path().join("o"));
        args.shift = ShiftMethod::Quantile;
        let outcome = run_detect(&args).unwrap();
        assert_eq!(outcome.manifest.details["branch"], branch, "m = {m}");
    }
}

#[test]
fn weighted_mean_shift_has_no_branch() {
    let dir = tempfile::tempdir().unwrap();
    let (cal, test) = weighted_inputs(dir.path(), 8);
    let mut args = DetectArgs::new(&cal, &test, Method::Weighted, dir.path().join("o"));
    args.shift = ShiftMethod::Mean;
    let outcome = run_detect(&args).unwrap();
    assert!(outcome.manifest.details.get("branch").is_none());
    for d in &outcome.decisions {
        assert!(d.decision.conformal_p > 0.0 && d.decision.conformal_p <= 1.0);
    }
}

#[test]
fn weighted_requires_population() {
    let dir = tempfile::tempdir().unwrap();
    let (cal, test) = standard_inputs(dir.path());
    let (code, _, err) = invoke(&[
        "detect",
        "--cal",
        cal.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--method",
        "weighted",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("population"), "{err}");
}

#[test]
fn zero_score_is_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let cal = write(dir.path(), "cal.csv", "essay_id,score,role\nc1,0,calibration\n");
    let test = write(dir.path(), "test.csv", "essay_id,score,role\nt1,0.05,test\n");
    let (code, _, err) = invoke(&[
        "detect",
        "--cal",
        cal.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("\"error\":\"score_out_of_range\""), "{err}");
}

#[test]
fn role_mismatch_and_missing_file_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (cal, _) = standard_inputs(dir.path());
    let out = dir.path().join("o");
    let (code, _, err) = invoke(&[
        "detect",
        "--cal",
        cal.to_str().unwrap(),
        "--test",
        cal.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("role"), "{err}");
    let missing = dir.path().join("nope.csv");
    let (code, _, err) = invoke(&[
        "detect",
        "--cal",
        missing.to_str().unwrap(),
        "--test",
        cal.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("unreadable_input"), "{err}");
}

#[test]
fn json_inputs_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cal = write(
        dir.path(),
        "cal.json",
        r#"[{"essay_id":"c1","score":0.1,"role":"calibration"},{"essay_id":"c2","score":0.2,"role":"calibration"},
            {"essay_id":"c3","score":0.3,"role":"calibration"},{"essay_id":"c4","score":0.4,"role":"calibration"}]"#,
    );
    let test = write(
        dir.path(),
        "test.json",
        r#"[{"essay_id":"t1","score":0.05,"role":"test"}]"#,
    );
    let outcome = run_detect(&DetectArgs::new(&cal, &test, Method::Standard, dir.path().join("o"))).unwrap();
    assert_eq!(outcome.decisions[0].decision.conformal_p, 0.2);
}

#[test]
fn bad_flags_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (cal, test) = standard_inputs(dir.path());
    let (code, _, err) = invoke(&[
        "detect",
        "--cal",
        cal.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
        "--alpha",
        "1.5",
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("invalid_alpha"), "{err}");
    let (code, _, err) = invoke(&["detect", "--method", "bogus"]);
    assert_eq!(code, 2);
    assert!(err.contains("\"error\":\"usage\""), "{err}");
}

fn fpr_column(summary: &str) -> Vec<f64> {
    let header: Vec<&str> = summary.lines().next().unwrap().split(',').collect();
    let fpr = header.iter().position(|&h| h == "fpr").unwrap();
    summary
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(fpr).and_then(|v| v.parse().ok()))
        .collect()
}

#[test]
fn simulate_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let outcome = run_simulate(None, &out, Some(1)).unwrap();
    for name in [
        "metrics.csv",
        "summary.csv",
        "plot.csv",
        "metrics.json",
        "manifest.json",
    ] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let fprs = fpr_column(&summary);
    assert!(!fprs.is_empty());
    assert!(fprs.iter().all(|&f| f <= 0.08), "{fprs:?}");
    let plot = fs::read_to_string(out.join("plot.csv")).unwrap();
    assert!(plot.starts_with("scenario,method,null,alt,cal_size,seed,metric,value\n"));
    assert_eq!(outcome.manifest.outputs.len(), 4);
    assert_eq!(outcome.manifest.seeds, outcome.config.seeds);
}

#[test]
fn simulate_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_simulate(None, &a, Some(1)).unwrap();
    run_simulate(None, &b, Some(3)).unwrap();
    for name in [
        "metrics.csv",
        "summary.csv",
        "plot.csv",
        "metrics.json",
        "manifest.json",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn simulate_single_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "one.toml", "seeds = [17]\n");
    let out = dir.path().join("sim");
    let (code, _, err) = invoke(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let plot = fs::read_to_string(out.join("plot.csv")).unwrap();
    let seeds: std::collections::BTreeSet<&str> = plot.lines().skip(1).map(|l| l.split(',').nth(5).unwrap()).collect();
    assert_eq!(seeds.into_iter().collect::<Vec<_>>(), vec!["17"]);
    let cells = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(cells.lines().skip(1).all(|l| l.split(',').nth(6) == Some("17")));
}

#[test]
fn simulate_rejects_invalid_config_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "bad.toml", "alpha = 1.5\n");
    let (code, _, err) = invoke(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("alpha"), "{err}");
    let config = write(dir.path(), "typo.toml", "alpah = 0.1\n");
    let (code, _, err) = invoke(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["standard.toml", "hierarchical.toml", "weighted.toml"] {
        let text = fs::read_to_string(root.join(name)).unwrap();
        wmconf_core::ExperimentConfig::from_toml(&text)
            .and_then(|c| c.validate())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn bleu_examples() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.txt", "The cat sat on the mat.");
    let b = write(dir.path(), "b.txt", "The cat sat on the mat.");
    let c = write(dir.path(), "c.txt", "dogs bark loudly");
    assert_eq!(run_bleu(&a, &b).unwrap().value, 1.0);
    assert_eq!(run_bleu(&a, &c).unwrap().value, 0.0);
    let r = write(dir.path(), "r.txt", "the cat sat down");
    let h = write(dir.path(), "h.txt", "the cat sat");
    assert!((run_bleu(&r, &h).unwrap().value - 0.7165).abs() < 1e-4);

    let (code, out, _) = invoke(&["bleu", r.to_str().unwrap(), h.to_str().unwrap()]);
    assert_eq!(code, 0);
    let json: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert!((json["value"].as_f64().unwrap() - 0.7165).abs() < 1e-4);
    assert_eq!(json["unigram_precision"], 1.0);
    assert_eq!(json["bigram_precision"], 1.0);

    let (code, _, err) = invoke(&[
        "bleu",
        dir.path().join("missing").to_str().unwrap(),
        h.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("unreadable_input"), "{err}");
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_wmconf");
    let dir = tempfile::tempdir().unwrap();
    let r = write(dir.path(), "r.txt", "same words");
    let ok = Command::new(exe)
        .args(["bleu", r.to_str().unwrap(), r.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("\"value\":1.0"));
    let bad = Command::new(exe)
        .args(["bleu", "/nonexistent/x", r.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_slice(bad.stderr.trim_ascii()).unwrap();
    assert_eq!(line["error"], "unreadable_input");
}
