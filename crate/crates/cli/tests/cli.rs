use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tracksplit(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tracksplit"))
        .args(args)
        .env("TRACKSPLIT_OUT", out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn check_passed(checks: &Value, name: &str) -> bool {
    checks
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == name)
        .unwrap_or_else(|| panic!("no `{name}` check"))["pass"]
        .as_bool()
        .unwrap()
}

#[test]
fn bq1_preset_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = tracksplit(&["run", "--config", "bq1_single_loop"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = json(&dir.path().join("bq1_single_loop/summary.json"));
    assert!(s["final_residual"].as_f64().unwrap() < 1e-8);
    assert_eq!(s["status"], "converged");
    let checks = json(&dir.path().join("bq1_single_loop/checks.json"));
    for c in checks.as_array().unwrap() {
        assert!(c["citation"].as_str().is_some_and(|t| !t.is_empty()));
    }
}

#[test]
fn bad_step_rejected_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let o = tracksplit(&["run", "--config", "bq1_bad_step"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("τL < 2"));
    assert!(!dir.path().join("bq1_bad_step").exists());
}

#[test]
fn mismatch_preset_passes_quasi_fejer() {
    let dir = tempfile::tempdir().unwrap();
    let o = tracksplit(&["run", "--config", "pdps_mismatch_small"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let checks = json(&dir.path().join("pdps_mismatch_small/checks.json"));
    assert!(check_passed(&checks, "quasi-fejer"));
    assert!(check_passed(&checks, "r_p"));
}

#[test]
fn malformed_config_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"outer": {"kind": "forward_backward", "tau": 1.0, "g": {"kind": "zero"}}, "budget": 3, "x0": [0.0], "stepsize": 2}"#).unwrap();
    let o = tracksplit(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepsize"));
}

#[test]
fn unknown_check_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = tracksplit(&["run", "--config", "bq1_single_loop", "--check", "descent,nonsense"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn check_subset_is_respected() {
    let dir = tempfile::tempdir().unwrap();
    let o = tracksplit(&["run", "--config", "bq1_single_loop", "--check", "descent"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let checks = json(&dir.path().join("bq1_single_loop/checks.json"));
    assert_eq!(checks.as_array().unwrap().len(), 1);
}

#[test]
fn leaving_region_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("escape.json");
    fs::write(
        &cfg,
        r#"{"label": "escape",
            "instance": {"kind": "parametric_poisson", "n": 16, "coeff_box": [[0.8, 1.2], [1.3, 1.7]]},
            "inner": {"kind": "jacobi"}, "adjoint": {"variant": "reduced", "scheme": "jacobi"},
            "outer": {"kind": "forward_backward", "tau": 0.1, "g": {"kind": "zero"}},
            "budget": 50, "x0": [0.8, 1.3]}"#,
    )
    .unwrap();
    let o = tracksplit(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(json(&dir.path().join("escape/summary.json"))["status"], "left-Ω");
}

#[test]
fn identical_runs_give_identical_traces() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = tracksplit(&["run", "--config", "poisson16_single_loop", "--seed", "7"], d.path());
        assert_eq!(o.status.code(), Some(0));
    }
    let ta = fs::read(a.path().join("poisson16_single_loop/trace.csv")).unwrap();
    let tb = fs::read(b.path().join("poisson16_single_loop/trace.csv")).unwrap();
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn compare_bq1_against_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let o = tracksplit(&["compare", "bq1_single_loop", "bq1_baseline"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let c = json(&dir.path().join("bq1_single_loop__vs__bq1_baseline/comparison.json"));
    assert!(c["limit_distance"].as_f64().unwrap() <= 1e-6);
    assert!(dir.path().join("bq1_single_loop__vs__bq1_baseline/distances.csv").exists());
}

#[test]
fn self_compare_has_unit_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = tracksplit(&["compare", "bq1_single_loop", "bq1_single_loop"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let c = json(&dir.path().join("bq1_single_loop__vs__bq1_single_loop/comparison.json"));
    assert_eq!(c["speedup_ratio"].as_f64(), Some(1.0));
}

#[test]
fn poisson_compare_counts_solves() {
    let dir = tempfile::tempdir().unwrap();
    let o = tracksplit(&["compare", "poisson32_single_loop", "poisson32_baseline"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let c = json(&dir.path().join("poisson32_single_loop__vs__poisson32_baseline/comparison.json"));
    let a = &c["counters_a"];
    let n = a["outer_steps"].as_u64().unwrap();
    assert_eq!(a["inner_steps"].as_u64(), Some(n));
    assert_eq!(a["adjoint_steps"].as_u64(), Some(n));
    // two direct solves per baseline step, plus the warm start
    let b = &c["counters_b"];
    assert_eq!(b["direct_solves"].as_u64(), Some(2 * b["outer_steps"].as_u64().unwrap() + 2));
    assert_eq!(b["inner_steps"].as_u64(), Some(0));
    assert!(c["limits_agree"].as_bool().unwrap());
}

#[test]
fn compare_rejects_different_instances() {
    let dir = tempfile::tempdir().unwrap();
    let o = tracksplit(&["compare", "bq1_single_loop", "poisson16_single_loop"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn report_reads_run_outputs() {
    let dir = tempfile::tempdir().unwrap();
    tracksplit(&["run", "--config", "pdps_saddle"], dir.path());
    let trace = dir.path().join("pdps_saddle/trace.csv");
    let o = tracksplit(&["report", trace.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("quasi-fejer") && text.contains("pass"));
}

#[test]
fn report_rejects_empty_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    fs::write(&trace, "k,x_0\n").unwrap();
    let o = tracksplit(&["report", trace.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn presets_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let o = tracksplit(&["list-presets"], dir.path());
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["bq1_single_loop", "pdps_mismatch_small", "bq1_bad_step"] {
        assert!(text.lines().any(|l| l == name));
    }
}
