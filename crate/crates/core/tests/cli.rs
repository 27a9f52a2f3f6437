mod common;

use std::fs;

use common::analyzer::fixture;
use common::cli::{determinism_failures, sim};

fn stdout(args: &[&str]) -> String {
    let o = sim(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    sim(args).status.code().unwrap()
}

#[test]
fn every_command_is_byte_identical_on_rerun() {
    let bad = determinism_failures();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn gen_then_run_matches_run_from_spec() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.trace");
    let t = trace.to_str().unwrap();
    stdout(&["gen", "chase:n=64", "--seed", "2", "--out", t]);
    let from_file = stdout(&["run", "--trace", t, "--seed", "2", "--offload", "1"]);
    let from_spec = stdout(&["run", "--gen", "chase:n=64", "--seed", "2", "--offload", "1"]);
    assert_eq!(from_file, from_spec);
}

#[test]
fn out_flag_writes_the_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let args = ["run", "--gen", "quantize:n=100", "--seed", "0", "--offload", "1"];
    let printed = stdout(&args);
    let mut with_out = args.to_vec();
    with_out.extend(["--out", out.to_str().unwrap()]);
    assert_eq!(stdout(&with_out), "");
    assert_eq!(fs::read_to_string(&out).unwrap(), printed);
}

#[test]
fn compare_csv_has_a_row_per_configuration() {
    let csv = stdout(&["compare", "--gen", "shared:n=1000,share=0.1", "--seed", "0"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    let labels: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["cpu-only", "fg", "cg", "nc", "conda", "ideal"]);
    let seq = stdout(&["compare", "--gen", "shared:n=1000,share=0.1", "--seed", "0", "--sequential"]);
    assert_eq!(csv, seq);
}

#[test]
fn sweep_speedup_rises_with_gemm_ops() {
    let csv = stdout(&["sweep-gemm", "--nops", "1,2,4", "--elems", "4096"]);
    let mut r = csv::Reader::from_reader(csv.as_bytes());
    let col = r.headers().unwrap().iter().position(|h| h == "speedup").unwrap();
    let s: Vec<f64> = r.records().map(|x| x.unwrap()[col].parse().unwrap()).collect();
    assert_eq!(s.len(), 3);
    assert!(s.windows(2).all(|w| w[0] <= w[1]), "{s:?}");
}

#[test]
fn analyze_reports_boundary_targets() {
    let f = fixture("boundaries.csv");
    let json = stdout(&["analyze", "--profiles", f.to_str().unwrap(), "--area-budget", "4.4"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let targets: Vec<&str> = v["targets"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();
    assert_eq!(targets, ["base", "mpki_above", "dm_above", "ratio_at", "area_at", "shared_at"]);
}

#[test]
fn thresholds_file_overrides_defaults() {
    let rows = fixture("mpki7.csv");
    let rows = rows.to_str().unwrap();
    let th = fixture("thresholds_mpki5.toml");
    let without = stdout(&["analyze", "--profiles", rows]);
    let with = stdout(&["analyze", "--profiles", rows, "--thresholds", th.to_str().unwrap()]);
    let cand = |s: &str| serde_json::from_str::<serde_json::Value>(s).unwrap()["verdicts"][0]["candidate"].clone();
    assert_eq!(cand(&without), false);
    assert_eq!(cand(&with), true);
}

#[test]
fn analyze_profiles_out_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    let p = p.to_str().unwrap();
    let sim_json = stdout(&["analyze", "--gen", "gemm:nops=1,elems=1024", "--seed", "0", "--profiles-out", p]);
    assert_eq!(stdout(&["analyze", "--profiles", p]), sim_json);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&["run", "--gen", "nonsense:n=1", "--seed", "0"]), 2);
    assert_eq!(code(&["run", "--gen", "quantize:n=10", "--seed", "0", "--format", "csv"]), 2);
    assert_eq!(code(&["run", "--seed", "0"]), 2);
    assert_eq!(code(&["run", "--gen", "quantize:n=10", "--seed", "0", "--offload", "7"]), 3);
    assert_eq!(code(&["run", "--trace", "/nonexistent/t.trace", "--seed", "0"]), 4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "num_vaults = 0\n").unwrap();
    assert_eq!(code(&["run", "--gen", "quantize:n=10", "--seed", "0", "--config", cfg.to_str().unwrap()]), 2);
}
