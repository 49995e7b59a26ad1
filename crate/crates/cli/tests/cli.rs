use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str], dir: &Path, threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nodalglue"));
    cmd.args(args).current_dir(dir);
    match threads {
        Some(n) => cmd.env("NODALGLUE_THREADS", n),
        None => cmd.env_remove("NODALGLUE_THREADS"),
    };
    cmd.output().unwrap()
}

fn error_json(out: &Output) -> Value {
    serde_json::from_slice(out.stderr.trim_ascii()).expect("stderr is one JSON object")
}

fn cubic_node(dir: &Path) {
    let text = r#"{"components":[{"genus":0,"c1_pairing":9,"df_zero_count":0}],"m":1,"intersection":[[9]]}"#;
    fs::write(dir.join("cubic_node.json"), text).unwrap();
}

#[test]
fn index_report_for_cubic_node() {
    let dir = tempfile::tempdir().unwrap();
    cubic_node(dir.path());
    let out = run(&["index", "--config", "cubic_node.json", "--out", "o"], dir.path(), None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/index.json")).unwrap()).unwrap();
    assert_eq!(report["ind_normal"], 8);
    assert_eq!(report["d_a"], 9);
    assert_eq!(report["nodal"], true);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ind(D^N)"));
}

#[test]
fn preglue_csv_and_slope() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["preglue", "--p", "4", "--t", "1e-2,1e-4,1e-6,1e-8", "--out", "o"], dir.path(), None);
    assert!(out.status.success());
    let mut rd = csv::Reader::from_path(dir.path().join("o/preglue.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["t_abs", "p", "defect_norm"]);
    let rows: Vec<(f64, f64, f64)> = rd.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    // least-squares slope of ln defect against ln |t|
    let xs: Vec<f64> = rows.iter().map(|r| r.0.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.2.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    assert!((num / den - 0.125).abs() < 0.01, "slope {}", num / den);
    assert!(String::from_utf8_lossy(&out.stdout).contains("slope 0.12"));
}

#[test]
fn empty_t_list_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    for args in [vec!["preglue", "--t", ""], vec!["solve"], vec!["inverse", "--t", ","]] {
        let out = run(&args, dir.path(), None);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let e = error_json(&out);
        assert_eq!(e["error"]["kind"], "validation");
        assert!(e["error"]["message"].as_str().unwrap().contains("t-list"));
    }
    assert!(!dir.path().join("nodalglue-out").exists());
}

#[test]
fn error_codes_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["index", "--config", "missing.json"], dir.path(), None);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_json(&out)["error"]["kind"], "io");

    let out = run(&["strata", "--degree", "0"], dir.path(), None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["code"], "domain");

    let out = run(&["preglue", "--t", "1e-2,2"], dir.path(), None);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["preglue", "--grid", "12by16", "--t", "1e-2"], dir.path(), None);
    assert_eq!(out.status.code(), Some(2));

    // a zero-order term far too large for the resolvent iteration to contract
    let out = run(&["maxprinciple", "--t", "1e-2", "--a-sup", "5", "--trials", "2", "--out", "o"], dir.path(), None);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let e = error_json(&out);
    assert_eq!(e["error"]["kind"], "numerical");
    assert!(!dir.path().join("o").exists(), "no partial artifacts on failure");
}

#[test]
fn output_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let args = |o: &'static str| vec!["inverse", "--t", "1e-2,1e-4", "--trials", "6", "--seed", "3", "--out", o];
    assert!(run(&args("a"), dir.path(), Some("1")).status.success());
    assert!(run(&args("b"), dir.path(), None).status.success());
    assert!(run(&args("c"), dir.path(), Some("3")).status.success());
    for name in ["operator_norms.csv", "discrepancy.csv", "dims.json"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(name)).unwrap(), "{name}");
        assert_eq!(a, fs::read(dir.path().join("c").join(name)).unwrap(), "{name}");
    }
    let bad = run(&args("d"), dir.path(), Some("many"));
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn config_round_trips_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let out =
        run(&["maxprinciple", "--t", "1e-2,1e-4", "--trials", "4", "--seed", "9", "--out", "a"], dir.path(), None);
    assert!(out.status.success());
    let written = fs::read_to_string(dir.path().join("a/config.json")).unwrap();
    let cfg: Value = serde_json::from_str(&written).unwrap();
    assert_eq!(cfg["command"], "maxprinciple");
    assert_eq!(cfg["trials"], 4);

    // rerun from the written config into a new directory
    let mut again = cfg.clone();
    again["out"] = Value::from("b");
    fs::write(dir.path().join("again.json"), again.to_string()).unwrap();
    assert!(run(&["maxprinciple", "--config", "again.json"], dir.path(), None).status.success());
    assert_eq!(
        fs::read(dir.path().join("a/maxprinciple.csv")).unwrap(),
        fs::read(dir.path().join("b/maxprinciple.csv")).unwrap()
    );
    let back: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("b/config.json")).unwrap()).unwrap();
    assert_eq!(back, again);

    let out = run(&["preglue", "--config", "again.json"], dir.path(), None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn strata_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["strata", "--degree", "3", "--out", "o"], dir.path(), None);
    assert!(out.status.success());
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/strata.json")).unwrap()).unwrap();
    assert_eq!(r["dim_c"], 9);
    assert_eq!(r["genus"], 1);
    assert_eq!(r["max_fixed_points"], 8);
    let dims: Vec<i64> = r["strata"].as_array().unwrap().iter().map(|s| s["dim"].as_i64().unwrap()).collect();
    assert_eq!(dims, vec![8, 7]);
}

#[test]
fn solve_writes_sweep_and_solutions() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["solve", "--t", "1e-3", "--out", "o"], dir.path(), None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rd = csv::Reader::from_path(dir.path().join("o/gluing.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["t_abs", "p", "defect_norm", "xi_norm", "iterations", "converged"]);
    let rows: Vec<(f64, f64, f64, f64, usize, bool)> = rd.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].5 && rows[0].4 >= 1);
    let dump: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/solution.json")).unwrap()).unwrap();
    let env = &dump[0]["solution"];
    let expect = 2 * 2 * env["n_r"].as_u64().unwrap() * env["n_theta"].as_u64().unwrap();
    assert_eq!(env["values"].as_array().unwrap().len() as u64, expect);
}
