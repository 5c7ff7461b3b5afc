use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cevkmv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cevkmv"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout_value(out: &Output, key: &str) -> f64 {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("{key} missing"))
}

fn simulate(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec![
        "simulate",
        "--seed",
        "3",
        "--out",
        out,
        "--st-firms",
        "8",
        "--non-st-firms",
        "8",
        "--quarters",
        "3",
    ];
    args.extend_from_slice(extra);
    let result = cevkmv(&args);
    assert!(
        result.status.success(),
        "{}",
        String::from_utf8_lossy(&result.stderr)
    );
}

fn run_args<'a>(inputs: &'a str, config: &'a str, out: &'a str) -> Vec<String> {
    let p = |n: &str| format!("{inputs}/{n}");
    vec![
        "run".into(),
        "--returns".into(),
        p("returns.csv"),
        "--fundamentals".into(),
        p("fundamentals.csv"),
        "--rates".into(),
        p("rates.csv"),
        "--config".into(),
        config.into(),
        "--out".into(),
        out.into(),
    ]
}

#[test]
fn invert_reproduces_the_forward_map() {
    let out = cevkmv(&[
        "invert",
        "--equity",
        "60",
        "--equity-vol",
        "0.4",
        "--default-point",
        "80",
        "--rate",
        "0.03",
    ]);
    assert!(out.status.success());
    let (v, s) = (
        stdout_value(&out, "asset_value"),
        stdout_value(&out, "asset_vol"),
    );
    let equity = cevkmv_core::bsm_call(v, 80.0, 0.03, s, 1.0).unwrap();
    assert!((equity / 60.0 - 1.0).abs() < 1e-9);
}

#[test]
fn prob_at_unit_beta_is_the_lognormal_tail() {
    let out = cevkmv(&[
        "prob",
        "--asset-value",
        "150",
        "--default-point",
        "80",
        "--rate",
        "0.03",
        "--beta",
        "1",
        "--delta",
        "0.25",
    ]);
    assert!(out.status.success());
    let d2 = cevkmv_core::market_model::distance_to_default(150.0, 0.25, 80.0, 0.03, 1.0).unwrap();
    assert!((stdout_value(&out, "distance") - d2).abs() < 1e-3);
}

#[test]
fn invalid_numbers_exit_with_validation_code() {
    let out = cevkmv(&[
        "invert",
        "--equity",
        "-1",
        "--equity-vol",
        "0.4",
        "--default-point",
        "80",
        "--rate",
        "0.03",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("equity"));
    let out = cevkmv(&[
        "prob",
        "--asset-value",
        "100",
        "--default-point",
        "80",
        "--rate",
        "0.03",
        "--beta",
        "0.7",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn test_reads_two_columns_of_unequal_length() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dd.csv");
    fs::write(&path, "st,non_st\n1.2,3.1\n0.8,2.7\n1.9,4.4\n1.1,\n").unwrap();
    let out = cevkmv(&["test", path.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("Z1,p1,Z2,p2,M,N"));
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&fields[4..], ["4", "3"]);
    let p1: f64 = fields[1].parse().unwrap();
    assert!(p1 < 0.05, "{p1}");

    let missing = cevkmv(&["test", path.to_str().unwrap(), "--st", "nope"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn run_writes_the_bundle_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("in");
    simulate(&inputs, &["--missing", "0.1"]);
    let config = dir.path().join("study.conf");
    fs::write(&config, "estimator = fixed_effects\ngrid.num_space = 200\ngrid.num_time = 100\ngrid.check_convergence = false\n").unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let mut bundles = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let args = run_args(&s(&inputs), &s(&config), &s(&out_dir));
        let out = Command::new(env!("CARGO_BIN_EXE_cevkmv"))
            .args(&args)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        bundles.push(fs::read(out_dir.join("bundle.json")).unwrap());
        assert!(out_dir.join("table_cev_fe.csv").exists());
    }
    assert_eq!(bundles[0], bundles[1]);
}

#[test]
fn breached_exclusion_limit_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("in");
    simulate(&inputs, &[]);
    let config = dir.path().join("study.conf");
    fs::write(&config, "estimator = fixed_effects\ngrid.num_space = 20\ngrid.num_time = 4\ngrid.tolerance = 1e-12\n").unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let args = run_args(&s(&inputs), &s(&config), &s(&dir.path().join("out")));
    let out = Command::new(env!("CARGO_BIN_EXE_cevkmv"))
        .args(&args)
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn bad_config_and_missing_files_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("in");
    simulate(&inputs, &[]);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let config = dir.path().join("bad.conf");
    fs::write(&config, "estimator = guesswork\n").unwrap();
    let out_dir = s(&dir.path().join("out"));
    let args = run_args(&s(&inputs), &s(&config), &out_dir);
    let out = Command::new(env!("CARGO_BIN_EXE_cevkmv"))
        .args(&args)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let args = run_args("/nonexistent", &s(&config), &out_dir);
    let out = Command::new(env!("CARGO_BIN_EXE_cevkmv"))
        .args(&args)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
