use std::path::PathBuf;
use std::process::{Command, Output};

use callcenter::model::{ModelParams, Reservation, State};
use callcenter::transient::expected_cost;
use callcenter::waiting::{service_level, ChainMode};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(format!("{name}.json"))
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_callcenter")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn scratch(name: &str, body: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("callcenter-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn enumerate_empty_capacity_has_one_state() {
    let cfg = scratch(
        "ell0.json",
        r#"{"num_levels":2,"lambda":[1,1],"mu":[1,1],"mu_up":[1],"theta":[1,1],"gamma":[1,1],"beta":0,"k":[1,1],"ell":0}"#,
    );
    let text = stdout(&run(&["enumerate", "-c", cfg.to_str().unwrap()]));
    assert_eq!(text.lines().collect::<Vec<_>>(), ["index,state", "0,\"(0,0,0)\""]);
}

#[test]
fn cost_scan_csv_round_trips() {
    let path = fixture("two_level");
    let text = stdout(&run(&["cost", "-c", path.to_str().unwrap(), "-T", "15", "--all-theta"]));
    let p = ModelParams::from_json_file(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("theta2,cost"));
    let rows: Vec<(u32, f64)> = lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 6);
    for (t, v) in rows {
        let want = expected_cost(&p, &Reservation::new(vec![t]), &State::zero(3), 15.0).unwrap();
        assert!((v - want).abs() <= 1e-12 * want, "Θ2={t}: {v} vs {want}");
    }
}

#[test]
fn waitdist_writes_one_row_per_target() {
    let path = fixture("wait_example");
    let out = scratch("curve.csv", "");
    let status = run(&["waitdist", "-c", path.to_str().unwrap(), "--theta", "0,1,1", "--y", "1/3,1", "-o", out.to_str().unwrap()]);
    stdout(&status);
    let text = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "y,P,P1,P2,P3,P4");
    assert_eq!(lines.len(), 3);
    let p = ModelParams::from_json_file(&path).unwrap();
    let want = service_level(&p, &Reservation::new(vec![0, 1, 1]), &State::zero(7), 60.0, &[1.0 / 3.0], ChainMode::Reduced).unwrap();
    let got: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!((got - want[0].overall).abs() <= 1e-12);
}

#[test]
fn simulate_report_is_deterministic_json() {
    let path = fixture("cost_example1");
    let args = ["simulate", "-c", path.to_str().unwrap(), "-n", "500", "--seed", "7", "-T", "5"];
    let a = stdout(&run(&args));
    let b = stdout(&run(&args));
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["replications"], 500);
    assert!(v["cost"]["mean"].as_f64().unwrap() >= 0.0);
}

#[test]
fn malformed_config_exits_with_2() {
    let cfg = scratch("bad.json", r#"{"num_levels":2,"lambda":[1]}"#);
    let out = run(&["cost", "-c", cfg.to_str().unwrap(), "-T", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = scratch(
        "neg.json",
        r#"{"num_levels":2,"lambda":[1,-1],"mu":[1,1],"mu_up":[1],"theta":[1,1],"gamma":[1,1],"beta":0,"k":[1,1],"ell":3}"#,
    );
    let out = run(&["cost", "-c", cfg.to_str().unwrap(), "-T", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
    let missing = run(&["cost", "-c", "/nonexistent/config.json", "-T", "1"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn mdp_finite_writes_policy_csv() {
    let path = fixture("two_level");
    let text = stdout(&run(&["mdp-finite", "-c", path.to_str().unwrap(), "-M", "3"]));
    assert!(text.starts_with("m,state,event,action\n"));
    assert!(text.lines().skip(1).all(|l| l.split(',').next().unwrap().parse::<usize>().unwrap() < 3));
}
