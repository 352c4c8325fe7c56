use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddpgp::baselines::{lpml, LpmlScope};
use ddpgp::data::{ingest_csv, Arm, CsvSchema};
use ddpgp::gibbs::PosteriorChain;

fn ddpgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddpgp")).args(args).output().expect("run ddpgp")
}

fn ok(args: &[&str]) -> Output {
    let o = ddpgp(args);
    assert!(o.status.success(), "ddpgp {args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, n: usize) -> PathBuf {
    let n = n.to_string();
    ok(&["simulate", "--scenario", "1", "--n", &n, "--seed", "7", "--truth-draws", "50000", "--out", s(dir)]);
    dir.join("data.csv")
}

fn fit(dir: &Path, data: &Path, extra: &[&str]) {
    let mut args = vec!["fit", "--data", s(data), "--out", s(dir), "--seed", "5"];
    args.extend_from_slice(extra);
    ok(&args);
}

const SHORT: [&str; 8] = ["--iterations", "60", "--burn-in", "20", "--thin", "4", "--k-trunc", "4"];

#[test]
fn simulate_writes_dataset_and_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path(), 500);
    let text = fs::read_to_string(&data).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t1,t2,delta,xi,z,x1,x2");
    assert_eq!(lines.count(), 500);
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("truth.json")).unwrap()).unwrap();
    assert_eq!(truth["scenario"], 1);
    assert_eq!(truth["survival_control"].as_array().unwrap().len(), 34);
    assert!(tmp.path().join("simulate-config.txt").exists());

    let again = tempfile::tempdir().unwrap();
    simulate(again.path(), 500);
    for f in ["data.csv", "truth.json"] {
        assert_eq!(fs::read(tmp.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn snapshot_reproduces_run_and_flags_override_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("my.txt");
    fs::write(&cfg, "scenario = 2\nn = 50\ntruth_draws = 20000\nseed = 3\n").unwrap();
    let a = tmp.path().join("a");
    ok(&["simulate", "--config", s(&cfg), "--n", "40", "--out", s(&a)]);
    assert_eq!(fs::read_to_string(a.join("data.csv")).unwrap().lines().count(), 41);

    let b = tmp.path().join("b");
    ok(&["simulate", "--config", s(&a.join("simulate-config.txt")), "--out", s(&b)]);
    assert_eq!(fs::read(a.join("data.csv")).unwrap(), fs::read(b.join("data.csv")).unwrap());
}

#[test]
fn usage_and_input_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(ddpgp(&["simulate", "--scenario", "4", "--out", s(tmp.path())]).status.code(), Some(2));

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "t1,t2,delta,xi,z,x\n5,3,1,1,0,0.2\n").unwrap();
    let o = ddpgp(&["fit", "--data", s(&bad), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("exceeds"));

    let missing = tmp.path().join("none.csv");
    assert_eq!(ddpgp(&["fit", "--data", s(&missing), "--out", s(tmp.path())]).status.code(), Some(4));

    let o = ddpgp(&["estimand", "--data", s(&bad), "--chains", s(&tmp.path().join("nowhere")), "--out", s(tmp.path())]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn fit_estimand_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = simulate(dir, 120);
    fit(dir, &data, &SHORT);
    for arm in ["control", "treated"] {
        assert!(dir.join(format!("trace-{arm}.csv")).exists());
    }
    let c0 = PosteriorChain::load(dir.join("chain-control.jsonl")).unwrap();
    let c1 = PosteriorChain::load(dir.join("chain-treated.jsonl")).unwrap();
    assert_eq!((c0.arm, c1.arm), (Arm::Control, Arm::Treated));
    assert_eq!(c0.len(), 10);

    // Same seed, same chain files.
    let again = dir.join("again");
    fit(&again, &data, &SHORT);
    assert_eq!(fs::read(dir.join("chain-treated.jsonl")).unwrap(), fs::read(again.join("chain-treated.jsonl")).unwrap());

    ok(&["estimand", "--data", s(&data), "--out", s(dir), "--nodes", "24", "--grid", "10,40,120"]);
    for rho in ["0.2", "0.5", "0.8"] {
        let csv = fs::read_to_string(dir.join(format!("tau-rho{rho}.csv"))).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "u,mean,lo,hi");
        assert_eq!(csv.lines().count(), 4);
        assert!(dir.join(format!("tau-rho{rho}.json")).exists());
    }

    ok(&["report", "--data", s(&data), "--out", s(dir), "--grid", "0.001,30,300"]);
    let surv = fs::read_to_string(dir.join("survival-control.csv")).unwrap();
    let first: Vec<f64> = surv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((first[1] - 1.0).abs() < 1e-6, "survival near day 0 is {}", first[1]);
    assert!(dir.join("km-treated.csv").exists());

    let ds = ingest_csv(&data, &CsvSchema::default()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("lpml.json")).unwrap()).unwrap();
    let entries = json.as_array().unwrap();
    assert_eq!(entries.len(), 4);
    for e in entries {
        let chain = if e["arm"] == "control" { &c0 } else { &c1 };
        let scope = if e["scope"] == "joint" { LpmlScope::Joint } else { LpmlScope::SurvivalOnly };
        assert_eq!(e["lpml"].as_f64().unwrap(), lpml(chain, &ds, scope).unwrap().lpml);
    }
}

#[test]
fn identical_arms_give_flat_tau_at_rho_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let data = simulate(dir, 60);
    fit(dir, &data, &SHORT);
    let mut twin = PosteriorChain::load(dir.join("chain-control.jsonl")).unwrap();
    twin.arm = Arm::Treated;
    twin.save(dir.join("chain-treated.jsonl")).unwrap();
    ok(&["estimand", "--data", s(&data), "--out", s(dir), "--rho", "0", "--grid", "5,20,80"]);
    let csv = fs::read_to_string(dir.join("tau-rho0.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let mean: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((mean - 1.0).abs() < 1e-6, "{line}");
    }
}

#[test]
fn naive_model_defaults_to_three_hundred_draws() {
    let tmp = tempfile::tempdir().unwrap();
    let data = simulate(tmp.path(), 120);
    fit(tmp.path(), &data, &["--model", "naive"]);
    let c = PosteriorChain::load(tmp.path().join("chain-control.jsonl")).unwrap();
    assert_eq!(c.len(), 300);
    assert_eq!(c.model.to_string(), "naive");
    assert!(c.draws.iter().all(|d| d.k == 1));
}

#[test]
fn benchmark_emits_both_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = [
        "benchmark", "--scenarios", "1", "--reps", "2", "--n", "50", "--iterations", "40", "--burn-in", "20",
        "--truth-draws", "20000", "--seed", "9", "--out", s(dir),
    ];
    ok(&args);
    let surv = fs::read_to_string(dir.join("survival_rmse.csv")).unwrap();
    let header = surv.lines().next().unwrap();
    assert!(header.contains("bnp") && header.contains("naive"), "{header}");
    let tau = fs::read_to_string(dir.join("tau_rmse.csv")).unwrap();
    let header = tau.lines().next().unwrap();
    assert!(header.contains("bnp_rho0.5") && header.contains("naive_rho0.5"), "{header}");
    let first = fs::read(dir.join("report.json")).unwrap();

    // The second run reads the cache and reproduces the report.
    ok(&args);
    assert_eq!(first, fs::read(dir.join("report.json")).unwrap());
}
