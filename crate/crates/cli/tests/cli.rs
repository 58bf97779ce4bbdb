use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn dynport(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynport")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn two_asset(tau: f64) -> Value {
    json!({
        "kind": "no_consumption",
        "market": {
            "r": 0.03, "mu": [0.07, 0.07], "sigma": [0.2, 0.2],
            "corr": [[1.0, 0.0], [0.0, 1.0]], "tau": [tau, tau]
        },
        "preference": { "gamma": 3.0 },
        "discretization": { "horizon": 0.0384615384615384615, "dt": 0.0192307692307692308, "degree": 6, "quadrature_order": 3 },
        "diagnostics": { "ce_points": [[0.3, 0.3]], "policy_error": { "degree": 6, "probes": 100 } }
    })
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn numeric_diagnostics(dir: &Path) -> Value {
    let mut d: Value = serde_json::from_str(&read(dir, "diagnostics.json")).unwrap();
    d.as_object_mut().unwrap().remove("run");
    d
}

#[test]
fn horizon_must_be_whole_periods() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = two_asset(0.001);
    cfg["discretization"]["horizon"] = json!(0.05);
    let path = write_config(tmp.path(), "bad.json", &cfg);
    let out = tmp.path().join("out");
    let o = dynport(&["solve", &path, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_str(&read(&out, "error.json")).unwrap();
    assert_eq!(err["exit_code"], 2);
    assert!(err["message"].as_str().unwrap().contains("horizon not integer periods"));
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = two_asset(0.001);
    cfg["discretization"]["degre"] = json!(4);
    let path = write_config(tmp.path(), "typo.json", &cfg);
    let o = dynport(&["solve", &path, "--out", tmp.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("degre"));
}

#[test]
fn runs_are_deterministic_and_comparable() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "run.json", &two_asset(0.001));
    let dirs: Vec<_> = ["w1", "w3"].iter().map(|d| tmp.path().join(d)).collect();
    for (dir, w) in dirs.iter().zip(["1", "3"]) {
        let o = dynport(&["solve", &path, "--out", dir.to_str().unwrap(), "--workers", w, "--seed", "11"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["surfaces/t0000.json", "surfaces/t0002.json", "policy/t0000.csv", "policy/t0001.csv", "ntr_t0.csv", "ntr_t0.json"] {
        assert_eq!(read(&dirs[0], name), read(&dirs[1], name), "{name}");
    }
    assert_eq!(numeric_diagnostics(&dirs[0]), numeric_diagnostics(&dirs[1]));
    let d: Value = serde_json::from_str(&read(&dirs[0], "diagnostics.json")).unwrap();
    assert_eq!(d["run"]["seed"], 11);
    assert_eq!(d["run"]["workers"], 1);
    assert_eq!(d["policy_error"][0]["probes"], 100);
    let ce = d["certainty_equivalents"][0]["certainty_equivalent"].as_f64().unwrap();
    assert!(ce > 1.0 && ce < 1.01, "{ce}");

    // the echoed config reproduces the run
    let echo = dirs[0].join("effective_config.json");
    let again = tmp.path().join("again");
    let o = dynport(&["solve", echo.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(read(&dirs[0], "policy/t0000.csv"), read(&again, "policy/t0000.csv"));
    assert_eq!(numeric_diagnostics(&dirs[0]), numeric_diagnostics(&again));

    let o = dynport(&["compare", dirs[0].to_str().unwrap(), dirs[1].to_str().unwrap(), "--probes", "200"]);
    assert!(o.status.success());
    let c: Value = serde_json::from_slice(&o.stdout).unwrap();
    for s in c["surfaces"].as_array().unwrap() {
        assert_eq!(s["l1"], 0.0);
        assert_eq!(s["linf"], 0.0);
    }
    for p in c["policies"].as_array().unwrap() {
        assert_eq!(p["max_abs"], 0.0);
    }
}

#[test]
fn cheaper_trading_nests_inside() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for (name, tau) in [("lo", 0.0005), ("hi", 0.005)] {
        let path = write_config(tmp.path(), &format!("{name}.json"), &two_asset(tau));
        let dir = tmp.path().join(name);
        let o = dynport(&["solve", &path, "--out", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        dirs.push(dir);
    }
    let o = dynport(&["compare", dirs[0].to_str().unwrap(), dirs[1].to_str().unwrap(), "--probes", "200"]);
    assert!(o.status.success());
    let c: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(c["nesting"][0]["verdict"], "contained");
    assert_eq!(c["nesting"][0]["a_in_b"]["contained"], true);
    for s in c["surfaces"].as_array().unwrap() {
        let (l1, linf) = (s["l1"].as_f64().unwrap(), s["linf"].as_f64().unwrap());
        assert!(l1.is_finite() && l1 <= linf);
    }
}

#[test]
fn compare_rejects_different_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let mut cfg = two_asset(0.001);
    fs::write(a.join("effective_config.json"), cfg.to_string()).unwrap();
    cfg["kind"] = json!("consumption");
    fs::write(b.join("effective_config.json"), cfg.to_string()).unwrap();
    let o = dynport(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn one_asset_and_option_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let one = json!({
        "kind": "consumption",
        "market": { "r": 0.03, "mu": [0.07], "sigma": [0.2], "corr": [[1.0]], "tau": [0.001] },
        "preference": { "gamma": 3.0, "rho": 0.05 },
        "discretization": { "horizon": 0.25, "dt": 0.125, "degree": 8, "lattice_h": 0.0625 }
    });
    let path = write_config(tmp.path(), "one.json", &one);
    let dir = tmp.path().join("one");
    let o = dynport(&["solve", &path, "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ntr: Value = serde_json::from_str(&read(&dir, "ntr_t0.json")).unwrap();
    assert_eq!(ntr["shape"], "interval");
    let (lo, hi) = (ntr["intervals"][0]["lower"].as_f64().unwrap(), ntr["intervals"][0]["upper"].as_f64().unwrap());
    let merton = 0.04 / (3.0 * 0.04);
    assert!(lo < hi && lo < merton + 0.05 && hi > merton - 0.05, "{lo} {hi}");

    let option = json!({
        "kind": "option",
        "market": { "r": 0.01, "mu": [0.07], "sigma": [0.2], "corr": [[1.0]], "tau": [0.001] },
        "preference": { "gamma": 3.0 },
        "discretization": { "dt": 0.0192307692307692308, "degree": 4, "lattice_h": 0.0096153846153846154 },
        "option": { "kind": "put", "expiry": 0.0384615384615384615, "tau": 0.001 },
        "diagnostics": { "ce_points": [[0.4, 0.0]] }
    });
    let path = write_config(tmp.path(), "option.json", &option);
    let dir = tmp.path().join("option");
    let o = dynport(&["solve", &path, "--out", dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(&dir, "prices.csv").starts_with("time,moneyness,price"));
    let echo: Value = serde_json::from_str(&read(&dir, "effective_config.json")).unwrap();
    assert!((echo["discretization"]["horizon"].as_f64().unwrap() - 2.0 / 52.0).abs() < 1e-15);
    let d: Value = serde_json::from_str(&read(&dir, "diagnostics.json")).unwrap();
    assert_eq!(d["periods"], 2);
    assert_eq!(d["non_converged"], 0);

    let mut bad = option.clone();
    bad["discretization"]["lattice_h"] = json!(0.007);
    let path = write_config(tmp.path(), "bad_h.json", &bad);
    let o = dynport(&["solve", &path, "--out", tmp.path().join("bad").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
