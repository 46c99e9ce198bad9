//! End-to-end runs of the `ergwalk` binary: exit codes, report contents,
//! CSV outputs and replay from an embedded config.

use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};
use tempfile::TempDir;

struct Run {
    code: i32,
    report: Value,
    stderr: String,
}

fn ergwalk_in(dir: &Path, args: &[&str], config: &Value) -> Run {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    ergwalk_at(args, &path)
}

fn ergwalk_at(args: &[&str], config: &Path) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_ergwalk"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env_remove("ERGWALK_DEFAULT_JOBS")
        .output()
        .unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    Run {
        code: out.status.code().unwrap(),
        report: serde_json::from_str(&stdout).unwrap_or(Value::Null),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn ergwalk(args: &[&str], config: &Value) -> Run {
    let dir = TempDir::new().unwrap();
    ergwalk_in(dir.path(), args, config)
}

fn bdp(sites: Value) -> Value {
    json!({ "model": "bdp", "mode": "homogeneous", "sites": sites })
}

fn homogeneous() -> Value {
    json!({
        "environment": {
            "model": "bdp", "mode": "homogeneous", "L": 2, "R": 2,
            "sites": [[1, 1, 1, 2]],
            "bounds": { "epsilon": 0.9, "M": 2.1 }
        },
        "seed": 12
    })
}

fn nearest_neighbor() -> Value {
    json!({
        "environment": { "model": "rwre", "mode": "homogeneous", "sites": [[[1, 0.7], [-1, 0.3]]] },
        "velocity": { "n_steps": 20000, "replicas": 100 },
        "seed": 4
    })
}

#[test]
fn validate_exit_codes_and_warning() {
    let ok = ergwalk(&["validate"], &homogeneous());
    assert_eq!(ok.code, 0);
    assert_eq!(ok.report["result"]["passed"], json!(true));
    assert_eq!(ok.report["result"]["reports"]["nonexplosion"]["verdict"], "divergence-consistent");
    assert_eq!(ok.report["warnings"], json!([]));

    let mut bad = homogeneous();
    bad["environment"]["bounds"] = json!({ "epsilon": 2.5, "M": 2.1 });
    let r = ergwalk(&["validate"], &bad);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("epsilon < M"), "{}", r.stderr);

    let growing = json!({ "environment": { "model": "bdp", "mode": "growing", "sites": [[1, 1, 1, 2]], "exponent": 2.0 } });
    let r = ergwalk(&["validate"], &growing);
    assert_eq!(r.code, 0);
    assert_eq!(r.report["result"]["reports"]["nonexplosion"]["verdict"], "divergence-not-observed");
    assert!(r.report["warnings"][0].as_str().unwrap().contains("NOT observed"));

    let mut strict_fail = homogeneous();
    strict_fail["environment"]["bounds"] = json!({ "epsilon": 1.0, "M": 3.0 });
    let r = ergwalk(&["validate"], &strict_fail);
    assert_eq!(r.code, 0);
    assert_eq!(r.report["result"]["passed"], json!(false));
}

#[test]
fn schema_errors_exit_two() {
    let mut unknown = homogeneous();
    unknown["environment"]["colour"] = json!("blue");
    assert_eq!(ergwalk(&["validate"], &unknown).code, 2);

    let wrong_width = json!({ "environment": { "model": "bdp", "mode": "homogeneous", "L": 2, "R": 2, "sites": [[1, 1, 1]] } });
    assert_eq!(ergwalk(&["validate"], &wrong_width).code, 2);

    let r = ergwalk(&["velocity", "--method", "fastest"], &homogeneous());
    assert_eq!(r.code, 2);

    let out = Command::new(env!("CARGO_BIN_EXE_ergwalk")).arg("validate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn classify_follows_drift_sign() {
    let verdict = |sites: Value| {
        let cfg = json!({ "environment": bdp(sites), "classify": { "n_products": 20000 } });
        let r = ergwalk(&["classify"], &cfg);
        assert_eq!(r.code, 0);
        r.report["result"]["verdict"].as_str().unwrap().to_string()
    };
    assert_eq!(verdict(json!([[1, 1, 1, 2]])), "transient-right");
    assert_eq!(verdict(json!([[2, 1, 1, 1]])), "transient-left");
    let zero = verdict(json!([[1, 1, 1, 1]]));
    assert!(zero == "recurrent" || zero == "boundary-undetermined", "{zero}");
}

#[test]
fn strict_boundary_classification_exits_three() {
    // nearly balanced i.i.d. environment with few products: wide interval around 0
    let cfg = json!({
        "environment": {
            "model": "bdp", "mode": "iid",
            "sites": [[1, 1, 1, 1.05], [1.05, 1, 1, 1]],
            "weights": [0.5, 0.5]
        },
        "classify": { "n_products": 2000, "burn_in": 100 },
        "seed": 3
    });
    let plain = ergwalk(&["classify"], &cfg);
    assert_eq!(plain.report["result"]["verdict"], "boundary-undetermined", "{}", plain.report["result"]);
    assert_eq!(plain.code, 0);
    assert_eq!(ergwalk(&["classify", "--strict"], &cfg).code, 3);
}

#[test]
fn velocity_methods_and_preconditions() {
    let r = ergwalk(&["velocity", "--method", "theorem51"], &homogeneous());
    assert_eq!(r.code, 0);
    assert!((r.report["result"]["velocity"].as_f64().unwrap() - 2.0).abs() < 1e-6);
    assert_eq!(r.report["config"]["velocity"]["method"], "theorem51");

    let mut quick = homogeneous();
    quick["velocity"] = json!({ "t_max": 500, "replicas": 64 });
    let r = ergwalk(&["velocity", "--method", "mc-bdp"], &quick);
    let (v, se) = (r.report["result"]["velocity"].as_f64().unwrap(), r.report["result"]["se"].as_f64().unwrap());
    assert!((v - 2.0).abs() < 4.0 * se, "{v} +- {se}");

    let r = ergwalk(&["velocity", "--method", "corollary"], &nearest_neighbor());
    assert_eq!(r.code, 0);
    assert!((r.report["result"]["velocity"].as_f64().unwrap() - 0.4).abs() < 1e-9);
    assert!((r.report["result"]["sum_pi_mean"].as_f64().unwrap() - 2.5).abs() < 1e-8);

    let long_right = json!({
        "environment": { "model": "rwre", "mode": "homogeneous", "sites": [[[2, 0.5], [-1, 0.5]]] }
    });
    assert_eq!(ergwalk(&["velocity", "--method", "corollary"], &long_right).code, 2);
    assert_eq!(ergwalk(&["velocity", "--method", "mc-bdp"], &nearest_neighbor()).code, 2);
    let three = json!({ "environment": { "model": "bdp", "mode": "homogeneous", "L": 1, "R": 2, "sites": [[1, 1, 1]] } });
    assert_eq!(ergwalk(&["velocity", "--method", "theorem51"], &three).code, 2);
}

#[test]
fn exact_formula_warns_on_uneven_site_drifts() {
    let periodic = json!({
        "environment": { "model": "bdp", "mode": "periodic", "sites": [[0.2, 0.2, 0.8, 0.5], [0.2, 0.2, 0.8, 2.0]] }
    });
    let r = ergwalk(&["velocity", "--method", "theorem51"], &periodic);
    assert_eq!(r.code, 0);
    assert!(r.report["warnings"][0].as_str().unwrap().contains("site drifts differ"));
    assert_eq!(ergwalk(&["velocity", "--method", "theorem51"], &homogeneous()).report["warnings"], json!([]));
}

#[test]
fn undefined_velocity_is_a_verdict_unless_strict() {
    let cfg = json!({ "environment": bdp(json!([[1, 1, 1, 1]])) });
    let r = ergwalk(&["velocity", "--method", "theorem51"], &cfg);
    assert_eq!(r.code, 0);
    assert_eq!(r.report["result"]["verdict"], "zero-or-undefined");
    assert_eq!(r.report["result"]["velocity"], Value::Null);
    assert_eq!(ergwalk(&["velocity", "--method", "theorem51", "--strict"], &cfg).code, 4);
}

#[test]
fn compare_agreement_and_mismatch() {
    let mut cfg = homogeneous();
    cfg["velocity"] = json!({ "t_max": 1000, "replicas": 100 });
    let r = ergwalk(&["compare"], &cfg);
    assert_eq!(r.code, 0);
    assert_eq!(r.report["result"]["agree"], json!(true), "{}", r.report["result"]["z"]);

    let mut nn = nearest_neighbor();
    nn["compare"] = json!({ "methods": ["corollary", "mc-rwre"] });
    let r = ergwalk(&["compare"], &nn);
    assert_eq!(r.code, 0);
    assert_eq!(r.report["result"]["first"]["velocity"].as_f64().unwrap(), 0.4);
    assert_eq!(r.report["result"]["agree"], json!(true));

    let mut mismatch = homogeneous();
    mismatch["compare"] = json!({ "methods": ["theorem51", "mc-rwre"] });
    assert_eq!(ergwalk(&["compare"], &mismatch).code, 2);

    let zero = json!({ "environment": bdp(json!([[1, 1, 1, 1]])), "velocity": { "t_max": 100, "replicas": 16 } });
    assert_eq!(ergwalk(&["compare"], &zero).code, 4);
}

#[test]
fn tailcheck_and_hconsistency_write_series() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("tail");
    let mut cfg = homogeneous();
    cfg["tailcheck"] = json!({ "steps": 200000, "m_max": 8 });
    let r = ergwalk_in(dir.path(), &["tailcheck", "--out", out.to_str().unwrap()], &cfg);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["result"]["all_below"], json!(true));
    assert!(report["result"]["log_slope"].as_f64().unwrap() < 0.0);
    let csv = std::fs::read_to_string(out.join("tail.csv")).unwrap();
    assert!(csv.starts_with("m,count,frequency,se,log_frequency,bound,below"));
    assert_eq!(csv.lines().count(), 1 + 6);

    cfg["tailcheck"] = json!({ "m_max": 2 });
    assert_eq!(ergwalk(&["tailcheck"], &cfg).code, 2);
    let mut no_bounds = cfg.clone();
    no_bounds["environment"].as_object_mut().unwrap().remove("bounds");
    assert_eq!(ergwalk(&["tailcheck"], &no_bounds).code, 2);

    let hout = dir.path().join("h");
    cfg["hconsistency"] = json!({ "t_max": 50, "replicas": 200 });
    let r = ergwalk_in(dir.path(), &["hconsistency", "--out", hout.to_str().unwrap()], &cfg);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let table = std::fs::read_to_string(hout.join("h_consistency.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(hout.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["result"]["h_consistency"]["consistent"], json!(true));
}

#[test]
fn simulated_environment_reloads_from_csv() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("first");
    let cfg = json!({
        "environment": {
            "model": "bdp", "mode": "iid",
            "sites": [[0.5, 0.8, 1.5, 1.0], [0.3, 1.2, 1.0, 2.0]],
            "weights": [0.4, 0.6]
        },
        "simulate": { "t_max": 50, "h": 0.5 },
        "seed": 21
    });
    let r = ergwalk_in(dir.path(), &["simulate", "--out", first.to_str().unwrap()], &cfg);
    assert_eq!(r.code, 0, "{}", r.stderr);
    for f in ["report.json", "path.csv", "environment.csv", "skeleton.csv"] {
        assert!(first.join(f).exists(), "{f}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(first.join("report.json")).unwrap()).unwrap();
    let (lo, hi) = (report["result"]["min_state"].as_i64().unwrap(), report["result"]["max_state"].as_i64().unwrap());

    let reload = json!({
        "environment": { "model": "bdp", "mode": "explicit", "csv": first.join("environment.csv") },
        "simulate": { "t_max": 50 },
        "seed": 21
    });
    let second = dir.path().join("second");
    let r = ergwalk_in(dir.path(), &["simulate", "--out", second.to_str().unwrap()], &reload);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(std::fs::read(first.join("path.csv")).unwrap(), std::fs::read(second.join("path.csv")).unwrap());
    let replay: Value = serde_json::from_str(&std::fs::read_to_string(second.join("report.json")).unwrap()).unwrap();
    assert_eq!(replay["config"]["environment"]["first"].as_i64(), Some(lo));
    assert_eq!(replay["config"]["environment"]["sites"].as_array().unwrap().len() as i64, hi - lo + 1);
    assert!(replay["config"]["environment"].get("csv").is_none());
}

#[test]
fn replay_from_report_is_byte_identical_across_job_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "environment": {
            "model": "bdp", "mode": "iid",
            "sites": [[0.5, 0.8, 1.5, 1.0], [0.3, 1.2, 1.0, 2.0]]
        },
        "velocity": { "t_max": 200, "replicas": 48 }
    });
    let a = dir.path().join("a");
    let r = ergwalk_in(dir.path(), &["velocity", "--seed", "99", "--jobs", "8", "--out", a.to_str().unwrap()], &cfg);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let b = dir.path().join("b");
    let r = ergwalk_at(&["velocity", "--jobs", "1", "--out", b.to_str().unwrap()], &a.join("report.json"));
    assert_eq!(r.code, 0, "{}", r.stderr);
    for f in ["report.json", "samples.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], json!(99));
    assert_eq!(report["config"]["environment"]["weights"], json!([0.5, 0.5]));
    assert_eq!(report["config"]["velocity"]["method"], "mc-bdp");

    let env_jobs = Command::new(env!("CARGO_BIN_EXE_ergwalk"))
        .args(["velocity", "--config"])
        .arg(a.join("report.json"))
        .env("ERGWALK_DEFAULT_JOBS", "3")
        .output()
        .unwrap();
    let direct = std::fs::read_to_string(a.join("report.json")).unwrap();
    assert_eq!(String::from_utf8(env_jobs.stdout).unwrap(), direct);
}
