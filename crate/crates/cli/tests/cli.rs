use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn adjflow(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adjflow"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("ADJFLOW_LOG")
        .output()
        .expect("run adjflow")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn hash_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

const SCALAR_OPT: &str = r#"
[problem]
model = "scalar_decay"
rate = { kind = "param", index = 0 }
initial = { kind = "constant", value = 1.0 }
integrands = [{ kind = "state" }, { kind = "state_squared" }]

[time]
horizon = 1.0
steps = 10
tableau = "dirk2"

[parameters]
count = 1
initial = [0.3]
lower = [0.1]
upper = [2.0]

[[qoi]]
name = "integral"
integrand = "state"

[[qoi]]
name = "energy"
integrand = "state_squared"

[optimize]
objective = "integral"
"#;

#[test]
fn simulate_is_deterministic_and_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("control.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&adjflow(&["simulate", "--config", cfg.to_str().unwrap()], &a));
    ok(&adjflow(&["simulate", "--config", cfg.to_str().unwrap()], &b));
    for name in ["qoi_history.csv", "snapshots.csv", "summary.json", "primal.ckpt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
    let manifest = json(&a.join("manifest.json"));
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    for name in ["qoi_history.csv", "snapshots.csv"] {
        assert_eq!(hash_line(&a.join(name)), format!("# config_hash={hash}"));
    }
    assert_eq!(json(&a.join("summary.json"))["config_hash"], hash.as_str());
    let listed: Vec<&str> = manifest["artifacts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(listed.contains(&"primal.ckpt"));
}

#[test]
fn adjoint_reports_gradients_and_dual_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("steady_start.toml");
    ok(&adjflow(&["adjoint", "--config", cfg.to_str().unwrap()], dir.path()));
    let g = json(&dir.path().join("gradient.json"));
    assert_eq!(g["qois"].as_array().unwrap().len(), 5);
    assert_eq!(g["qois"][0]["gradient"]["value"].as_array().unwrap().len(), 4);
    for d in g["dual_residuals"].as_array().unwrap() {
        assert_eq!(d["passes"], true, "{d}");
    }
}

#[test]
fn grad_check_and_order_study_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("scalar_decay.toml");
    ok(&adjflow(&["grad-check", "--config", cfg.to_str().unwrap()], dir.path()));
    let report = json(&dir.path().join("grad_check.json"));
    for e in report["min_error"].as_array().unwrap() {
        assert!(e.as_f64().unwrap() <= 1e-6);
    }
    let table = fs::read_to_string(dir.path().join("grad_check.csv")).unwrap();
    // hash line, header, 6 taus x 5 QoIs
    assert_eq!(table.lines().count(), 2 + 30);

    ok(&adjflow(&["order-study", "--config", cfg.to_str().unwrap(), "--threads", "2"], dir.path()));
    let study = json(&dir.path().join("order_study.json"));
    let dirk3 = study["slopes"].as_array().unwrap().iter().find(|s| s["label"] == "dirk3").unwrap();
    let slope = dirk3["slope"].as_f64().unwrap();
    assert!((2.7..=3.3).contains(&slope), "{slope}");
}

#[test]
fn gcl_check_contrast() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("gcl_freestream.toml");
    ok(&adjflow(&["gcl-check", "--config", cfg.to_str().unwrap()], dir.path()));
    let r = json(&dir.path().join("gcl_check.json"));
    assert!(r["with_gcl"].as_f64().unwrap() <= 1e-12);
    assert!(r["without_gcl"].as_f64().unwrap() >= 1e-8);
}

#[test]
fn optimize_writes_trace_and_final_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("opt.toml");
    fs::write(&cfg, SCALAR_OPT).unwrap();
    let out = dir.path().join("run");
    ok(&adjflow(&["optimize", "--config", cfg.to_str().unwrap()], &out));
    let fin = json(&out.join("final_mu.json"));
    // the state integral decreases in the rate, so the upper bound is active
    assert!((fin["mu"][0].as_f64().unwrap() - 2.0).abs() < 1e-10, "{fin}");
    let trace = fs::read_to_string(out.join("opt_trace.csv")).unwrap();
    assert!(trace.starts_with("# config_hash="));
    assert!(trace.lines().nth(1).unwrap().starts_with("outer,iter,evaluations,objective"));
    assert!(json(&out.join("opt_trace.json"))["trace"].as_array().unwrap().len() >= 2);
}

#[test]
fn invalid_config_fails_with_typed_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, SCALAR_OPT.replace("[time]", "[time]\nbogus = 1")).unwrap();
    let out = adjflow(&["simulate", "--config", cfg.to_str().unwrap()], &dir.path().join("run"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[config]"));

    let missing = adjflow(&["gcl-check", "--config", configs().join("scalar_decay.toml").to_str().unwrap()], dir.path());
    assert_eq!(missing.status.code(), Some(2));
}
