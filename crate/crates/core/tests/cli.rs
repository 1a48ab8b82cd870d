use std::path::{Path, PathBuf};
use std::process::Command;

use fracphase::output::TIMESERIES_HEADER;
use serde_json::Value;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn fracphase(args: &[&str], out: Option<&Path>) -> i32 {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fracphase"));
    cmd.args(args).arg("--quiet");
    if let Some(out) = out {
        cmd.arg("--out").arg(out);
    }
    cmd.status().unwrap().code().unwrap()
}

fn simulate(out: &Path, overrides: &[&str]) -> i32 {
    let cfg = smoke_config();
    let mut args = vec!["simulate", "--config", cfg.to_str().unwrap()];
    for o in overrides {
        args.extend(["--override", o]);
    }
    fracphase(&args, Some(out))
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> (String, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let rows = lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn smoke_simulation_writes_exact_header() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(simulate(&out, &[]), 0);
    let (header, rows) = csv_rows(&out.join("timeseries.csv"));
    assert_eq!(header, TIMESERIES_HEADER.join(","));
    assert_eq!(rows.len(), 1001);
    assert_eq!(rows[1000][0], 1.0);
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["exit_code"], 0);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    let files: Vec<&str> = m["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    for f in ["timeseries.csv", "timeseries.dat", "snapshots.csv", "checks.csv", "manifest.json"] {
        assert!(files.contains(&f), "{f} missing from {files:?}");
        assert!(out.join(f).exists());
    }
}

#[test]
fn nonpositive_eps_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(simulate(&out, &["potential.eps=0.0"]), 2);
    let m = manifest(&out);
    assert_eq!(m["status"], "config_error");
    assert!(m["error"].as_str().unwrap().contains("potential.eps"));
    assert!(!out.join("timeseries.csv").exists());
}

#[test]
fn low_exponents_with_nonconstant_coupling_warn() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let code = simulate(
        &out,
        &[
            "coupling={kind = \"tanh\", base = 1.0, amplitude = 0.5, rate = 1.0}",
            "exponents.r=0.1",
            "exponents.sigma=0.2",
            "scheme.t_final=0.01",
        ],
    );
    assert_eq!(code, 0);
    let warnings = manifest(&out)["warnings"].as_array().unwrap().clone();
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].as_str().unwrap().contains("3/4"));
}

#[test]
fn overflow_keeps_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let code = simulate(
        &out,
        &["potential.gamma=1e4", "coupling.value=0.0", "scheme.dt=0.5", "scheme.t_final=100.0"],
    );
    assert_eq!(code, 3);
    let m = manifest(&out);
    assert_eq!(m["status"], "solver_error");
    assert!(m["error"].as_str().unwrap().contains("overflow"));
    let (_, rows) = csv_rows(&out.join("timeseries.csv"));
    assert!(rows.len() > 1 && rows.len() < 201);
    assert!(rows.iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn stride_past_the_end_keeps_endpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(simulate(&out, &["scheme.snapshot_stride=100000"]), 0);
    let text = std::fs::read_to_string(out.join("snapshots.csv")).unwrap();
    let mut times: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    times.dedup();
    assert_eq!(times, vec![0.0, 1.0]);
}

#[test]
fn zero_data_stays_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(simulate(&out, &["data.theta0=[]", "data.phi0=[]"]), 0);
    let (_, rows) = csv_rows(&out.join("timeseries.csv"));
    assert!(rows.iter().all(|r| r[1..].iter().all(|v| *v == 0.0)));
}

#[test]
fn unfinished_relaxation_fails_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = smoke_config();
    let args = ["longtime", "--config", cfg.to_str().unwrap(), "--override", "scheme.t_final=0.1"];
    assert_eq!(fracphase(&args, Some(&out)), 4);
    let m = manifest(&out);
    assert_eq!(m["status"], "check_failed");
    assert!(m["checks"].as_array().unwrap().iter().any(|c| c["passed"] == false));
    assert!(out.join("omega.csv").exists());
}

#[test]
fn relaxlimit_writes_study() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = smoke_config();
    assert_eq!(fracphase(&["relaxlimit", "--config", cfg.to_str().unwrap()], Some(&out)), 0);
    let (header, rows) = csv_rows(&out.join("relaxation_limit.csv"));
    assert!(header.starts_with("sigma"));
    assert_eq!(rows.len(), 4);
    assert_eq!(manifest(&out)["subcommand"], "relaxlimit");
}

#[test]
fn selftest_honours_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_fracphase"))
        .args(["selftest", "--samples", "200", "--quiet"])
        .env("FRACPHASE_OUT_ROOT", tmp.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let dir = tmp.path().join("selftest");
    let text = std::fs::read_to_string(dir.join("selftest.csv")).unwrap();
    assert_eq!(text.lines().count(), 41);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
    assert_eq!(manifest(&dir)["status"], "ok");
}
