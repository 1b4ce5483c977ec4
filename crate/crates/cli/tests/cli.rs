use std::path::Path;
use std::process::{Command, Output};

use ftc_core::harness::read_csv;

fn ftc_sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftc-sim")).args(args).output().expect("binary runs")
}

fn header(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn run_writes_imm_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s2.csv");
    let res = ftc_sim(&[
        "run", "--scenario", "2", "--filter", "imm-ekf", "--nodes", "6", "--duration", "10.5", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = read_csv(&out).unwrap();
    assert_eq!(rows.len(), 1051);
    assert!(header(&out).ends_with("mu1,mu2,mu3,mu4,solver_status"));
    assert!(String::from_utf8_lossy(&res.stderr).contains("imm-ekf/4"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from_file.csv");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!("# short run\nscenario = 1\nfilter = ekf\nnodes = 4\nduration = 3\nout = {}\n", out.display()),
    )
    .unwrap();
    let res = ftc_sim(&["run", "--config", cfg.to_str().unwrap(), "--duration", "0.5"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(read_csv(&out).unwrap().len(), 51);
    assert!(header(&out).ends_with("S,solver_status"));
}

#[test]
fn stdout_when_no_output_path() {
    let res = ftc_sim(&["run", "--scenario", "1", "--nodes", "4", "--duration", "0.2"]);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    assert!(text.starts_with("t,x,y,psi,"));
    assert_eq!(text.lines().count(), 22);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(ftc_sim(&[]).status.code(), Some(1));
    assert_eq!(ftc_sim(&["run", "--filter", "kalman"]).status.code(), Some(1));
    assert_eq!(ftc_sim(&["run", "--scenario", "7"]).status.code(), Some(1));
    assert_eq!(ftc_sim(&["run", "--feedback", "maybe"]).status.code(), Some(1));
    assert_eq!(ftc_sim(&["compare", "--scenario", "1"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    let res = ftc_sim(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("colour"));
    assert_eq!(ftc_sim(&["--help"]).status.code(), Some(0));
}

#[test]
fn io_errors_exit_two() {
    let res = ftc_sim(&["run", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(res.status.code(), Some(2));
    let res = ftc_sim(&["run", "--nodes", "4", "--duration", "0.1", "--out", "/nonexistent/dir/log.csv"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("/nonexistent/dir/log.csv"));
}

#[test]
fn compare_writes_every_filter_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let res = ftc_sim(&[
        "compare", "--scenario", "1", "--seed", "3", "--nodes", "4", "--duration", "1", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for name in ["s1_ekf.csv", "s1_ukf.csv", "s1_imm-ekf-4.csv", "s1_imm-ukf-4.csv"] {
        assert_eq!(read_csv(dir.path().join(name)).unwrap().len(), 101, "{name}");
    }
    let table = std::fs::read_to_string(dir.path().join("s1_compare.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "label,settle_time,radius_rmse,coverage,tracking_rms");
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn sweep_restricted_to_one_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let res = ftc_sim(&[
        "sweep", "--scenario", "1", "--filter", "ukf", "--nodes", "4", "--duration", "0.5", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(dir.path().join("s1_ukf.csv").exists());
    assert!(dir.path().join("s1_ukf-open.csv").exists());
    assert!(dir.path().join("s1_compare.csv").exists());
}
