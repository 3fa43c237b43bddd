use std::fs;
use std::path::Path;

use tubempc::cli::{cmd_run, main_with_args, ExperimentConfig};
use tubempc::orchestrator::SimLog;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("tubempc").chain(args.iter().copied()))
}

fn write_cfg(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn data_rows(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).skip(1).collect()
}

#[test]
fn governor_from_equilibrium_writes_a_constant_plan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "model = cstr\nx0 = 0.2632 0.6519\nhorizon_governor = 40\n");
    let out = dir.path().join("out");
    assert_eq!(run(&["governor", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let text = fs::read_to_string(out.join("reference_cstr.csv")).unwrap();
    assert!(text.contains("# horizon_governor = 40\n"));
    let rows = data_rows(&text);
    assert_eq!(rows.len(), 41);
    assert!(rows[40].starts_with("40,0.2632,0.6519,") || {
        let f: Vec<f64> = rows[40].split(',').skip(1).map(|s| s.parse().unwrap()).collect();
        (f[0] - 0.2632).abs() <= 1e-6 && (f[1] - 0.6519).abs() <= 1e-6
    });
    for row in rows {
        let f: Vec<f64> = row.split(',').skip(1).map(|s| s.parse().unwrap()).collect();
        // the four-digit equilibrium is a fixed point only to the 1e-3 model tolerance
        assert!((f[0] - 0.2632).abs() < 1e-3 && (f[1] - 0.6519).abs() < 1e-3, "{row}");
        assert!((f[2] - 0.7583).abs() < 1e-3, "{row}");
    }
}

#[test]
fn empty_tightened_box_exits_with_governor_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "model = wingrock:1\ncontrol_margin_lower = 1\ncontrol_margin_upper = 1\n");
    assert_eq!(run(&["governor", "--config", &cfg, "--out", dir.path().to_str().unwrap()]), 2);
}

#[test]
fn bad_config_exits_with_parse_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "model = wingrock:1\nhorizon = 3\n");
    assert_eq!(run(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]), 5);
    let missing = dir.path().join("nope.cfg");
    assert_eq!(run(&["run", "--config", missing.to_str().unwrap()]), 5);
}

#[test]
fn zero_steps_writes_only_the_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "model = wingrock:2\n");
    let out = dir.path().join("o");
    assert_eq!(run(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--steps", "0"]), 0);
    let text = fs::read_to_string(out.join("run_wingrock2.csv")).unwrap();
    assert!(text.contains("# steps = 0\n"));
    assert_eq!(data_rows(&text).len(), 1);
    for plot in ["states", "controls", "va", "residual"] {
        assert!(out.join(format!("run_wingrock2_{plot}.svg")).exists());
    }
}

#[test]
fn offline_check_reproduces_the_in_process_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: ExperimentConfig = "model = wingrock:1\nsteps = 120\nseed = 11\n".parse().unwrap();
    let outcome = cmd_run(&cfg, dir.path(), true, false).unwrap();
    let in_process = outcome.runs[0].report.to_text();
    let log_path = dir.path().join("run_wingrock1.csv");
    let offline = tubempc::cli::cmd_check(&log_path).unwrap().to_text();
    assert_eq!(in_process, offline);
    assert_eq!(run(&["check", log_path.to_str().unwrap()]), 0);
}

#[test]
fn corrupted_control_fails_the_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: ExperimentConfig = "model = wingrock:1\nsteps = 30\n".parse().unwrap();
    cmd_run(&cfg, dir.path(), false, false).unwrap();
    let path = dir.path().join("run_wingrock1.csv");
    let mut log = SimLog::read_csv(fs::read_to_string(&path).unwrap().as_bytes()).unwrap();
    log.rows[12].control.as_mut().unwrap().u[0] = 61.0;
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, log.to_csv_string()).unwrap();
    let report = tubempc::cli::cmd_check(&bad).unwrap();
    let c = report.get("control_box").unwrap();
    assert_eq!(c.step, Some(12));
    assert!(!report.passed());
    assert_eq!(run(&["check", bad.to_str().unwrap()]), 4);
}

#[test]
fn malformed_log_exits_with_parse_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.csv");
    fs::write(&path, "# model = wingrock:1\nt,x0\n0,abc\n").unwrap();
    assert_eq!(run(&["check", path.to_str().unwrap()]), 5);
}

#[test]
fn disturbance_free_baseline_value_never_increases() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "model = wingrock:1\ndisturbance_scale = 0\nsteps = 150\n");
    let out = dir.path().join("o");
    assert_eq!(run(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--adaptation", "off", "--strict"]), 0);
    let log = SimLog::read_csv(fs::read_to_string(out.join("run_wingrock1.csv")).unwrap().as_bytes()).unwrap();
    for w in log.rows.windows(2) {
        assert!(w[1].v_m <= w[0].v_m + 1e-6, "t={}", w[0].t);
    }
}

#[test]
fn compare_writes_table_and_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "model = wingrock:1, wingrock:2\nsteps = 100\n");
    let out = dir.path().join("c");
    assert_eq!(run(&["compare", "--config", &cfg, "--out", out.to_str().unwrap(), "--parallel-agents"]), 0);
    let table = fs::read_to_string(out.join("compare.txt")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("wingrock:")).count(), 4);
    assert!(out.join("compare_wingrock2_x0.svg").exists());
    assert!(out.join("compare_wingrock1_off.csv").exists());
}
