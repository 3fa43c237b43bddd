//! Command-line front end: `governor`, `run`, `compare` and `check`.
//!
//! Exit codes: 0 ok, 2 infeasible governor, 3 divergence, 4 invariant
//! violation, 5 I/O, parse or configuration error.

mod config;
pub mod svg;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

pub use config::{AngleUnit, ExperimentConfig, Family, Reserve, KEYS};

use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::governor::{solve_reference, ReferencePlan};
use crate::orchestrator::{
    check_invariants, run_multi_agent, Agent, InvariantReport, LoopConfig, SimLog,
};
use svg::{line_chart, Series};

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InfeasibleGovernor(_) | Error::EmptySet(_) => 2,
        Error::Divergence(_) | Error::Controller { .. } => 3,
        Error::InvariantViolation(_) => 4,
        Error::Io(_) | Error::Parse { .. } | Error::Config(_) | Error::Dimension { .. } => 5,
    }
}

/// File-name label for an agent selector: `wingrock:2` → `wingrock2`.
pub fn label(selector: &str) -> String {
    selector.replace(':', "")
}

/// Everything needed to simulate one agent.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub selector: String,
    pub model: SystemModel,
    pub plan: ReferencePlan,
    pub loop_cfg: LoopConfig,
}

/// Build the model, solve the reference and assemble the loop settings for
/// every agent in `cfg`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Vec<Prepared>> {
    cfg.model
        .iter()
        .map(|sel| {
            let model = cfg.build_model(sel)?;
            let x0 = cfg.initial_state(sel)?;
            let plan = solve_reference(&model, &x0, &cfg.governor_config(&model))?;
            let loop_cfg = cfg.loop_config(&model, sel);
            Ok(Prepared { selector: sel.clone(), model, plan, loop_cfg })
        })
        .collect()
}

fn header_text(echo: &[(String, String)]) -> String {
    echo.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct GovernorSummary {
    pub selector: String,
    pub path: PathBuf,
    pub horizon: usize,
    pub terminal_error: f64,
    pub dynamics_defect: f64,
    pub state_violation: f64,
    pub control_violation: f64,
}

impl GovernorSummary {
    pub fn to_text(&self) -> String {
        format!(
            "{}: N={} terminal_error={:.3e} dynamics_defect={:.3e} state_violation={:.3e} control_violation={:.3e} -> {}",
            self.selector,
            self.horizon,
            self.terminal_error,
            self.dynamics_defect,
            self.state_violation,
            self.control_violation,
            self.path.display()
        )
    }
}

/// Solve and write the padded reference plan of each agent.
pub fn cmd_governor(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<GovernorSummary>> {
    fs::create_dir_all(out)?;
    let mut summaries = Vec::new();
    for p in prepare(cfg)? {
        let path = out.join(format!("reference_{}.csv", label(&p.selector)));
        let mut buf = header_text(&cfg.echo_for(&p.selector)).into_bytes();
        p.plan.write_csv(&mut buf)?;
        fs::write(&path, buf)?;
        let boxes = crate::governor::tighten(
            p.model.state_box(),
            p.model.control_box(),
            &cfg.governor_config(&p.model).tightening,
        )?;
        let n = p.plan.horizon();
        summaries.push(GovernorSummary {
            selector: p.selector.clone(),
            path,
            horizon: n,
            terminal_error: (p.plan.state(n) - p.model.x_eq()).amax(),
            dynamics_defect: p.plan.dynamics_defect(&p.model)?,
            state_violation: p.plan.states().iter().map(|x| boxes.state.violation(x)).fold(0.0, f64::max),
            control_violation: p.plan.controls().iter().map(|u| boxes.control.violation(u)).fold(0.0, f64::max),
        });
    }
    Ok(summaries)
}

#[derive(Debug, Clone)]
pub struct AgentRun {
    pub selector: String,
    pub log: SimLog,
    pub report: InvariantReport,
    pub plan: ReferencePlan,
    pub model: SystemModel,
}

fn simulate(cfg: &ExperimentConfig, parallel: bool) -> Result<Vec<AgentRun>> {
    let prepared = prepare(cfg)?;
    let agents: Vec<Agent> = prepared
        .iter()
        .map(|p| Agent { model: p.model.clone(), plan: p.plan.clone(), cfg: p.loop_cfg.clone() })
        .collect();
    let logs = run_multi_agent(&agents, parallel);
    prepared
        .into_iter()
        .zip(logs)
        .map(|(p, log)| {
            let log = log?;
            let report = check_invariants(&log, &p.model, &p.plan, &p.loop_cfg);
            Ok(AgentRun { selector: p.selector, log, report, plan: p.plan, model: p.model })
        })
        .collect()
}

fn series_t(log: &SimLog, f: impl Fn(&crate::orchestrator::StepRecord) -> Option<f64>) -> Vec<(f64, f64)> {
    log.rows.iter().filter_map(|r| f(r).map(|y| (r.t as f64, y))).collect()
}

fn run_plots(run: &AgentRun, out: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let log = &run.log;
    let mut states = Vec::new();
    for i in 0..log.state_dim {
        states.push(Series::new(format!("x{i}"), series_t(log, |r| Some(r.x[i]))));
        states.push(Series::new(format!("x{i} ref"), series_t(log, |r| Some(run.plan.state(r.t)[i]))).dashed());
    }
    let mut controls = Vec::new();
    for j in 0..log.control_dim {
        controls.push(Series::new(format!("u{j}"), series_t(log, |r| r.control.as_ref().map(|c| c.u[j]))));
        controls.push(Series::new(format!("um{j}"), series_t(log, |r| r.control.as_ref().map(|c| c.u_m[j]))).dashed());
        controls.push(Series::new(format!("ua{j}"), series_t(log, |r| r.control.as_ref().map(|c| c.u_a[j]))).dashed());
    }
    let charts = [
        ("states", line_chart(&format!("{stem}: states"), "step", "state", &states)),
        ("controls", line_chart(&format!("{stem}: controls"), "step", "control", &controls)),
        ("va", line_chart(&format!("{stem}: adaptive Lyapunov function"), "step", "V_a", &[Series::new("V_a", series_t(log, |r| Some(r.v_a)))])),
        (
            "residual",
            line_chart(
                &format!("{stem}: residual"),
                "step",
                "log10 |g u~|",
                &[Series::new("log10 residual", series_t(log, |r| Some(r.residual.max(1e-300).log10())))],
            ),
        ),
        ("vm", line_chart(&format!("{stem}: tracking value"), "step", "V_m", &[Series::new("V_m", series_t(log, |r| Some(r.v_m)))])),
    ];
    let mut paths = Vec::new();
    for (name, svg) in charts {
        let path = out.join(format!("{stem}_{name}.svg"));
        write_file(&path, &svg)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub runs: Vec<AgentRun>,
    pub files: Vec<PathBuf>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.runs.iter().all(|r| r.report.passed())
    }
}

/// Simulate every agent; write `run_<agent>.csv`, the invariant report and
/// SVG plots. With `strict`, a failed invariant is an error after the files
/// are written.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, strict: bool, parallel: bool) -> Result<RunOutcome> {
    fs::create_dir_all(out)?;
    let runs = simulate(cfg, parallel)?;
    let mut files = Vec::new();
    for run in &runs {
        let stem = format!("run_{}", label(&run.selector));
        let csv = out.join(format!("{stem}.csv"));
        write_file(&csv, &run.log.to_csv_string())?;
        let report = out.join(format!("{stem}_report.txt"));
        write_file(&report, &(header_text(&run.log.header) + &run.report.to_text()))?;
        files.push(csv);
        files.push(report);
        files.extend(run_plots(run, out, &stem)?);
    }
    let outcome = RunOutcome { runs, files };
    if strict && !outcome.passed() {
        let names: Vec<String> = outcome
            .runs
            .iter()
            .flat_map(|r| r.report.failures().map(move |c| format!("{}:{}", r.selector, c.name)))
            .collect();
        return Err(Error::InvariantViolation(names.join(", ")));
    }
    Ok(outcome)
}

/// Per-run metrics of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub selector: String,
    pub adaptation: bool,
    /// `‖x_T − x_e‖`
    pub final_error: f64,
    /// RMS of `‖x_t − x^r_t‖` over the last quarter of the run.
    pub rms_tail: f64,
    /// Largest `‖x_t − x^r_t‖` over the run.
    pub peak_deviation: f64,
    pub violations: usize,
}

impl CompareRow {
    pub fn from_run(run: &AgentRun) -> Self {
        let dev: Vec<f64> = run.log.rows.iter().map(|r| (&r.x - run.plan.state(r.t)).norm()).collect();
        let start = dev.len() - dev.len().div_ceil(4);
        let tail = &dev[start..];
        Self {
            selector: run.selector.clone(),
            adaptation: run.log.header_value("adaptation") == Some("on"),
            final_error: (run.log.final_state() - run.model.x_eq()).norm(),
            rms_tail: (tail.iter().map(|d| d * d).sum::<f64>() / tail.len() as f64).sqrt(),
            peak_deviation: dev.iter().cloned().fold(0.0, f64::max),
            violations: run.log.rows.iter().filter(|r| r.state_violation || r.control_violation).count(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub adaptive: Vec<AgentRun>,
    pub baseline: Vec<AgentRun>,
    pub rows: Vec<CompareRow>,
    pub files: Vec<PathBuf>,
}

impl CompareOutcome {
    pub fn table(&self) -> String {
        let mut s = format!("{:<12} {:<10} {:>14} {:>14} {:>14} {:>10}\n", "agent", "adaptation", "final_error", "rms_tail", "peak_dev", "violations");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:<10} {:>14.6e} {:>14.6e} {:>14.6e} {:>10}\n",
                r.selector,
                if r.adaptation { "on" } else { "off" },
                r.final_error,
                r.rms_tail,
                r.peak_deviation,
                r.violations
            ));
        }
        s
    }
}

/// Run with and without adaptation under otherwise identical settings; the
/// baseline also drops the adaptive reserve from the reference box.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path, parallel: bool) -> Result<CompareOutcome> {
    fs::create_dir_all(out)?;
    let mut on = cfg.clone();
    on.adaptation = true;
    let mut off = cfg.clone();
    off.adaptation = false;
    let adaptive = simulate(&on, parallel)?;
    let baseline = simulate(&off, parallel)?;
    let mut files = Vec::new();
    let mut rows = Vec::new();
    for (a, b) in adaptive.iter().zip(&baseline) {
        let stem = format!("compare_{}", label(&a.selector));
        for (run, tag) in [(a, "on"), (b, "off")] {
            let path = out.join(format!("{stem}_{tag}.csv"));
            write_file(&path, &run.log.to_csv_string())?;
            files.push(path);
            rows.push(CompareRow::from_run(run));
        }
        for i in 0..a.log.state_dim {
            let series = vec![
                Series::new("adaptive", series_t(&a.log, |r| Some(r.x[i]))),
                Series::new("baseline", series_t(&b.log, |r| Some(r.x[i]))),
                Series::new("reference", series_t(&a.log, |r| Some(a.plan.state(r.t)[i]))).dashed(),
            ];
            let path = out.join(format!("{stem}_x{i}.svg"));
            write_file(&path, &line_chart(&format!("{}: x{i}", a.selector), "step", &format!("x{i}"), &series))?;
            files.push(path);
        }
        let err = |run: &AgentRun| series_t(&run.log, |r| Some((&r.x - run.model.x_eq()).norm()));
        let path = out.join(format!("{stem}_error.svg"));
        write_file(
            &path,
            &line_chart(
                &format!("{}: distance to equilibrium", a.selector),
                "step",
                "|x - x_e|",
                &[Series::new("adaptive", err(a)), Series::new("baseline", err(b))],
            ),
        )?;
        files.push(path);
    }
    let mut outcome = CompareOutcome { adaptive, baseline, rows, files };
    let path = out.join("compare.txt");
    write_file(&path, &(header_text(&cfg.echo()) + &outcome.table()))?;
    outcome.files.push(path);
    Ok(outcome)
}

/// Re-check a run log offline. The config is recovered from the log header,
/// the reference is solved again, and the same checks as in-process run.
pub fn cmd_check(log_path: &Path) -> Result<InvariantReport> {
    let file = fs::File::open(log_path)?;
    let log = SimLog::read_csv(BufReader::new(file))?;
    let pairs: Vec<(String, String, usize)> = log
        .header
        .iter()
        .enumerate()
        .map(|(i, (k, v))| (k.clone(), v.clone(), i + 1))
        .collect();
    let cfg = ExperimentConfig::from_pairs(&pairs, true)?;
    if cfg.model.len() != 1 {
        return Err(Error::Config("log header must name exactly one agent".into()));
    }
    let sel = cfg.model[0].clone();
    let model = cfg.build_model(&sel)?;
    let x0 = cfg.initial_state(&sel)?;
    let plan = solve_reference(&model, &x0, &cfg.governor_config(&model))?;
    if log.state_dim != model.state_dim() || log.control_dim != model.control_dim() {
        return Err(Error::Config("log dimensions do not match the model".into()));
    }
    let first: &DVector<f64> = &log.rows[0].x;
    if first != plan.state(0) {
        return Err(Error::Config("log does not start at the configured initial state".into()));
    }
    Ok(check_invariants(&log, &model, &plan, &cfg.loop_config(&model, &sel)))
}

#[derive(Debug, Parser)]
#[command(name = "tubempc", about = "Tube MPC with discrete-time adaptive disturbance rejection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file (`key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `on` or `off`; overrides `adaptation`.
    #[arg(long)]
    pub adaptation: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Exit with code 4 when an invariant fails.
    #[arg(long)]
    pub strict: bool,
    /// Simulate agents concurrently.
    #[arg(long)]
    pub parallel_agents: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the offline reference and write it as CSV.
    Governor(Common),
    /// Run the closed loop and write the log, report and plots.
    Run(Common),
    /// Run with and without adaptation and tabulate the difference.
    Compare(Common),
    /// Re-check the invariants of a run log.
    Check {
        log: PathBuf,
    },
}

/// Read the config file and apply command-line overrides.
pub fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&common.config)?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(a) = &common.adaptation {
        cfg.adaptation = config::on_off(a)?;
    }
    if let Some(s) = common.steps {
        cfg.steps = s;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Governor(c) => {
            let cfg = load_config(c)?;
            for s in cmd_governor(&cfg, Path::new(&cfg.out_dir))? {
                println!("{}", s.to_text());
            }
            Ok(0)
        }
        Command::Run(c) => {
            let cfg = load_config(c)?;
            let outcome = cmd_run(&cfg, Path::new(&cfg.out_dir), c.strict, c.parallel_agents)?;
            for r in &outcome.runs {
                println!("== {}", r.selector);
                print!("{}", r.report.to_text());
            }
            Ok(0)
        }
        Command::Compare(c) => {
            let cfg = load_config(c)?;
            let outcome = cmd_compare(&cfg, Path::new(&cfg.out_dir), c.parallel_agents)?;
            print!("{}", outcome.table());
            if c.strict {
                let all = outcome.adaptive.iter().chain(&outcome.baseline);
                if !all.into_iter().all(|r| r.report.passed()) {
                    return Err(Error::InvariantViolation("comparison run failed a check".into()));
                }
            }
            Ok(0)
        }
        Command::Check { log } => {
            let report = cmd_check(log)?;
            print!("{}", report.to_text());
            Ok(if report.passed() { 0 } else { 4 })
        }
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 5 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
