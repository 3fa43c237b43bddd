//! Closed-loop simulation, logging and invariant checking.
//!
//! Each step follows the same order: adaptive control from the current
//! weight, tracking MPC in the shifted box, the true plant step with the total
//! control, then the weight update from the measured successor.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::adaptive::{
    adaptive_bound, lyapunov_decrease_bound, weight_error_bound, AdaptiveState, PINV_REL_TOL,
};
use crate::dynamics::{Bounds, SystemModel};
use crate::error::{Error, Result};
use crate::governor::ReferencePlan;
use crate::linalg::{eig_range, pinv_solve};
use crate::mpc::{stage_cost, TrackingConfig, TrackingMpc};

/// Tolerance on the adaptive descent and weight-bound checks.
pub const ADAPTIVE_SLACK: f64 = 1e-10;
/// Solver slack in the nominal MPC descent check.
pub const DESCENT_SLACK: f64 = 1e-6;
/// Steps whose residual is below this are left out of the disturbance
/// ledger ratio, which is meaningless at rounding level.
pub const LEDGER_RESIDUAL_FLOOR: f64 = 1e-9;
/// Mean residual over the final 10% of an adaptive run must not exceed this.
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub tracking: TrackingConfig,
    pub gamma: DMatrix<f64>,
    pub epsilon: f64,
    pub adaptation: bool,
    pub steps: usize,
    /// The run aborts once the state leaves `X` scaled by this factor.
    pub safety_scale: f64,
    pub residual_tol: f64,
    /// Extra `key = value` lines for the log header.
    pub echo: Vec<(String, String)>,
}

impl LoopConfig {
    pub fn new(tracking: TrackingConfig, gamma: DMatrix<f64>, epsilon: f64, adaptation: bool, steps: usize) -> Self {
        Self {
            tracking,
            gamma,
            epsilon,
            adaptation,
            steps,
            safety_scale: 2.0,
            residual_tol: DEFAULT_RESIDUAL_TOL,
            echo: Vec::new(),
        }
    }

    pub fn with_adaptation(mut self, on: bool) -> Self {
        self.adaptation = on;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

/// Controls applied at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedControl {
    pub u_m: DVector<f64>,
    pub u_a: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x: DVector<f64>,
    /// `None` on the final row, where only the state is reached.
    pub control: Option<AppliedControl>,
    pub v_m: f64,
    pub v_a: f64,
    pub k_tilde_norm: f64,
    pub residual: f64,
    pub iterations: usize,
    pub state_violation: bool,
    pub control_violation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub header: Vec<(String, String)>,
    pub state_dim: usize,
    pub control_dim: usize,
    pub rows: Vec<StepRecord>,
}

impl SimLog {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn steps(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn final_state(&self) -> &DVector<f64> {
        &self.rows.last().expect("log has an initial row").x
    }

    fn column_names(&self) -> Vec<String> {
        let (d, m) = (self.state_dim, self.control_dim);
        let mut cols = vec!["t".to_string()];
        cols.extend((0..d).map(|i| format!("x{i}")));
        for p in ["um", "ua", "u"] {
            cols.extend((0..m).map(|i| format!("{p}{i}")));
        }
        for c in ["Vm", "Va", "Ktilde_fro", "residual", "iters", "x_violation", "u_violation"] {
            cols.push(c.to_string());
        }
        cols
    }

    /// Header lines `# key = value`, then one CSV row per step. Floats are
    /// written in shortest round-trip form so reading back is exact.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for (k, v) in &self.header {
            writeln!(out, "# {k} = {v}")?;
        }
        writeln!(out, "{}", self.column_names().join(","))?;
        for row in &self.rows {
            let mut fields = vec![row.t.to_string()];
            fields.extend(row.x.iter().map(|v| v.to_string()));
            match &row.control {
                Some(c) => {
                    for v in [&c.u_m, &c.u_a, &c.u] {
                        fields.extend(v.iter().map(|x| x.to_string()));
                    }
                }
                None => fields.extend(std::iter::repeat_n(String::new(), 3 * self.control_dim)),
            }
            fields.push(row.v_m.to_string());
            fields.push(row.v_a.to_string());
            fields.push(row.k_tilde_norm.to_string());
            fields.push(row.residual.to_string());
            fields.push(row.iterations.to_string());
            fields.push(u8::from(row.state_violation).to_string());
            fields.push(u8::from(row.control_violation).to_string());
            writeln!(out, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut header = Vec::new();
        let mut columns: Option<Vec<String>> = None;
        let mut dims = (0, 0);
        let mut rows = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let parse_err = |msg: String| Error::Parse { line: lineno, msg };
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| parse_err("header line without `=`".into()))?;
                header.push((k.trim().to_string(), v.trim().to_string()));
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let Some(cols) = &columns else {
                let cols: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
                let d = cols.iter().filter(|c| is_indexed(c, "x")).count();
                let m = cols.iter().filter(|c| is_indexed(c, "um")).count();
                let probe = SimLog { header: vec![], state_dim: d, control_dim: m, rows: vec![] };
                if cols != probe.column_names() {
                    return Err(parse_err(format!("unexpected columns `{line}`")));
                }
                dims = (d, m);
                columns = Some(cols);
                continue;
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(parse_err(format!("expected {} fields, got {}", cols.len(), fields.len())));
            }
            let (d, m) = dims;
            let num = |i: usize| -> Result<f64> {
                fields[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(format!("bad number `{}` in column {}", fields[i], cols[i])))
            };
            let int = |i: usize| -> Result<usize> {
                fields[i]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| parse_err(format!("bad integer `{}` in column {}", fields[i], cols[i])))
            };
            let vector = |start: usize, len: usize| -> Result<DVector<f64>> {
                let v: Result<Vec<f64>> = (start..start + len).map(num).collect();
                Ok(DVector::from_vec(v?))
            };
            let ctrl_start = 1 + d;
            let blank = fields[ctrl_start..ctrl_start + 3 * m].iter().all(|f| f.trim().is_empty());
            let control = if blank {
                None
            } else {
                Some(AppliedControl {
                    u_m: vector(ctrl_start, m)?,
                    u_a: vector(ctrl_start + m, m)?,
                    u: vector(ctrl_start + 2 * m, m)?,
                })
            };
            let tail = ctrl_start + 3 * m;
            let flag = |i: usize| -> Result<bool> {
                match fields[i].trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(parse_err(format!("bad flag `{other}` in column {}", cols[i]))),
                }
            };
            rows.push(StepRecord {
                t: int(0)?,
                x: vector(1, d)?,
                control,
                v_m: num(tail)?,
                v_a: num(tail + 1)?,
                k_tilde_norm: num(tail + 2)?,
                residual: num(tail + 3)?,
                iterations: int(tail + 4)?,
                state_violation: flag(tail + 5)?,
                control_violation: flag(tail + 6)?,
            });
        }
        if columns.is_none() {
            return Err(Error::Parse { line: 0, msg: "missing column header".into() });
        }
        if rows.is_empty() {
            return Err(Error::Parse { line: 0, msg: "log has no rows".into() });
        }
        Ok(SimLog { header, state_dim: dims.0, control_dim: dims.1, rows })
    }
}

fn is_indexed(col: &str, prefix: &str) -> bool {
    col.strip_prefix(prefix)
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

fn fmt_vec(v: &DVector<f64>) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// The config echo first, then run facts it does not already state.
fn base_header(model: &SystemModel, cfg: &LoopConfig) -> Vec<(String, String)> {
    let facts = vec![
        ("model_name".to_string(), model.name().to_string()),
        ("adaptation".to_string(), if cfg.adaptation { "on" } else { "off" }.to_string()),
        ("steps".to_string(), cfg.steps.to_string()),
        ("horizon_online".to_string(), cfg.tracking.horizon.to_string()),
        ("epsilon".to_string(), cfg.epsilon.to_string()),
        ("gamma_diag".to_string(), fmt_vec(&cfg.gamma.diagonal())),
        ("qf_diag".to_string(), fmt_vec(&cfg.tracking.qf.diagonal())),
    ];
    let mut header = cfg.echo.clone();
    let known: BTreeSet<String> = header.iter().map(|(k, _)| k.clone()).collect();
    header.extend(facts.into_iter().filter(|(k, _)| !known.contains(k)));
    header
}

/// Run the adaptive tube MPC loop from `plan.state(0)` for `cfg.steps` steps.
pub fn run_closed_loop(model: &SystemModel, plan: &ReferencePlan, cfg: &LoopConfig) -> Result<SimLog> {
    let (m, q) = (model.control_dim(), model.feature_dim());
    let mut adaptive = AdaptiveState::new(m, q, cfg.gamma.clone(), cfg.epsilon)?;
    let mut mpc = TrackingMpc::new(cfg.tracking.clone());
    let safety = model.state_box().scaled_about_center(cfg.safety_scale);
    let dynamics = model.dynamics().as_ref();
    let mut x = plan.state(0).clone();
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    let wrap = |t: usize| move |e: Error| Error::Controller { step: t, source: Box::new(e) };

    for t in 0..=cfg.steps {
        let phi = model.features(&x, t);
        let u_a = if cfg.adaptation {
            adaptive.control(&phi)?
        } else {
            DVector::zeros(m)
        };
        let diag = adaptive.diagnostics(model, &x, &phi);
        let sol = mpc.step(dynamics, &x, t, plan, &u_a).map_err(wrap(t))?;
        let mut row = StepRecord {
            t,
            x: x.clone(),
            control: None,
            v_m: sol.v_m,
            v_a: diag.v_a,
            k_tilde_norm: diag.k_tilde_norm,
            residual: diag.residual_norm,
            iterations: sol.iterations,
            state_violation: !model.state_box().contains(&x),
            control_violation: false,
        };
        if t == cfg.steps {
            rows.push(row);
            break;
        }
        let u = &sol.u_m + &u_a;
        let x_next = model.step_true(&x, &u, t).map_err(wrap(t))?;
        if !x_next.iter().all(|v| v.is_finite()) || !safety.contains(&x_next) {
            return Err(wrap(t)(Error::Divergence(format!(
                "state [{}] left the safety box",
                fmt_vec(&x_next)
            ))));
        }
        if cfg.adaptation {
            adaptive = adaptive.update(model, &x, &sol.u_m, &x_next, &phi).map_err(wrap(t))?;
        }
        row.control_violation = !model.control_box().contains(&u);
        row.control = Some(AppliedControl { u_m: sol.u_m, u_a, u });
        rows.push(row);
        x = x_next;
    }
    Ok(SimLog {
        header: base_header(model, cfg),
        state_dim: model.state_dim(),
        control_dim: m,
        rows,
    })
}

/// One independent agent: model, reference and loop settings.
#[derive(Debug, Clone)]
pub struct Agent {
    pub model: SystemModel,
    pub plan: ReferencePlan,
    pub cfg: LoopConfig,
}

/// Run every agent; results keep the input order. With `parallel` the agents
/// run on scoped threads, which does not change any result.
pub fn run_multi_agent(agents: &[Agent], parallel: bool) -> Vec<Result<SimLog>> {
    if !parallel || agents.len() < 2 {
        return agents.iter().map(|a| run_closed_loop(&a.model, &a.plan, &a.cfg)).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = agents
            .iter()
            .map(|a| s.spawn(move || run_closed_loop(&a.model, &a.plan, &a.cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Divergence("agent thread panicked".into()))))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The invariant does not apply to this run.
    Skipped,
}

impl CheckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "fail",
            CheckStatus::Skipped => "skip",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub status: CheckStatus,
    /// Worst slack over the run; negative when violated. The disturbance
    /// ledger reports its empirical constant here instead.
    pub margin: f64,
    /// Step of the worst slack.
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantReport {
    pub checks: Vec<InvariantCheck>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InvariantCheck> {
        self.checks.iter().filter(|c| c.status == CheckStatus::Fail)
    }

    /// One `name status margin step` line per check, then `overall pass|fail`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let step = c.step.map_or("-".to_string(), |t| t.to_string());
            s.push_str(&format!("{} {} {:e} {}\n", c.name, c.status.as_str(), c.margin, step));
        }
        s.push_str(&format!("overall {}\n", if self.passed() { "pass" } else { "fail" }));
        s
    }
}

/// Tracks the smallest slack seen and where.
struct Worst {
    margin: f64,
    step: Option<usize>,
}

impl Worst {
    fn new() -> Self {
        Self { margin: f64::INFINITY, step: None }
    }

    fn see(&mut self, margin: f64, step: usize) {
        if margin < self.margin || margin.is_nan() {
            self.margin = margin;
            self.step = Some(step);
        }
    }

    fn finish(self, name: &'static str) -> InvariantCheck {
        let status = if self.step.is_none() {
            CheckStatus::Skipped
        } else if self.margin >= 0.0 {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        InvariantCheck { name, status, margin: self.margin, step: self.step }
    }
}

fn box_slack(b: &Bounds, v: &DVector<f64>) -> f64 {
    (0..v.len())
        .map(|j| (v[j] - b.lower()[j]).min(b.upper()[j] - v[j]))
        .fold(f64::INFINITY, f64::min)
}

/// Evaluate every run-time invariant on a log. Only the log, the model, the
/// reference and the loop settings are used, so a log read back from CSV
/// gives the same report as the in-memory one.
pub fn check_invariants(log: &SimLog, model: &SystemModel, plan: &ReferencePlan, cfg: &LoopConfig) -> InvariantReport {
    let w = model.w_true();
    let w_norm = w.norm();
    let rows = &log.rows;
    let mut checks = Vec::new();

    // V_a descent, with ũ recovered from the measured transition.
    let mut descent = Worst::new();
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let Some(c) = &a.control else { continue };
        let dv = b.v_a - a.v_a;
        let margin = (|| -> Result<f64> {
            let nominal = model.step_nominal(&a.x, &c.u_m)?;
            let g = model.input_matrix(&a.x);
            let u_tilde = pinv_solve(&g, &(&b.x - nominal), PINV_REL_TOL);
            let phi = model.features(&a.x, a.t);
            Ok(if cfg.adaptation {
                lyapunov_decrease_bound(&u_tilde, &phi, &cfg.gamma, cfg.epsilon) + ADAPTIVE_SLACK - dv
            } else {
                ADAPTIVE_SLACK - dv.abs()
            })
        })()
        .unwrap_or(f64::NEG_INFINITY);
        descent.see(margin, a.t);
    }
    checks.push(descent.finish("adaptive_descent"));

    let k_bound = weight_error_bound(w_norm, &cfg.gamma) + ADAPTIVE_SLACK;
    let mut weight = Worst::new();
    for r in rows {
        weight.see(k_bound - r.k_tilde_norm, r.t);
    }
    checks.push(weight.finish("weight_bound"));

    let ua_bound = adaptive_bound(w_norm, &cfg.gamma, model.delta_phi()) + ADAPTIVE_SLACK;
    let mut ua = Worst::new();
    for r in rows {
        if let Some(c) = &r.control {
            ua.see(ua_bound - c.u_a.norm(), r.t);
        }
    }
    checks.push(ua.finish("adaptive_control_bound"));

    let mut control = Worst::new();
    for r in rows {
        if let Some(c) = &r.control {
            let mut slack = box_slack(model.control_box(), &c.u);
            let mismatch = (&c.u_m + &c.u_a - &c.u).amax();
            if mismatch > 0.0 || !mismatch.is_finite() {
                slack = slack.min(-mismatch.abs().max(f64::MIN_POSITIVE));
            }
            control.see(slack, r.t);
        }
    }
    checks.push(control.finish("control_box"));

    let mut state = Worst::new();
    for r in rows {
        state.see(box_slack(model.state_box(), &r.x), r.t);
    }
    checks.push(state.finish("state_box"));

    let mut flags = Worst::new();
    for r in rows {
        let expect_x = !model.state_box().contains(&r.x);
        let expect_u = r.control.as_ref().is_some_and(|c| !model.control_box().contains(&c.u));
        let consistent = r.state_violation == expect_x && r.control_violation == expect_u;
        let clean = !r.state_violation && !r.control_violation;
        flags.see(if consistent && clean { 0.0 } else { -1.0 }, r.t);
    }
    checks.push(flags.finish("violation_flags"));

    let (q_min, _) = eig_range(&cfg.tracking.q);
    let mut floor = Worst::new();
    for r in rows {
        let d = &r.x - plan.state(r.t);
        floor.see(r.v_m - q_min * d.norm_squared() + 1e-12 * r.v_m.abs().max(1.0), r.t);
    }
    checks.push(floor.finish("value_floor"));

    // Nominal descent applies only to disturbance-free runs without adaptation.
    let nominal_run = !cfg.adaptation && w.iter().all(|&v| v == 0.0);
    let mut nominal = Worst::new();
    let mut ledger: Option<(f64, usize)> = None;
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let Some(c) = &a.control else { continue };
        let cs = stage_cost(&a.x, &c.u_m, plan.state(a.t), plan.control(a.t), &cfg.tracking.q, &cfg.tracking.r);
        let delta = b.v_m - a.v_m;
        if nominal_run {
            nominal.see(DESCENT_SLACK - (delta + cs), a.t);
        }
        if a.residual > LEDGER_RESIDUAL_FLOOR {
            let ratio = (delta + cs) / a.residual;
            if ledger.is_none_or(|(best, _)| ratio > best) {
                ledger = Some((ratio, a.t));
            }
        }
    }
    checks.push(nominal.finish("nominal_descent"));
    checks.push(InvariantCheck {
        name: "disturbance_ledger",
        status: if ledger.is_some() { CheckStatus::Pass } else { CheckStatus::Skipped },
        margin: ledger.map_or(0.0, |(c, _)| c),
        step: ledger.map(|(_, t)| t),
    });

    let mut residual = Worst::new();
    if cfg.adaptation && !rows.is_empty() {
        let tail = rows.len().div_ceil(10);
        let start = rows.len() - tail;
        let mean = rows[start..].iter().map(|r| r.residual).sum::<f64>() / tail as f64;
        residual.see(cfg.residual_tol - mean, rows[start].t);
    }
    checks.push(residual.finish("residual_convergence"));

    InvariantReport { checks }
}
