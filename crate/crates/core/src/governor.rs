//! Offline reference governor.
//!
//! Tightens the constraint boxes, then steers the nominal model from the
//! initial state to the equilibrium over a fixed horizon with a terminal
//! equality. The resulting [`ReferencePlan`] is padded with the equilibrium
//! for every index past the horizon.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{Bounds, SystemModel};
use crate::error::{check_dim, Error, GovernorDiagnostics, Result};
use crate::trajopt::{rollout, OcpSolver, OcpSpec, SolverSettings, Terminal};

/// Margins for constraint tightening.
#[derive(Debug, Clone, PartialEq)]
pub struct TighteningSpec {
    pub state_margin_lower: DVector<f64>,
    pub state_margin_upper: DVector<f64>,
    pub control_margin_lower: DVector<f64>,
    pub control_margin_upper: DVector<f64>,
    /// Control authority held back for the adaptive term, taken off every
    /// face of `U` before the control margins.
    pub adaptive_reserve: f64,
}

impl TighteningSpec {
    pub fn none(state_dim: usize, control_dim: usize) -> Self {
        Self {
            state_margin_lower: DVector::zeros(state_dim),
            state_margin_upper: DVector::zeros(state_dim),
            control_margin_lower: DVector::zeros(control_dim),
            control_margin_upper: DVector::zeros(control_dim),
            adaptive_reserve: 0.0,
        }
    }

    /// Symmetric margins equal to `fraction` of each half-width.
    pub fn fraction_of_half_widths(state_box: &Bounds, control_box: &Bounds, fraction: f64, reserve: f64) -> Self {
        let xs = state_box.half_widths() * fraction;
        let us = control_box.half_widths() * fraction;
        Self {
            state_margin_lower: xs.clone(),
            state_margin_upper: xs,
            control_margin_lower: us.clone(),
            control_margin_upper: us,
            adaptive_reserve: reserve,
        }
    }

    pub fn with_reserve(mut self, reserve: f64) -> Self {
        self.adaptive_reserve = reserve;
        self
    }
}

/// `X_r`, `𝕌′` and `U_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct TightenedBoxes {
    pub state: Bounds,
    pub control_reserved: Bounds,
    pub control: Bounds,
}

fn non_degenerate(b: Bounds, what: &str) -> Result<Bounds> {
    if b.lower().iter().zip(b.upper().iter()).any(|(lo, hi)| lo >= hi) {
        return Err(Error::EmptySet(format!("{what} is empty after tightening")));
    }
    Ok(b)
}

pub fn tighten(state_box: &Bounds, control_box: &Bounds, spec: &TighteningSpec) -> Result<TightenedBoxes> {
    // NaN is rejected too
    if spec.adaptive_reserve.is_nan() || spec.adaptive_reserve < 0.0 {
        return Err(Error::Config(format!(
            "adaptive reserve must be nonnegative, got {}",
            spec.adaptive_reserve
        )));
    }
    let reserved = control_box
        .shrink_uniform(spec.adaptive_reserve)
        .map_err(|_| Error::Config("reserved control box is empty".into()))?;
    let reserved = non_degenerate(reserved, "reserved control box")?;
    let control = reserved
        .shrink(&spec.control_margin_lower, &spec.control_margin_upper)
        .map_err(|_| Error::EmptySet("reference control box is empty".into()))
        .and_then(|b| non_degenerate(b, "reference control box"))?;
    let state = state_box
        .shrink(&spec.state_margin_lower, &spec.state_margin_upper)
        .map_err(|_| Error::EmptySet("reference state box is empty".into()))
        .and_then(|b| non_degenerate(b, "reference state box"))?;
    Ok(TightenedBoxes {
        state,
        control_reserved: reserved,
        control,
    })
}

/// Reference trajectory `x^r_0 … x^r_N`, `u^r_0 … u^r_{N−1}`, extended by
/// `(x_e, u_e)` for every later index.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePlan {
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
    x_eq: DVector<f64>,
    u_eq: DVector<f64>,
}

impl ReferencePlan {
    pub fn new(
        states: Vec<DVector<f64>>,
        controls: Vec<DVector<f64>>,
        x_eq: DVector<f64>,
        u_eq: DVector<f64>,
    ) -> Result<Self> {
        if controls.is_empty() || states.len() != controls.len() + 1 {
            return Err(Error::Config(format!(
                "a plan needs N ≥ 1 controls and N + 1 states, got {} and {}",
                controls.len(),
                states.len()
            )));
        }
        for x in &states {
            check_dim("plan state", x_eq.len(), x.len())?;
        }
        for u in &controls {
            check_dim("plan control", u_eq.len(), u.len())?;
        }
        Ok(Self {
            states,
            controls,
            x_eq,
            u_eq,
        })
    }

    /// Constant plan sitting at the equilibrium.
    pub fn at_equilibrium(horizon: usize, x_eq: DVector<f64>, u_eq: DVector<f64>) -> Result<Self> {
        Self::new(vec![x_eq.clone(); horizon + 1], vec![u_eq.clone(); horizon], x_eq, u_eq)
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn state(&self, t: usize) -> &DVector<f64> {
        self.states.get(t).unwrap_or(&self.x_eq)
    }

    pub fn control(&self, t: usize) -> &DVector<f64> {
        self.controls.get(t).unwrap_or(&self.u_eq)
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn controls(&self) -> &[DVector<f64>] {
        &self.controls
    }

    pub fn x_eq(&self) -> &DVector<f64> {
        &self.x_eq
    }

    pub fn u_eq(&self) -> &DVector<f64> {
        &self.u_eq
    }

    /// `max_i ‖x^r_{i+1} − f̄(x^r_i, u^r_i)‖∞`.
    pub fn dynamics_defect(&self, model: &SystemModel) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..self.horizon() {
            let next = model.step_nominal(&self.states[i], &self.controls[i])?;
            worst = worst.max((next - &self.states[i + 1]).amax());
        }
        Ok(worst)
    }

    /// CSV with header `i,x0,…,u0,…`; the final row carries `u_e`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let header: Vec<String> = std::iter::once("i".to_string())
            .chain((0..self.x_eq.len()).map(|j| format!("x{j}")))
            .chain((0..self.u_eq.len()).map(|j| format!("u{j}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for i in 0..=self.horizon() {
            let row: Vec<String> = std::iter::once(i.to_string())
                .chain(self.state(i).iter().map(|v| v.to_string()))
                .chain(self.control(i).iter().map(|v| v.to_string()))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Inverse of [`write_csv`](Self::write_csv). The equilibrium is not
    /// stored in the file and must be supplied.
    pub fn read_csv<R: BufRead>(input: R, x_eq: DVector<f64>, u_eq: DVector<f64>) -> Result<Self> {
        let (n, m) = (x_eq.len(), u_eq.len());
        let mut states = Vec::new();
        let mut controls = Vec::new();
        let mut seen_header = false;
        for (k, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = k + 1;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !seen_header {
                seen_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 1 + n + m {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} columns, found {}", 1 + n + m, fields.len()),
                });
            }
            let idx: usize = fields[0].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad index {:?}", fields[0]),
            })?;
            if idx != states.len() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected index {}, found {idx}", states.len()),
                });
            }
            let nums = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("bad number {f:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            states.push(DVector::from_column_slice(&nums[..n]));
            controls.push(DVector::from_column_slice(&nums[n..]));
        }
        // the last row's control is padding
        controls.pop();
        Self::new(states, controls, x_eq, u_eq)
    }
}

#[derive(Debug, Clone)]
pub struct GovernorConfig {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub tightening: TighteningSpec,
    pub solver: SolverSettings,
}

impl GovernorConfig {
    /// Solver defaults with the governor's 500-iteration cap.
    pub fn new(horizon: usize, q: DMatrix<f64>, r: DMatrix<f64>, tightening: TighteningSpec) -> Self {
        Self {
            horizon,
            q,
            r,
            tightening,
            solver: SolverSettings::default().with_max_iter(500),
        }
    }
}

/// Maximum allowed constraint violation or terminal error of a plan.
pub const PLAN_TOLERANCE: f64 = 1e-6;

/// Initial control guess. Two families are rolled out and the one ending
/// closest to `x_e` wins:
///
/// - the one-step least-squares control toward `x_e`, blended linearly into
///   `u_e` over the horizon;
/// - the least-squares control held for `k` steps, then `u_e`, for every
///   switching index `k` (covers slow transients such as reactor ignition,
///   where nothing happens until the input has been saturated for a while).
///
/// Falls back to constant `u_e` if no candidate rolls out finitely.
fn initial_guess(model: &SystemModel, x0: &DVector<f64>, horizon: usize, control_box: &Bounds) -> Vec<DVector<f64>> {
    let dynamics = model.dynamics().as_ref();
    let g = dynamics.input_matrix(x0);
    let rhs = model.x_eq() - dynamics.drift(x0);
    let u_ls = control_box.clamp(&crate::linalg::pinv_solve(&g, &rhs, 1e-10));
    let u_e = control_box.clamp(model.u_eq());
    let fallback = vec![u_e.clone(); horizon];
    if u_ls.iter().any(|v| !v.is_finite()) {
        return fallback;
    }
    let terminal_gap = |controls: &[DVector<f64>]| -> f64 {
        rollout(dynamics, x0, controls)
            .map(|xs| (&xs[horizon] - model.x_eq()).norm())
            .unwrap_or(f64::INFINITY)
    };

    let blended: Vec<_> = (0..horizon)
        .map(|i| {
            let s = i as f64 / horizon as f64;
            control_box.clamp(&(&u_ls * (1.0 - s) + &u_e * s))
        })
        .collect();
    let mut best = (terminal_gap(&blended), blended);
    for k in 1..horizon {
        let switched: Vec<_> = (0..horizon)
            .map(|i| if i < k { u_ls.clone() } else { u_e.clone() })
            .collect();
        let gap = terminal_gap(&switched);
        if gap < best.0 {
            best = (gap, switched);
        }
    }
    if best.0.is_finite() {
        best.1
    } else {
        fallback
    }
}

/// Steer `x0` to the equilibrium within the tightened boxes.
pub fn solve_reference(model: &SystemModel, x0: &DVector<f64>, cfg: &GovernorConfig) -> Result<ReferencePlan> {
    check_dim("initial state", model.state_dim(), x0.len())?;
    if !model.state_box().contains(x0) {
        return Err(Error::Config(format!("initial state {} lies outside X", x0.transpose())));
    }
    let boxes = tighten(model.state_box(), model.control_box(), &cfg.tightening)?;
    if !boxes.state.contains(model.x_eq()) || !boxes.control.contains(model.u_eq()) {
        return Err(Error::Config("equilibrium lies outside the tightened boxes".into()));
    }
    let x_eq = model.x_eq().clone();
    let u_eq = model.u_eq().clone();
    let spec = OcpSpec {
        dynamics: model.dynamics().as_ref(),
        x0: x0.clone(),
        state_ref: vec![x_eq.clone(); cfg.horizon],
        control_ref: vec![u_eq.clone(); cfg.horizon],
        q: cfg.q.clone(),
        r: cfg.r.clone(),
        terminal: Terminal::Equality { target: x_eq.clone() },
        control_box: boxes.control.clone(),
        state_box: Some(boxes.state.clone()),
    };
    spec.validate()?;
    let warm = initial_guess(model, x0, cfg.horizon, &boxes.control);
    let solver = OcpSolver::new(cfg.solver)?;
    let sol = solver.solve(&spec, Some(&warm))?;

    let terminal_error = (&sol.states[cfg.horizon] - &x_eq).amax();
    let max_violation = sol
        .states
        .iter()
        .map(|x| boxes.state.violation(x))
        .chain(sol.controls.iter().map(|u| boxes.control.violation(u)))
        .fold(terminal_error, f64::max);
    if !sol.converged || max_violation > PLAN_TOLERANCE {
        return Err(Error::InfeasibleGovernor(GovernorDiagnostics {
            max_violation,
            terminal_error,
            converged: sol.converged,
            rounds: sol.rounds,
            iterations: sol.iterations,
        }));
    }
    ReferencePlan::new(sol.states, sol.controls, x_eq, u_eq)
}
