//! Finite-horizon optimal control by single shooting.
//!
//! The decision variable is the control sequence `u_0 … u_{N−1}`; states come
//! from rolling out the nominal dynamics. Control boxes are handled exactly by
//! projection, state boxes and terminal equalities by an augmented Lagrangian
//! on top of a projected quasi-Newton inner solver. Gradients come from the
//! adjoint recursion through the exact linearizations of the dynamics.

pub mod projected;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{Bounds, ControlAffine};
use crate::error::{check_dim, Error, Result};

pub use projected::{Evaluation, InnerResult, InnerSettings};

/// Curvature model for the free-set step of the inner solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curvature {
    /// Limited-memory BFGS from gradient differences.
    Lbfgs,
    /// Gauss–Newton matrix of the least-squares objective, built from the
    /// rollout sensitivities. Exact Newton for linear dynamics.
    GaussNewton,
}

impl std::fmt::Display for Curvature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lbfgs => "lbfgs",
            Self::GaussNewton => "gauss-newton",
        })
    }
}

impl std::str::FromStr for Curvature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lbfgs" => Ok(Self::Lbfgs),
            "gauss-newton" => Ok(Self::GaussNewton),
            other => Err(Error::Config(format!(
                "unknown curvature model {other:?} (expected lbfgs or gauss-newton)"
            ))),
        }
    }
}

/// How the final state enters the problem.
#[derive(Debug, Clone, PartialEq)]
pub enum Terminal {
    None,
    /// Adds `‖x_N − target‖²_weight` to the objective.
    Cost { target: DVector<f64>, weight: DMatrix<f64> },
    /// Imposes `x_N = target`.
    Equality { target: DVector<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Projected-gradient tolerance of the inner solver.
    pub tol_kkt: f64,
    /// Inner iteration cap per augmented-Lagrangian round.
    pub max_iter: usize,
    /// Number of stored curvature pairs.
    pub memory: usize,
    /// Initial penalty weight for state-box and terminal-equality terms.
    pub penalty_init: f64,
    pub penalty_growth: f64,
    /// Augmented-Lagrangian rounds, including the first.
    pub penalty_rounds: usize,
    /// Constraint violation (∞-norm) accepted as feasible.
    pub constraint_tol: f64,
    pub curvature: Curvature,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol_kkt: 1e-8,
            max_iter: 200,
            memory: 20,
            penalty_init: 1e3,
            penalty_growth: 10.0,
            penalty_rounds: 4,
            constraint_tol: 1e-6,
            curvature: Curvature::Lbfgs,
        }
    }
}

impl SolverSettings {
    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_curvature(mut self, curvature: Curvature) -> Self {
        self.curvature = curvature;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.tol_kkt > 0.0
            && self.max_iter > 0
            && self.memory > 0
            && self.penalty_init > 0.0
            && self.penalty_growth >= 1.0
            && self.penalty_rounds > 0
            && self.constraint_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid solver settings {self:?}")))
        }
    }
}

/// A tracking problem
/// `min Σ_{i<N} ‖x_i − x^r_i‖²_Q + ‖u_i − u^r_i‖²_R (+ terminal)`
/// over `u_i ∈ U`, optionally with `x_i ∈ X` for `i = 1 … N`.
#[derive(Clone)]
pub struct OcpSpec<'a> {
    pub dynamics: &'a dyn ControlAffine,
    pub x0: DVector<f64>,
    pub state_ref: Vec<DVector<f64>>,
    pub control_ref: Vec<DVector<f64>>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub terminal: Terminal,
    pub control_box: Bounds,
    pub state_box: Option<Bounds>,
}

impl<'a> OcpSpec<'a> {
    /// Regulation to constant references over `horizon` steps.
    #[allow(clippy::too_many_arguments)]
    pub fn regulate(
        dynamics: &'a dyn ControlAffine,
        x0: DVector<f64>,
        horizon: usize,
        x_ref: &DVector<f64>,
        u_ref: &DVector<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        control_box: Bounds,
    ) -> Self {
        Self {
            dynamics,
            x0,
            state_ref: vec![x_ref.clone(); horizon],
            control_ref: vec![u_ref.clone(); horizon],
            q,
            r,
            terminal: Terminal::None,
            control_box,
            state_box: None,
        }
    }

    pub fn with_terminal(mut self, terminal: Terminal) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn with_state_box(mut self, state_box: Bounds) -> Self {
        self.state_box = Some(state_box);
        self
    }

    pub fn horizon(&self) -> usize {
        self.control_ref.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.dynamics.state_dim(), self.dynamics.control_dim());
        if self.horizon() == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if self.state_ref.len() != self.horizon() {
            return Err(Error::Config(format!(
                "{} state references for horizon {}",
                self.state_ref.len(),
                self.horizon()
            )));
        }
        check_dim("initial state", n, self.x0.len())?;
        check_dim("control box", m, self.control_box.dim())?;
        for x in &self.state_ref {
            check_dim("state reference", n, x.len())?;
        }
        for u in &self.control_ref {
            check_dim("control reference", m, u.len())?;
        }
        check_square_psd("Q", &self.q, n, false)?;
        check_square_psd("R", &self.r, m, true)?;
        match &self.terminal {
            Terminal::None => {}
            Terminal::Cost { target, weight } => {
                check_dim("terminal target", n, target.len())?;
                check_square_psd("terminal weight", weight, n, true)?;
            }
            Terminal::Equality { target } => check_dim("terminal target", n, target.len())?,
        }
        if let Some(b) = &self.state_box {
            check_dim("state box", n, b.dim())?;
        }
        Ok(())
    }

    fn has_constraints(&self) -> bool {
        self.state_box.is_some() || matches!(self.terminal, Terminal::Equality { .. })
    }
}

fn check_square_psd(name: &str, m: &DMatrix<f64>, dim: usize, definite: bool) -> Result<()> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::Config(format!(
            "{name} must be {dim}×{dim}, got {}×{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::Config(format!("{name} must be symmetric")));
    }
    let (lo, _) = crate::linalg::eig_range(m);
    if (definite && lo <= 0.0) || lo < -1e-12 {
        let kind = if definite { "positive definite" } else { "positive semidefinite" };
        return Err(Error::Config(format!("{name} must be {kind}, smallest eigenvalue {lo}")));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub controls: Vec<DVector<f64>>,
    /// `x_0 … x_N` from rolling out `controls`.
    pub states: Vec<DVector<f64>>,
    /// Quadratic cost of the rollout, without penalty terms.
    pub cost: f64,
    /// Final penalized objective (equals `cost` when unconstrained).
    pub value: f64,
    pub converged: bool,
    /// Inner iterations summed over all rounds.
    pub iterations: usize,
    pub rounds: usize,
    pub kkt_residual: f64,
    /// Largest state-box or terminal-equality violation.
    pub max_violation: f64,
    pub objective_trace: Vec<f64>,
}

/// Nominal rollout `x_{i+1} = f̄(x_i, u_i)`.
pub fn rollout(
    dynamics: &dyn ControlAffine,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (i, u) in controls.iter().enumerate() {
        let next = dynamics.nominal_step(&states[i], u);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("rollout left the finite range at step {}", i + 1)));
        }
        states.push(next);
    }
    Ok(states)
}

/// Multipliers and penalty weight for the constraint terms.
#[derive(Debug, Clone)]
struct Multipliers {
    mu: f64,
    /// One per state-box inequality, `[upper; lower]` for each of `x_1 … x_N`.
    state: Vec<DVector<f64>>,
    terminal: DVector<f64>,
}

impl Multipliers {
    fn zeros(spec: &OcpSpec, mu: f64) -> Self {
        let n = spec.dynamics.state_dim();
        Self {
            mu,
            state: vec![DVector::zeros(2 * n); spec.horizon()],
            terminal: DVector::zeros(n),
        }
    }
}

/// Inequalities `h ≤ 0` for `x ∈ box`: `[x − hi; lo − x]`.
fn box_residual(b: &Bounds, x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    DVector::from_fn(2 * n, |j, _| {
        if j < n {
            x[j] - b.upper()[j]
        } else {
            b.lower()[j - n] - x[j - n]
        }
    })
}

fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    crate::linalg::quad_form(m, v)
}

/// Objective pieces for a given rollout: (quadratic cost, penalty).
fn evaluate(spec: &OcpSpec, states: &[DVector<f64>], controls: &[DVector<f64>], mult: &Multipliers) -> (f64, f64) {
    let mut cost = 0.0;
    for i in 0..spec.horizon() {
        cost += quad(&spec.q, &(&states[i] - &spec.state_ref[i]));
        cost += quad(&spec.r, &(&controls[i] - &spec.control_ref[i]));
    }
    let x_n = &states[spec.horizon()];
    let mut penalty = 0.0;
    match &spec.terminal {
        Terminal::None => {}
        Terminal::Cost { target, weight } => cost += quad(weight, &(x_n - target)),
        Terminal::Equality { target } => {
            let c = x_n - target;
            penalty += mult.terminal.dot(&c) + 0.5 * mult.mu * c.norm_squared();
        }
    }
    if let Some(b) = &spec.state_box {
        for (i, lam) in mult.state.iter().enumerate() {
            let h = box_residual(b, &states[i + 1]);
            for j in 0..h.len() {
                let shifted = (lam[j] + mult.mu * h[j]).max(0.0);
                penalty += (shifted * shifted - lam[j] * lam[j]) / (2.0 * mult.mu);
            }
        }
    }
    (cost, penalty)
}

type Jacobians = Vec<(DMatrix<f64>, DMatrix<f64>)>;

fn linearize_along(spec: &OcpSpec, states: &[DVector<f64>], controls: &[DVector<f64>]) -> Jacobians {
    (0..spec.horizon())
        .map(|i| spec.dynamics.linearize(&states[i], &controls[i]))
        .collect()
}

/// Gradient of the penalized objective by the adjoint recursion.
fn adjoint_gradient(
    spec: &OcpSpec,
    states: &[DVector<f64>],
    controls: &[DVector<f64>],
    jac: &Jacobians,
    mult: &Multipliers,
) -> DVector<f64> {
    let (n, m, big_n) = (spec.dynamics.state_dim(), spec.dynamics.control_dim(), spec.horizon());
    let box_grad = |i: usize, x: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::zeros(n);
        if let Some(b) = &spec.state_box {
            let lam = &mult.state[i - 1];
            let h = box_residual(b, x);
            for j in 0..n {
                g[j] += (lam[j] + mult.mu * h[j]).max(0.0);
                g[j] -= (lam[j + n] + mult.mu * h[j + n]).max(0.0);
            }
        }
        g
    };

    let x_n = &states[big_n];
    let mut p = box_grad(big_n, x_n);
    match &spec.terminal {
        Terminal::None => {}
        Terminal::Cost { target, weight } => p += (weight + weight.transpose()) * (x_n - target),
        Terminal::Equality { target } => p += &mult.terminal + (x_n - target) * mult.mu,
    }

    let q2 = &spec.q + spec.q.transpose();
    let r2 = &spec.r + spec.r.transpose();
    let mut grad = DVector::zeros(big_n * m);
    for i in (0..big_n).rev() {
        let (a, b) = &jac[i];
        let gu = &r2 * (&controls[i] - &spec.control_ref[i]) + b.transpose() * &p;
        grad.rows_mut(i * m, m).copy_from(&gu);
        let mut p_next = &q2 * (&states[i] - &spec.state_ref[i]) + a.transpose() * &p;
        if i > 0 {
            p_next += box_grad(i, &states[i]);
        }
        p = p_next;
    }
    grad
}

fn unflatten(z: &DVector<f64>, m: usize) -> Vec<DVector<f64>> {
    (0..z.len() / m).map(|i| z.rows(i * m, m).into_owned()).collect()
}

fn flatten(controls: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        controls.iter().map(|u| u.len()).sum(),
        controls.iter().flat_map(|u| u.iter().cloned()),
    )
}

fn violation(spec: &OcpSpec, states: &[DVector<f64>]) -> f64 {
    let mut v: f64 = 0.0;
    if let Terminal::Equality { target } = &spec.terminal {
        v = v.max((&states[spec.horizon()] - target).amax());
    }
    if let Some(b) = &spec.state_box {
        for x in &states[1..] {
            v = v.max(b.violation(x));
        }
    }
    v
}

/// Gauss–Newton matrix `Σ Sᵢᵀ Wᵢ Sᵢ + blockdiag(R + Rᵀ)` with `Sᵢ = ∂xᵢ/∂u`
/// and `Wᵢ` the curvature of the state terms at `xᵢ`.
fn gauss_newton(spec: &OcpSpec, states: &[DVector<f64>], jac: &Jacobians, mult: &Multipliers) -> DMatrix<f64> {
    let (n, m, big_n) = (spec.dynamics.state_dim(), spec.dynamics.control_dim(), spec.horizon());
    let nz = big_n * m;
    let mut h = DMatrix::zeros(nz, nz);
    let r2 = &spec.r + spec.r.transpose();
    for i in 0..big_n {
        let mut block = h.view_mut((i * m, i * m), (m, m));
        block += &r2;
    }
    let q2 = &spec.q + spec.q.transpose();
    // only the first (i + 1)·m columns of S_{i+1} are nonzero
    let mut s = DMatrix::<f64>::zeros(n, nz);
    for i in 0..big_n {
        let (a, b) = &jac[i];
        let cols = (i + 1) * m;
        let mut next = DMatrix::zeros(n, nz);
        if i > 0 {
            next.columns_mut(0, i * m).copy_from(&(a * s.columns(0, i * m)));
        }
        next.columns_mut(i * m, m).copy_from(b);
        s = next;

        let x = &states[i + 1];
        let mut w = if i + 1 < big_n { q2.clone() } else { DMatrix::zeros(n, n) };
        if i + 1 == big_n {
            match &spec.terminal {
                Terminal::None => {}
                Terminal::Cost { weight, .. } => w += weight + weight.transpose(),
                Terminal::Equality { .. } => w += DMatrix::identity(n, n) * mult.mu,
            }
        }
        if let Some(bx) = &spec.state_box {
            let lam = &mult.state[i];
            let res = box_residual(bx, x);
            for j in 0..n {
                if lam[j] + mult.mu * res[j] > 0.0 {
                    w[(j, j)] += mult.mu;
                }
                if lam[j + n] + mult.mu * res[j + n] > 0.0 {
                    w[(j, j)] += mult.mu;
                }
            }
        }
        if w.iter().all(|v| *v == 0.0) {
            continue;
        }
        let sc = s.columns(0, cols);
        let mut block = h.view_mut((0, 0), (cols, cols));
        block += sc.transpose() * &w * sc;
    }
    h
}

/// Objective and gradient of the (penalized) problem at `controls`, for
/// verification. Penalty terms use `mu` with zero multipliers.
pub fn objective_and_gradient(
    spec: &OcpSpec,
    controls: &[DVector<f64>],
    mu: f64,
) -> Result<(f64, DVector<f64>)> {
    spec.validate()?;
    let mult = Multipliers::zeros(spec, mu);
    let states = rollout(spec.dynamics, &spec.x0, controls)?;
    let (c, p) = evaluate(spec, &states, controls, &mult);
    let jac = linearize_along(spec, &states, controls);
    Ok((c + p, adjoint_gradient(spec, &states, controls, &jac, &mult)))
}

/// Largest relative error between the adjoint gradient and central finite
/// differences (step `1e-5·max(1, |u|)`) over all control coordinates.
pub fn gradient_check(spec: &OcpSpec, controls: &[DVector<f64>], mu: f64) -> Result<f64> {
    let m = spec.dynamics.control_dim();
    let (_, grad) = objective_and_gradient(spec, controls, mu)?;
    let mult = Multipliers::zeros(spec, mu);
    let z = flatten(controls);
    let value_at = |z: &DVector<f64>| -> Result<f64> {
        let u = unflatten(z, m);
        let states = rollout(spec.dynamics, &spec.x0, &u)?;
        let (c, p) = evaluate(spec, &states, &u, &mult);
        Ok(c + p)
    };
    let floor = (1e-3 * grad.amax()).max(1e-8);
    let mut worst: f64 = 0.0;
    for j in 0..z.len() {
        let h = 1e-5 * z[j].abs().max(1.0);
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += h;
        zm[j] -= h;
        let fd = (value_at(&zp)? - value_at(&zm)?) / (2.0 * h);
        let scale = fd.abs().max(grad[j].abs()).max(floor);
        worst = worst.max((fd - grad[j]).abs() / scale);
    }
    Ok(worst)
}

/// Solves [`OcpSpec`] problems, reusing its settings across calls.
#[derive(Debug, Clone)]
pub struct OcpSolver {
    settings: SolverSettings,
}

impl OcpSolver {
    pub fn new(settings: SolverSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self { settings })
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    /// Solve from `warm` (projected onto the control box), or from the
    /// control reference when no warm start is given.
    pub fn solve(&self, spec: &OcpSpec, warm: Option<&[DVector<f64>]>) -> Result<OcpSolution> {
        spec.validate()?;
        let m = spec.dynamics.control_dim();
        let big_n = spec.horizon();
        let z0 = match warm {
            Some(w) => {
                if w.len() != big_n {
                    return Err(Error::Dimension {
                        context: "warm start length",
                        expected: big_n,
                        got: w.len(),
                    });
                }
                for u in w {
                    check_dim("warm start control", m, u.len())?;
                }
                flatten(w)
            }
            None => flatten(&spec.control_ref),
        };
        let lo = DVector::from_iterator(big_n * m, (0..big_n).flat_map(|_| spec.control_box.lower().iter().cloned()));
        let hi = DVector::from_iterator(big_n * m, (0..big_n).flat_map(|_| spec.control_box.upper().iter().cloned()));

        let inner = InnerSettings {
            tol: self.settings.tol_kkt,
            max_iter: self.settings.max_iter,
            memory: self.settings.memory,
        };
        let rounds = if spec.has_constraints() { self.settings.penalty_rounds } else { 1 };
        let mut mult = Multipliers::zeros(spec, self.settings.penalty_init);
        let mut z = z0;
        let mut trace = Vec::new();
        let mut iterations = 0;
        let mut rounds_used = 0;
        let mut last: Option<InnerResult> = None;
        let mut viol = f64::INFINITY;

        for _ in 0..rounds {
            rounds_used += 1;
            let value = |z: &DVector<f64>| -> Result<f64> {
                let u = unflatten(z, m);
                match rollout(spec.dynamics, &spec.x0, &u) {
                    Ok(states) => {
                        let (c, p) = evaluate(spec, &states, &u, &mult);
                        Ok(c + p)
                    }
                    // an infeasible trial point is simply rejected by the line search
                    Err(Error::Divergence(_)) => Ok(f64::INFINITY),
                    Err(e) => Err(e),
                }
            };
            let full = |z: &DVector<f64>| -> Result<Evaluation> {
                let u = unflatten(z, m);
                let states = rollout(spec.dynamics, &spec.x0, &u)?;
                let (c, p) = evaluate(spec, &states, &u, &mult);
                let jac = linearize_along(spec, &states, &u);
                let hessian = match self.settings.curvature {
                    Curvature::Lbfgs => None,
                    Curvature::GaussNewton => Some(gauss_newton(spec, &states, &jac, &mult)),
                };
                Ok(Evaluation {
                    value: c + p,
                    gradient: adjoint_gradient(spec, &states, &u, &jac, &mult),
                    hessian,
                })
            };
            let res = projected::minimize(value, full, &z, &lo, &hi, &inner)?;
            iterations += res.iterations;
            trace.extend_from_slice(&res.trace);
            z = res.z.clone();

            let states = rollout(spec.dynamics, &spec.x0, &unflatten(&z, m))?;
            viol = violation(spec, &states);
            last = Some(res);
            if !spec.has_constraints() || viol <= self.settings.constraint_tol {
                break;
            }
            // first-order multiplier update, then stiffen the penalty
            if let Terminal::Equality { target } = &spec.terminal {
                mult.terminal += (&states[big_n] - target) * mult.mu;
            }
            if let Some(b) = &spec.state_box {
                for (i, lam) in mult.state.iter_mut().enumerate() {
                    let h = box_residual(b, &states[i + 1]);
                    for j in 0..h.len() {
                        lam[j] = (lam[j] + mult.mu * h[j]).max(0.0);
                    }
                }
            }
            mult.mu *= self.settings.penalty_growth;
        }

        let res = last.expect("at least one round");
        let controls = unflatten(&z, m);
        let states = rollout(spec.dynamics, &spec.x0, &controls)?;
        let no_pen = Multipliers::zeros(spec, 1.0);
        let (cost, _) = evaluate(spec, &states, &controls, &no_pen);
        if !spec.has_constraints() {
            viol = 0.0;
        }
        Ok(OcpSolution {
            controls,
            states,
            cost,
            value: res.value,
            converged: res.converged && viol <= self.settings.constraint_tol,
            iterations,
            rounds: rounds_used,
            kkt_residual: res.pg_norm,
            max_violation: viol,
            objective_trace: trace,
        })
    }
}
