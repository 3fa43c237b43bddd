//! Online reference-tracking MPC.
//!
//! At time `t` the controller solves
//!
//! ```text
//! min  Σ_{i<N} ‖x_{t+i|t} − x^r_{t+i}‖²_Q + ‖u_{t+i|t} − u^r_{t+i}‖²_R
//!      + ‖x_{t+N|t} − x^r_{t+N}‖²_{Q_f}
//! s.t. x_{t|t} = x_t,  x_{t+i+1|t} = f̄(x_{t+i|t}, u_{t+i|t}),
//!      u_{t+i|t} + u^a_t ∈ U
//! ```
//!
//! and applies the first control. There is no state or terminal constraint.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{Bounds, ControlAffine};
use crate::error::{check_dim, Result};
use crate::governor::ReferencePlan;
use crate::linalg::quad_form;
use crate::trajopt::{rollout, OcpSolver, OcpSpec, SolverSettings, Terminal};

#[derive(Debug, Clone)]
pub struct TrackingConfig {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qf: DMatrix<f64>,
    /// `U`, before the shift by the adaptive control.
    pub control_box: Bounds,
    pub solver: SolverSettings,
}

impl TrackingConfig {
    /// Solver defaults with the online 200-iteration cap.
    pub fn new(horizon: usize, q: DMatrix<f64>, r: DMatrix<f64>, qf: DMatrix<f64>, control_box: Bounds) -> Self {
        Self {
            horizon,
            q,
            r,
            qf,
            control_box,
            solver: SolverSettings::default().with_max_iter(200),
        }
    }
}

/// `‖x − x_r‖²_Q + ‖u − u_r‖²_R`.
pub fn stage_cost(
    x: &DVector<f64>,
    u: &DVector<f64>,
    x_r: &DVector<f64>,
    u_r: &DVector<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> f64 {
    quad_form(q, &(x - x_r)) + quad_form(r, &(u - u_r))
}

#[derive(Debug, Clone)]
pub struct TrackingSolution {
    /// First control `u_{t|t}`.
    pub u_m: DVector<f64>,
    pub controls: Vec<DVector<f64>>,
    /// Predicted states `x_{t|t} … x_{t+N|t}`.
    pub states: Vec<DVector<f64>>,
    pub v_m: f64,
    pub predicted_next: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

/// Previous solution advanced one step, last control repeated.
pub fn shift_warm_start(previous: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut next: Vec<_> = previous.iter().skip(1).cloned().collect();
    if let Some(last) = previous.last() {
        next.push(last.clone());
    }
    next
}

/// Move `v` toward the interior by whole ulps until `v + offset` lands in
/// `[lo, hi]` under floating-point addition.
fn fit_sum(v: f64, offset: f64, lo: f64, hi: f64) -> f64 {
    let mut v = v;
    for _ in 0..8 {
        let total = v + offset;
        if total > hi {
            v = v.next_down();
        } else if total < lo {
            v = v.next_up();
        } else {
            break;
        }
    }
    v
}

/// One tracking solve. `warm` is used as given (after projection); pass the
/// shifted previous solution for receding-horizon operation.
pub fn solve_tracking(
    dynamics: &dyn ControlAffine,
    x_t: &DVector<f64>,
    t: usize,
    plan: &ReferencePlan,
    u_a: &DVector<f64>,
    cfg: &TrackingConfig,
    warm: Option<&[DVector<f64>]>,
) -> Result<TrackingSolution> {
    check_dim("adaptive control", dynamics.control_dim(), u_a.len())?;
    let n = cfg.horizon;
    let shifted = cfg.control_box.shifted_by(u_a)?;
    let spec = OcpSpec {
        dynamics,
        x0: x_t.clone(),
        state_ref: (t..t + n).map(|i| plan.state(i).clone()).collect(),
        control_ref: (t..t + n).map(|i| plan.control(i).clone()).collect(),
        q: cfg.q.clone(),
        r: cfg.r.clone(),
        terminal: Terminal::Cost {
            target: plan.state(t + n).clone(),
            weight: cfg.qf.clone(),
        },
        control_box: shifted.clone(),
        state_box: None,
    };
    let solver = OcpSolver::new(cfg.solver)?;
    let sol = solver.solve(&spec, warm)?;

    let (lo, hi) = (cfg.control_box.lower(), cfg.control_box.upper());
    let controls: Vec<DVector<f64>> = sol
        .controls
        .iter()
        .map(|u| DVector::from_fn(u.len(), |j, _| fit_sum(u[j], u_a[j], lo[j], hi[j])))
        .collect();
    let (states, v_m) = if controls == sol.controls {
        (sol.states, sol.cost)
    } else {
        let states = rollout(dynamics, x_t, &controls)?;
        let v = value_of(&spec, &states, &controls);
        (states, v)
    };
    Ok(TrackingSolution {
        u_m: controls[0].clone(),
        predicted_next: states[1].clone(),
        controls,
        states,
        v_m,
        iterations: sol.iterations,
        converged: sol.converged,
        kkt_residual: sol.kkt_residual,
    })
}

fn value_of(spec: &OcpSpec, states: &[DVector<f64>], controls: &[DVector<f64>]) -> f64 {
    let mut v = 0.0;
    for i in 0..spec.horizon() {
        v += stage_cost(&states[i], &controls[i], &spec.state_ref[i], &spec.control_ref[i], &spec.q, &spec.r);
    }
    if let Terminal::Cost { target, weight } = &spec.terminal {
        v += quad_form(weight, &(&states[spec.horizon()] - target));
    }
    v
}

/// `V_m(x_t)`: the optimal tracking cost with `u^a = 0`, solved from the
/// reference controls.
pub fn value_function(
    dynamics: &dyn ControlAffine,
    x_t: &DVector<f64>,
    t: usize,
    plan: &ReferencePlan,
    cfg: &TrackingConfig,
) -> Result<f64> {
    let u_a = DVector::zeros(dynamics.control_dim());
    Ok(solve_tracking(dynamics, x_t, t, plan, &u_a, cfg, None)?.v_m)
}

/// Receding-horizon controller for one agent; keeps its own warm start.
#[derive(Debug, Clone)]
pub struct TrackingMpc {
    cfg: TrackingConfig,
    warm: Option<Vec<DVector<f64>>>,
}

impl TrackingMpc {
    pub fn new(cfg: TrackingConfig) -> Self {
        Self { cfg, warm: None }
    }

    pub fn config(&self) -> &TrackingConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn step(
        &mut self,
        dynamics: &dyn ControlAffine,
        x_t: &DVector<f64>,
        t: usize,
        plan: &ReferencePlan,
        u_a: &DVector<f64>,
    ) -> Result<TrackingSolution> {
        let sol = solve_tracking(dynamics, x_t, t, plan, u_a, &self.cfg, self.warm.as_deref())?;
        self.warm = Some(shift_warm_start(&sol.controls));
        Ok(sol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{scalar_model, wingrock_model, wingrock_x0, LinearAffine};
    use crate::governor::{solve_reference, GovernorConfig, TighteningSpec};
    use crate::linalg::eig_range;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn m1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn stage_cost_examples() {
        assert_eq!(stage_cost(&v1(0.3), &v1(-0.2), &v1(0.3), &v1(-0.2), &m1(1.0), &m1(1.0)), 0.0);
        assert_eq!(stage_cost(&v1(1.0), &v1(1.0), &v1(0.0), &v1(0.0), &m1(1.0), &m1(1.0)), 2.0);
        let q = DMatrix::identity(2, 2) * 0.5;
        let x = DVector::from_row_slice(&[1.0, 0.0]);
        assert_eq!(stage_cost(&x, &v1(1.0), &DVector::zeros(2), &v1(0.0), &q, &m1(0.5)), 1.0);
    }

    #[test]
    fn shifted_box_clips_the_scalar_optimum() {
        // x⁺ = x + u, x₀ = 1, N = 1, Q = R = Q_f = 1; unconstrained u* = −0.5.
        // With U = [−0.3, 0.3] and u^a = 0.2 the box for u_m is [−0.5, 0.1].
        let dynamics = LinearAffine::new(m1(1.0), m1(1.0), 1, |x, _| x.clone()).unwrap();
        let plan = ReferencePlan::at_equilibrium(1, v1(0.0), v1(0.0)).unwrap();
        let cfg = TrackingConfig::new(1, m1(1.0), m1(1.0), m1(1.0), Bounds::symmetric(0.3, 1).unwrap());
        let sol = solve_tracking(&dynamics, &v1(1.0), 0, &plan, &v1(0.2), &cfg, None).unwrap();
        assert_eq!(sol.u_m[0], -0.5);
        assert!((sol.u_m[0] + 0.2).abs() <= 0.3);

        // with u^a = 0.1 the box is [−0.4, 0.2] and the lower bound is active
        let sol = solve_tracking(&dynamics, &v1(1.0), 0, &plan, &v1(0.1), &cfg, None).unwrap();
        assert!(sol.u_m[0] + 0.1 >= -0.3);
        assert!((sol.u_m[0] + 0.4).abs() < 1e-12, "{}", sol.u_m[0]);
    }

    #[test]
    fn total_control_lands_in_the_box_exactly() {
        assert!(fit_sum(-0.1, 0.7, 0.0, 0.6) + 0.7 <= 0.6);
        let v = fit_sum(0.3 - 0.1, 0.1, -1.0, 0.3);
        assert!(v + 0.1 <= 0.3);
    }

    #[test]
    fn reference_attains_zero_cost() {
        let model = wingrock_model(1).unwrap();
        let gov = GovernorConfig::new(100, DMatrix::identity(2, 2), m1(1.0), TighteningSpec::none(2, 1));
        let plan = solve_reference(&model, &wingrock_x0(1).unwrap(), &gov).unwrap();
        let cfg = TrackingConfig::new(20, DMatrix::identity(2, 2), m1(1.0), DMatrix::identity(2, 2) * 1e3, model.control_box().clone());
        for t in [0, 7, 85, 150] {
            let sol = solve_tracking(model.dynamics().as_ref(), plan.state(t), t, &plan, &v1(0.0), &cfg, None).unwrap();
            assert!(sol.v_m <= 1e-8, "t={t} V={}", sol.v_m);
            assert!((&sol.u_m - plan.control(t)).amax() <= 1e-5);
        }
    }

    #[test]
    fn first_wingrock_control_is_admissible() {
        let model = wingrock_model(1).unwrap();
        let x0 = wingrock_x0(1).unwrap();
        let gov = GovernorConfig::new(100, DMatrix::identity(2, 2), m1(1.0), TighteningSpec::none(2, 1));
        let plan = solve_reference(&model, &x0, &gov).unwrap();
        let cfg = TrackingConfig::new(20, DMatrix::identity(2, 2), m1(1.0), DMatrix::identity(2, 2) * 1e3, model.control_box().clone());
        let u_a = v1(0.7);
        let sol = solve_tracking(model.dynamics().as_ref(), &x0, 0, &plan, &u_a, &cfg, None).unwrap();
        assert!((&sol.u_m + &u_a).amax() <= 60.0);
        for u in &sol.controls {
            assert!(model.control_box().contains(&(u + &u_a)));
        }
    }

    #[test]
    fn value_is_bounded_below_by_the_first_stage() {
        let model = scalar_model(1.1, 0.0).unwrap();
        let plan = ReferencePlan::at_equilibrium(5, v1(0.0), v1(0.0)).unwrap();
        let cfg = TrackingConfig::new(5, m1(2.0), m1(0.1), m1(10.0), model.control_box().clone());
        let (lmin, _) = eig_range(&cfg.q);
        for x in [-3.0, -0.4, 0.0, 1.7, 8.0] {
            let v = value_function(model.dynamics().as_ref(), &v1(x), 0, &plan, &cfg).unwrap();
            assert!(v >= lmin * x * x - 1e-12);
        }
    }

    /// Batch least-squares oracle for the unconstrained linear problem:
    /// stack the predictions as `x = Φ x₀ + Γ u` and minimize directly.
    fn lq_oracle(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, qf: &DMatrix<f64>, n: usize, x0: &DVector<f64>) -> f64 {
        let (d, m) = (a.nrows(), b.ncols());
        let mut phi = DMatrix::zeros(d * (n + 1), d);
        let mut gam = DMatrix::zeros(d * (n + 1), m * n);
        let mut ak = DMatrix::identity(d, d);
        for k in 0..=n {
            phi.view_mut((k * d, 0), (d, d)).copy_from(&ak);
            ak = a * ak;
        }
        for k in 1..=n {
            for j in 0..k {
                let mut blk = b.clone();
                for _ in 0..(k - 1 - j) {
                    blk = a * blk;
                }
                gam.view_mut((k * d, j * m), (d, m)).copy_from(&blk);
            }
        }
        let mut wq = DMatrix::zeros(d * (n + 1), d * (n + 1));
        for k in 0..n {
            wq.view_mut((k * d, k * d), (d, d)).copy_from(q);
        }
        wq.view_mut((n * d, n * d), (d, d)).copy_from(qf);
        let mut wr = DMatrix::zeros(m * n, m * n);
        for k in 0..n {
            wr.view_mut((k * m, k * m), (m, m)).copy_from(r);
        }
        let h = gam.transpose() * &wq * &gam + wr;
        let lin = gam.transpose() * &wq * (&phi * x0);
        let u = h.clone().cholesky().unwrap().solve(&(-&lin));
        let x = &phi * x0 + &gam * &u;
        quad_form(&wq, &x) + quad_form(&(h - gam.transpose() * &wq * &gam), &u)
    }

    #[test]
    fn linear_value_is_quadratic_and_matches_batch_oracle() {
        let model = wingrock_model(1).unwrap();
        let plan = ReferencePlan::at_equilibrium(20, DVector::zeros(2), v1(0.0)).unwrap();
        let cfg = TrackingConfig::new(20, DMatrix::identity(2, 2), m1(1.0), DMatrix::identity(2, 2) * 1e3, model.control_box().clone());
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.05, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.05]);
        let v = DVector::from_row_slice(&[0.02, -0.01]);
        let mut ratios = Vec::new();
        for alpha in [0.5, 1.0, 2.0] {
            let x = &v * alpha;
            let vm = value_function(model.dynamics().as_ref(), &x, 0, &plan, &cfg).unwrap();
            let oracle = lq_oracle(&a, &b, &cfg.q, &cfg.r, &cfg.qf, 20, &x);
            assert!((vm - oracle).abs() <= 1e-6 * oracle, "V={vm} oracle={oracle}");
            ratios.push(vm / (alpha * alpha));
        }
        for r in &ratios {
            assert!((r - ratios[0]).abs() <= 1e-6 * ratios[0], "{ratios:?}");
        }
    }

    #[test]
    fn warm_start_shifts_and_repeats() {
        let prev = vec![v1(1.0), v1(2.0), v1(3.0)];
        assert_eq!(shift_warm_start(&prev), vec![v1(2.0), v1(3.0), v1(3.0)]);
    }
}
