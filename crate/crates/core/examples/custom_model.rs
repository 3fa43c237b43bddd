//! Bringing your own plant: a damped double integrator with a matched
//! disturbance `w = W [x₁, 1]`, run through the governor, the tracking MPC
//! and the adaptive layer.
//!
//! ```text
//! cargo run --release --example custom_model
//! ```

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use tubempc::dynamics::{Bounds, LinearAffine, SystemModel};
use tubempc::governor::{solve_reference, GovernorConfig, TighteningSpec};
use tubempc::mpc::TrackingConfig;
use tubempc::orchestrator::{check_invariants, run_closed_loop, LoopConfig};

fn main() -> tubempc::Result<()> {
    let dt = 0.1;
    let a = DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0 - 0.1 * dt]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, dt]);
    let dynamics = LinearAffine::new(a, b, 2, |x, _| DVector::from_row_slice(&[x[0], 1.0]))?.with_feature_bound(5.0_f64.hypot(1.0));
    let model = SystemModel::new(
        "double-integrator",
        Arc::new(dynamics),
        DMatrix::from_row_slice(1, 2, &[0.8, -0.3]),
        Bounds::symmetric(5.0, 2)?,
        Bounds::symmetric(10.0, 1)?,
        DVector::zeros(2),
        DVector::zeros(1),
    )?;

    let x0 = DVector::from_row_slice(&[2.0, 0.0]);
    let tightening = TighteningSpec::fraction_of_half_widths(model.state_box(), model.control_box(), 0.05, 0.0);
    let gov = GovernorConfig::new(60, DMatrix::identity(2, 2), DMatrix::identity(1, 1) * 0.1, tightening);
    let plan = solve_reference(&model, &x0, &gov)?;

    let tracking = TrackingConfig::new(
        15,
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1) * 0.1,
        DMatrix::identity(2, 2) * 100.0,
        model.control_box().clone(),
    );
    let cfg = LoopConfig::new(tracking, DMatrix::identity(1, 1), 0.5, true, 150);
    let log = run_closed_loop(&model, &plan, &cfg)?;
    for r in log.rows.iter().step_by(15) {
        println!("t={:<4} x=({:+.4}, {:+.4}) |K~|={:.3e} residual={:.3e}", r.t, r.x[0], r.x[1], r.k_tilde_norm, r.residual);
    }
    print!("{}", check_invariants(&log, &model, &plan, &cfg).to_text());
    Ok(())
}
