//! The weight update law on its own: a scalar plant `x⁺ = a x + (u + w x)`
//! driven by a fixed input, with `u^a = K x` learning to cancel `w x`.
//!
//! ```text
//! cargo run --example scalar_adaptation
//! ```

use nalgebra::DVector;
use tubempc::adaptive::{weight_error_bound, AdaptiveState};
use tubempc::dynamics::scalar_model;

fn main() -> tubempc::Result<()> {
    let model = scalar_model(0.9, 0.7)?;
    let mut adaptive = AdaptiveState::scalar_gain(1, 1, 1.2, 0.1)?;
    let bound = weight_error_bound(model.w_true().norm(), adaptive.gamma());
    let u_m = DVector::from_element(1, 0.3);
    let mut x = DVector::from_element(1, 2.0);

    println!("{:>4} {:>12} {:>12} {:>12} {:>12}", "t", "x", "K", "V_a", "|K~|");
    for t in 0..25 {
        let phi = model.features(&x, t);
        let u = &u_m + adaptive.control(&phi)?;
        let next = model.step_true(&x, &u, t)?;
        let d = adaptive.diagnostics(&model, &x, &phi);
        println!("{t:>4} {:>12.6} {:>12.6} {:>12.3e} {:>12.3e}", x[0], adaptive.weight()[(0, 0)], d.v_a, d.k_tilde_norm);
        assert!(d.k_tilde_norm <= bound + 1e-10);
        adaptive = adaptive.update(&model, &x, &u_m, &next, &phi)?;
        x = next;
    }
    println!("true weight {}, learned {:.6}", model.w_true()[(0, 0)], -adaptive.weight()[(0, 0)]);
    Ok(())
}
