//! Continuous stirred tank reactor with a periodic matched disturbance.
//!
//! ```text
//! ẏ = θ₁(1 − y) − θ₂ y exp(θ₃ / z)
//! ż = θ₁(θ₄ − z) + θ₂ y exp(θ₃ / z) − θ₅(z − θ₆)(u + w)
//! ```
//!
//! with `w_t = W sin(t)`, `t` the step index.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_dual::DualNum;

use crate::dynamics::{rk4_discretize, Bounds, OdeSystem, SystemModel};
use crate::error::Result;

pub const CSTR_THETA: [f64; 6] = [0.05, 300.0, -5.0, 0.3947, 0.117, 0.3816];
pub const CSTR_DT: f64 = 0.5;
pub const CSTR_X_EQ: [f64; 2] = [0.2632, 0.6519];
pub const CSTR_U_EQ: f64 = 0.7583;
pub const CSTR_X0: [f64; 2] = [0.9831, 0.3918];
pub const CSTR_W: f64 = 2.0;

#[derive(Debug, Clone, Copy)]
pub struct CstrOde {
    pub theta: [f64; 6],
}

impl Default for CstrOde {
    fn default() -> Self {
        Self { theta: CSTR_THETA }
    }
}

impl OdeSystem for CstrOde {
    fn state_dim(&self) -> usize {
        2
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn rhs<D: DualNum<Primitive = f64> + Copy>(&self, x: &[D], u: &[D]) -> Vec<D> {
        let [t1, t2, t3, t4, t5, t6] = self.theta;
        let (y, z) = (x[0], x[1]);
        // exp(θ₃/z) → 0 with every derivative as z → 0⁺ (θ₃ < 0)
        let arrhenius = if z.re() > 0.0 {
            (z.recip() * t3).exp()
        } else {
            z * 0.0
        };
        let reaction = y * arrhenius * t2;
        let dy = (-y + 1.0) * t1 - reaction;
        let dz = (-z + t4) * t1 + reaction - (z - t6) * u[0] * t5;
        vec![dy, dz]
    }
}

/// The reactor discretized with RK4 at 0.5 s, `X = [0, 2]²`, `U = [0, 2]`,
/// `W = 2`, feature `φ(x, t) = sin(t)`. The affine factorization is taken
/// about the equilibrium control, so `f̄(x_e, u_e)` is the exact RK4 step.
pub fn cstr_model() -> Result<SystemModel> {
    let discrete = rk4_discretize(CstrOde::default(), CSTR_DT)?
        .expanded_about(&[CSTR_U_EQ])?
        .with_features(
        1,
        |_, t| DVector::from_element(1, (t as f64).sin()),
        Some(1.0),
    );
    SystemModel::new(
        "cstr",
        Arc::new(discrete),
        DMatrix::from_element(1, 1, CSTR_W),
        Bounds::from_slices(&[0.0, 0.0], &[2.0, 2.0])?,
        Bounds::from_slices(&[0.0], &[2.0])?,
        DVector::from_row_slice(&CSTR_X_EQ),
        DVector::from_element(1, CSTR_U_EQ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::rk4_step;

    fn x_eq() -> DVector<f64> {
        DVector::from_row_slice(&CSTR_X_EQ)
    }

    /// Independent fine integrator: 100 RK4 substeps of Δt/100.
    fn fine_step(x: &DVector<f64>, u: f64, dt: f64) -> DVector<f64> {
        let ode = CstrOde::default();
        let mut s: Vec<f64> = x.iter().cloned().collect();
        for _ in 0..100 {
            s = rk4_step(&ode, &s, &[u], dt / 100.0);
        }
        DVector::from_vec(s)
    }

    #[test]
    fn boxes_and_equilibrium_match_benchmark() {
        let m = cstr_model().unwrap();
        assert_eq!(m.control_box().lower()[0], 0.0);
        assert_eq!(m.control_box().upper()[0], 2.0);
        assert_eq!(m.x_eq(), &x_eq());
        assert_eq!(m.u_eq()[0], 0.7583);
        assert_eq!(m.w_true()[(0, 0)], 2.0);
        assert_eq!(m.delta_phi(), 1.0);
    }

    #[test]
    fn disturbance_vanishes_at_time_zero() {
        let m = cstr_model().unwrap();
        assert_eq!(m.disturbance(&x_eq(), 0)[0], 0.0);
        assert!((m.disturbance(&x_eq(), 1)[0] - 2.0 * 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn equilibrium_is_a_fixed_point_of_both_steps() {
        let m = cstr_model().unwrap();
        let u = DVector::from_element(1, CSTR_U_EQ);
        let nominal = m.step_nominal(&x_eq(), &u).unwrap();
        assert!((nominal - x_eq()).norm() < 1e-3);
        // W φ(x, 0) = 0, so the true step coincides at t = 0
        let actual = m.step_true(&x_eq(), &u, 0).unwrap();
        assert!((actual - x_eq()).norm() < 1e-3);
    }

    #[test]
    fn affine_factorization_error_near_the_operating_point() {
        let disc = rk4_discretize(CstrOde::default(), CSTR_DT)
            .unwrap()
            .expanded_about(&[CSTR_U_EQ])
            .unwrap();
        let u = DVector::from_element(1, CSTR_U_EQ);
        assert!(disc.affine_error(&x_eq(), &u) < 1e-15);
        let near = Bounds::from_slices(&[0.1, 0.3], &[1.0, 0.8]).unwrap();
        let controls = Bounds::from_slices(&[0.0], &[2.0]).unwrap();
        let err = disc.max_affine_error(&near, &controls, 21);
        assert!(err < 0.08, "affine error {err}");
        // taking the expansion at u = 0 instead is three times worse here
        let at_zero = rk4_discretize(CstrOde::default(), CSTR_DT).unwrap();
        assert!(at_zero.max_affine_error(&near, &controls, 21) > 3.0 * err);
    }

    #[test]
    fn rk4_step_agrees_with_fine_oracle() {
        let disc = rk4_discretize(CstrOde::default(), CSTR_DT).unwrap();
        let coarse = disc.exact_step(&x_eq(), &DVector::from_element(1, CSTR_U_EQ));
        let fine = fine_step(&x_eq(), CSTR_U_EQ, CSTR_DT);
        assert!((coarse - fine).norm() <= 1e-6);
    }

    #[test]
    fn input_matrix_is_finite_on_the_whole_box() {
        let m = cstr_model().unwrap();
        for x in m.state_box().grid(11) {
            let g = m.input_matrix(&x);
            assert!(g.iter().all(|v| v.is_finite()), "g({x}) = {g}");
        }
        // the hot, concentrated corner is stiff at this step size, so δ_g over
        // the whole box is far larger than near the operating point
        assert!(m.delta_g().is_finite() && m.delta_g() > 0.0);
        let g_eq = m.input_matrix(&x_eq());
        assert!(g_eq[(1, 0)] < 0.0 && g_eq.norm() < 0.02, "g(x_e) = {g_eq}");
    }

    #[test]
    fn linearization_matches_finite_differences() {
        let disc = rk4_discretize(CstrOde::default(), CSTR_DT).unwrap();
        use crate::dynamics::ControlAffine;
        let x = DVector::from_row_slice(&[0.7, 0.5]);
        let u = DVector::from_element(1, 1.3);
        let (a, b) = disc.linearize(&x, &u);
        for i in 0..2 {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let col = (disc.nominal_step(&xp, &u) - disc.nominal_step(&xm, &u)) / (2.0 * h);
            assert!((col - a.column(i)).amax() < 1e-8);
        }
        let h = 1e-6;
        let up = DVector::from_element(1, 1.3 + h);
        let um = DVector::from_element(1, 1.3 - h);
        let col = (disc.nominal_step(&x, &up) - disc.nominal_step(&x, &um)) / (2.0 * h);
        assert!((col - b.column(0)).amax() < 1e-9);
    }
}
