//! Two aircraft with wing-rock dynamics, discretized at 0.05 s.
//!
//! State `[roll angle, roll rate]` in radians. Features are the saturated
//! regressor `sat(β(x))` with `β(x) = [x₁, x₂, |x₁|x₂, |x₂|x₁, x₁³]`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{Bounds, LinearAffine, SystemModel};
use crate::error::{Error, Result};

pub const WINGROCK_A: [[f64; 2]; 2] = [[1.0, 0.05], [0.0, 1.0]];
pub const WINGROCK_B: [f64; 2] = [0.0, 0.05];
pub const WINGROCK_W_BAR: [f64; 5] = [0.1414, 0.5504, -0.0624, 0.0095, 0.0215];

/// State box half-widths in degrees (roll angle, roll rate).
pub const WINGROCK_X_DEG: [f64; 2] = [30.0, 15.0];
pub const WINGROCK_U_MAX: f64 = 60.0;

/// Initial conditions of the two agents in degrees.
pub const WINGROCK_X0_DEG: [[f64; 2]; 2] = [[-10.0, 6.0], [10.0, -10.0]];

pub fn wingrock_beta(x: &DVector<f64>) -> DVector<f64> {
    let (x1, x2) = (x[0], x[1]);
    DVector::from_row_slice(&[x1, x2, x1.abs() * x2, x2.abs() * x1, x1 * x1 * x1])
}

/// Componentwise saturation of [`wingrock_beta`].
#[derive(Debug, Clone, Copy)]
pub struct WingRockFeatures {
    pub threshold: f64,
}

impl WingRockFeatures {
    /// Threshold `0.1 · max_{x ∈ X} ‖β(x)‖∞`, maximized on a grid of `state_box`.
    pub fn for_box(state_box: &Bounds, per_axis: usize) -> Self {
        let peak = state_box
            .grid(per_axis)
            .map(|x| wingrock_beta(&x).amax())
            .fold(0.0, f64::max);
        Self {
            threshold: 0.1 * peak,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        wingrock_beta(x).map(|b| b.clamp(-self.threshold, self.threshold))
    }
}

/// Agent 1 carries `W = 5 W̄`, agent 2 carries `W = 6 W̄`.
pub fn wingrock_model(agent: usize) -> Result<SystemModel> {
    let scale = match agent {
        1 => 5.0,
        2 => 6.0,
        _ => return Err(Error::Config(format!("wing-rock agent must be 1 or 2, got {agent}"))),
    };
    let state_box = Bounds::from_slices(
        &[-WINGROCK_X_DEG[0].to_radians(), -WINGROCK_X_DEG[1].to_radians()],
        &[WINGROCK_X_DEG[0].to_radians(), WINGROCK_X_DEG[1].to_radians()],
    )?;
    let features = WingRockFeatures::for_box(&state_box, super::GRID_POINTS_PER_AXIS);
    let a = DMatrix::from_row_slice(2, 2, &[WINGROCK_A[0][0], WINGROCK_A[0][1], WINGROCK_A[1][0], WINGROCK_A[1][1]]);
    let b = DMatrix::from_column_slice(2, 1, &WINGROCK_B);
    let dynamics = LinearAffine::new(a, b, 5, move |x, _| features.eval(x))?;
    let w = DMatrix::from_row_slice(1, 5, &WINGROCK_W_BAR) * scale;
    let model = SystemModel::new(
        format!("wingrock:{agent}"),
        Arc::new(dynamics),
        w,
        state_box,
        Bounds::symmetric(WINGROCK_U_MAX, 1)?,
        DVector::zeros(2),
        DVector::zeros(1),
    )?;
    if model.authority_margin() <= 0.0 {
        return Err(Error::Config(format!(
            "wing-rock agent {agent} lacks control authority (margin {})",
            model.authority_margin()
        )));
    }
    Ok(model)
}

/// Initial condition of `agent` converted to radians.
pub fn wingrock_x0(agent: usize) -> Result<DVector<f64>> {
    match agent {
        1 | 2 => {
            let deg = WINGROCK_X0_DEG[agent - 1];
            Ok(DVector::from_row_slice(&[deg[0].to_radians(), deg[1].to_radians()]))
        }
        _ => Err(Error::Config(format!("wing-rock agent must be 1 or 2, got {agent}"))),
    }
}
