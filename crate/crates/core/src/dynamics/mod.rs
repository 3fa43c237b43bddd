//! System models of the form `x⁺ = f(x) + g(x)(u + W φ(x, t))`.
//!
//! The controllers only ever see the nominal part `f̄(x, u) = f(x) + g(x) u`;
//! the disturbance weight `W` lives on [`SystemModel`] and is used by the
//! simulator and the diagnostics.

mod bounds;
mod cstr;
mod rk4;
mod wingrock;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

pub use bounds::Bounds;
pub use cstr::{cstr_model, CstrOde, CSTR_DT, CSTR_THETA, CSTR_U_EQ, CSTR_W, CSTR_X0, CSTR_X_EQ};
pub use rk4::{rk4_discretize, rk4_step, OdeSystem, Rk4Model};
pub use wingrock::{
    wingrock_beta, wingrock_model, wingrock_x0, WingRockFeatures, WINGROCK_A, WINGROCK_B,
    WINGROCK_U_MAX, WINGROCK_W_BAR, WINGROCK_X0_DEG, WINGROCK_X_DEG,
};

/// Points per axis used when bounding `‖g(x)‖` and `‖φ(x)‖` over the state box.
pub const GRID_POINTS_PER_AXIS: usize = 101;

/// Control-affine discrete-time dynamics.
///
/// Implementors provide the drift `f`, the input matrix `g` and the feature
/// map `φ`. The Jacobian default uses central differences; models with
/// closed-form or automatic derivatives should override [`linearize`].
///
/// [`linearize`]: ControlAffine::linearize
pub trait ControlAffine: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;

    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;

    /// The `d × m` input matrix `g(x)`.
    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// Feature vector `φ(x, t)`. Time-invariant models ignore `t`.
    fn features(&self, x: &DVector<f64>, t: usize) -> DVector<f64>;

    /// `f̄(x, u) = f(x) + g(x) u`.
    fn nominal_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.input_matrix(x) * u
    }

    /// Jacobians `(∂f̄/∂x, ∂f̄/∂u)` at `(x, u)`.
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.state_dim();
        let mut a = DMatrix::zeros(d, d);
        for i in 0..d {
            let h = 1e-6 * x[i].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let col = (self.nominal_step(&xp, u) - self.nominal_step(&xm, u)) / (2.0 * h);
            a.set_column(i, &col);
        }
        (a, self.input_matrix(x))
    }

    /// Known bound on `‖φ(x, t)‖` over `state_box`, if the model can state one.
    /// Models with time-varying features must provide it; otherwise the bound
    /// is estimated on a grid at `t = 0`.
    fn feature_bound(&self, _state_box: &Bounds) -> Option<f64> {
        None
    }
}

/// One agent: control-affine dynamics plus the hidden disturbance weight,
/// constraint boxes and equilibrium.
#[derive(Clone)]
pub struct SystemModel {
    name: String,
    dynamics: Arc<dyn ControlAffine>,
    w_true: DMatrix<f64>,
    state_box: Bounds,
    control_box: Bounds,
    x_eq: DVector<f64>,
    u_eq: DVector<f64>,
    delta_g: f64,
    delta_phi: f64,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("name", &self.name)
            .field("w_true", &self.w_true)
            .field("state_box", &self.state_box)
            .field("control_box", &self.control_box)
            .field("x_eq", &self.x_eq)
            .field("u_eq", &self.u_eq)
            .field("delta_g", &self.delta_g)
            .field("delta_phi", &self.delta_phi)
            .finish()
    }
}

impl SystemModel {
    pub fn new(
        name: impl Into<String>,
        dynamics: Arc<dyn ControlAffine>,
        w_true: DMatrix<f64>,
        state_box: Bounds,
        control_box: Bounds,
        x_eq: DVector<f64>,
        u_eq: DVector<f64>,
    ) -> Result<Self> {
        let (d, m, q) = (
            dynamics.state_dim(),
            dynamics.control_dim(),
            dynamics.feature_dim(),
        );
        check_dim("disturbance weight rows", m, w_true.nrows())?;
        check_dim("disturbance weight columns", q, w_true.ncols())?;
        check_dim("state box", d, state_box.dim())?;
        check_dim("control box", m, control_box.dim())?;
        check_dim("equilibrium state", d, x_eq.len())?;
        check_dim("equilibrium control", m, u_eq.len())?;
        if !state_box.contains(&x_eq) {
            return Err(Error::Config("equilibrium state outside the state box".into()));
        }
        if !control_box.contains(&u_eq) {
            return Err(Error::Config(
                "equilibrium control outside the control box".into(),
            ));
        }
        let (delta_g, grid_phi) = grid_bounds(dynamics.as_ref(), &state_box, GRID_POINTS_PER_AXIS);
        let delta_phi = dynamics.feature_bound(&state_box).unwrap_or(grid_phi);
        Ok(Self {
            name: name.into(),
            dynamics,
            w_true,
            state_box,
            control_box,
            x_eq,
            u_eq,
            delta_g,
            delta_phi,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dynamics(&self) -> &Arc<dyn ControlAffine> {
        &self.dynamics
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.dynamics.feature_dim()
    }

    /// Ground-truth disturbance weight. Only the simulator and diagnostics
    /// read this; controllers never do.
    pub fn w_true(&self) -> &DMatrix<f64> {
        &self.w_true
    }

    pub fn state_box(&self) -> &Bounds {
        &self.state_box
    }

    pub fn control_box(&self) -> &Bounds {
        &self.control_box
    }

    pub fn x_eq(&self) -> &DVector<f64> {
        &self.x_eq
    }

    pub fn u_eq(&self) -> &DVector<f64> {
        &self.u_eq
    }

    /// Grid estimate of `max ‖g(x)‖` over the state box (induced 2-norm).
    pub fn delta_g(&self) -> f64 {
        self.delta_g
    }

    /// Bound on `‖φ(x)‖` over the state box.
    pub fn delta_phi(&self) -> f64 {
        self.delta_phi
    }

    /// Smallest half-width of the control box: the `u_max` of
    /// `{v | ‖v − c‖∞ ≤ u_max}`, which is the usual `‖v‖∞ ≤ u_max` when the
    /// box is centred at zero.
    pub fn u_max(&self) -> f64 {
        self.control_box.half_widths().min()
    }

    /// `u_max − 2‖W‖_F δ_φ`; positive when the model has enough control
    /// authority to dominate the disturbance.
    pub fn authority_margin(&self) -> f64 {
        self.u_max() - 2.0 * self.w_true.norm() * self.delta_phi
    }

    /// Copy of the model with the disturbance weight multiplied by `scale`.
    pub fn with_disturbance_scale(&self, scale: f64) -> Self {
        let mut out = self.clone();
        out.w_true *= scale;
        out
    }

    /// Copy of the model with a different control box.
    pub fn with_control_box(&self, control_box: Bounds) -> Result<Self> {
        check_dim("control box", self.control_dim(), control_box.dim())?;
        if !control_box.contains(&self.u_eq) {
            return Err(Error::Config(
                "equilibrium control outside the control box".into(),
            ));
        }
        let mut out = self.clone();
        out.control_box = control_box;
        Ok(out)
    }

    pub fn features(&self, x: &DVector<f64>, t: usize) -> DVector<f64> {
        self.dynamics.features(x, t)
    }

    pub fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.dynamics.input_matrix(x)
    }

    /// Matched disturbance `W φ(x, t)` in control units.
    pub fn disturbance(&self, x: &DVector<f64>, t: usize) -> DVector<f64> {
        &self.w_true * self.features(x, t)
    }

    /// `f̄(x, u_m) = f(x) + g(x) u_m`.
    pub fn step_nominal(&self, x: &DVector<f64>, u_m: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("control", self.control_dim(), u_m.len())?;
        Ok(self.dynamics.nominal_step(x, u_m))
    }

    /// `f(x) + g(x)(u + W φ(x, t))`.
    pub fn step_true(&self, x: &DVector<f64>, u: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("control", self.control_dim(), u.len())?;
        let effective = u + self.disturbance(x, t);
        Ok(self.dynamics.nominal_step(x, &effective))
    }
}

/// Dense-grid maxima of `‖g(x)‖` and `‖φ(x, 0)‖` over `state_box`.
///
/// High-dimensional boxes fall back to fewer points per axis so the grid
/// stays below ~10⁵ samples. Non-finite samples are skipped.
pub fn grid_bounds(
    dynamics: &dyn ControlAffine,
    state_box: &Bounds,
    points_per_axis: usize,
) -> (f64, f64) {
    let d = state_box.dim();
    let per_axis = if d <= 2 {
        points_per_axis
    } else {
        (1e5f64.powf(1.0 / d as f64).floor() as usize).clamp(2, points_per_axis)
    };
    let mut delta_g: f64 = 0.0;
    let mut delta_phi: f64 = 0.0;
    for x in state_box.grid(per_axis) {
        let g_norm = spectral_norm(&dynamics.input_matrix(&x));
        if g_norm.is_finite() {
            delta_g = delta_g.max(g_norm);
        }
        let phi_norm = dynamics.features(&x, 0).norm();
        if phi_norm.is_finite() {
            delta_phi = delta_phi.max(phi_norm);
        }
    }
    (delta_g, delta_phi)
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.ncols() == 1 || m.nrows() == 1 {
        return m.norm();
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

type FeatureFn = dyn Fn(&DVector<f64>, usize) -> DVector<f64> + Send + Sync;

/// `x⁺ = A x + B u` with an arbitrary feature map.
pub struct LinearAffine {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    feature_dim: usize,
    features: Box<FeatureFn>,
    feature_bound: Option<f64>,
}

impl LinearAffine {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        feature_dim: usize,
        features: impl Fn(&DVector<f64>, usize) -> DVector<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        check_dim("A rows", a.ncols(), a.nrows())?;
        check_dim("B rows", a.nrows(), b.nrows())?;
        Ok(Self {
            a,
            b,
            feature_dim,
            features: Box::new(features),
            feature_bound: None,
        })
    }

    /// Declare a bound on `‖φ‖`, required when the features depend on time.
    pub fn with_feature_bound(mut self, bound: f64) -> Self {
        self.feature_bound = Some(bound);
        self
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl ControlAffine for LinearAffine {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    fn input_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }

    fn features(&self, x: &DVector<f64>, t: usize) -> DVector<f64> {
        (self.features)(x, t)
    }

    fn nominal_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn linearize(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }

    fn feature_bound(&self, _state_box: &Bounds) -> Option<f64> {
        self.feature_bound
    }
}

/// The scalar teaching model `x⁺ = a x + (u + w x)` with `φ(x) = x`,
/// state box `[-10, 10]` and control box `[-50, 50]`.
pub fn scalar_model(a: f64, w: f64) -> Result<SystemModel> {
    let dynamics = LinearAffine::new(
        DMatrix::from_element(1, 1, a),
        DMatrix::from_element(1, 1, 1.0),
        1,
        |x, _| x.clone(),
    )?;
    SystemModel::new(
        "scalar",
        Arc::new(dynamics),
        DMatrix::from_element(1, 1, w),
        Bounds::symmetric(10.0, 1)?,
        Bounds::symmetric(50.0, 1)?,
        DVector::zeros(1),
        DVector::zeros(1),
    )
}

/// Resolve a model selector: `cstr`, `wingrock:1` or `wingrock:2`.
pub fn model_by_name(name: &str) -> Result<SystemModel> {
    match name.trim() {
        "cstr" => cstr_model(),
        "wingrock:1" => wingrock_model(1),
        "wingrock:2" => wingrock_model(2),
        other => Err(Error::Config(format!("unknown model `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn scalar_true_step_is_direct_substitution() {
        // f(x) = x, g = 1, φ(x) = x, W = 1
        let model = scalar_model(1.0, 1.0).unwrap();
        let x1 = model.step_true(&dv(&[1.0]), &dv(&[0.0]), 0).unwrap();
        assert_eq!(x1[0], 2.0);
        let xn = model.step_nominal(&dv(&[1.0]), &dv(&[0.0])).unwrap();
        assert_eq!(xn[0], 1.0);
    }

    #[test]
    fn cancelling_control_recovers_unforced_nominal_step() {
        let model = wingrock_model(1).unwrap();
        let x = dv(&[0.1, -0.05]);
        let u_m = -model.disturbance(&x, 0);
        let actual = model.step_true(&x, &u_m, 0).unwrap();
        let unforced = model.step_nominal(&x, &dv(&[0.0])).unwrap();
        assert!((actual - unforced).amax() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = scalar_model(1.0, 1.0).unwrap();
        let err = model.step_true(&dv(&[1.0, 2.0]), &dv(&[0.0]), 0).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        assert!(model.step_nominal(&dv(&[1.0]), &dv(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn unknown_model_name() {
        assert!(matches!(model_by_name("pendulum"), Err(Error::Config(_))));
        assert!(model_by_name("wingrock:3").is_err());
        assert_eq!(model_by_name(" cstr ").unwrap().name(), "cstr");
    }

    #[test]
    fn default_linearization_matches_closed_form() {
        struct Quadratic;
        impl ControlAffine for Quadratic {
            fn state_dim(&self) -> usize {
                1
            }
            fn control_dim(&self) -> usize {
                1
            }
            fn feature_dim(&self) -> usize {
                1
            }
            fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
                x.map(|v| v * v)
            }
            fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_element(1, 1, 1.0 + x[0])
            }
            fn features(&self, x: &DVector<f64>, _t: usize) -> DVector<f64> {
                x.clone()
            }
        }
        let (a, b) = Quadratic.linearize(&dv(&[0.5]), &dv(&[2.0]));
        // d/dx (x² + (1 + x) u) = 2x + u
        assert!((a[(0, 0)] - 3.0).abs() < 1e-8);
        assert_eq!(b[(0, 0)], 1.5);
    }

    #[test]
    fn disturbance_scale_zero_removes_disturbance() {
        let model = wingrock_model(2).unwrap().with_disturbance_scale(0.0);
        assert_eq!(model.w_true().norm(), 0.0);
        let x = dv(&[0.2, 0.1]);
        let u = dv(&[1.0]);
        assert_eq!(
            model.step_true(&x, &u, 3).unwrap(),
            model.step_nominal(&x, &u).unwrap()
        );
    }
}
