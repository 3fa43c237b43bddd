use nalgebra::{DMatrix, DVector};
use num_dual::{Dual64, DualNum, HyperDual64};

use crate::dynamics::{Bounds, ControlAffine};
use crate::error::{Error, Result};

/// Continuous-time right-hand side `ẋ = F(x, u)`, generic over dual numbers
/// so the discretization can be differentiated exactly.
pub trait OdeSystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn rhs<D: DualNum<Primitive = f64> + Copy>(&self, x: &[D], u: &[D]) -> Vec<D>;
}

/// One classical Runge–Kutta step with zero-order hold on `u`.
pub fn rk4_step<O, D>(ode: &O, x: &[D], u: &[D], dt: f64) -> Vec<D>
where
    O: OdeSystem + ?Sized,
    D: DualNum<Primitive = f64> + Copy,
{
    let axpy = |base: &[D], k: &[D], h: f64| -> Vec<D> {
        base.iter().zip(k).map(|(b, k)| *b + *k * h).collect()
    };
    let k1 = ode.rhs(x, u);
    let k2 = ode.rhs(&axpy(x, &k1, 0.5 * dt), u);
    let k3 = ode.rhs(&axpy(x, &k2, 0.5 * dt), u);
    let k4 = ode.rhs(&axpy(x, &k3, dt), u);
    (0..x.len())
        .map(|i| x[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0))
        .collect()
}

/// RK4 discretization of an ODE, factored into control-affine form.
///
/// With `Φ(x, u)` the RK4 map and `u₀` the expansion control (zero unless set
/// with [`Rk4Model::expanded_about`]), the input matrix is the exact
/// sensitivity `g(x) = ∂Φ/∂u (x, u₀)` and the drift is
/// `f(x) = Φ(x, u₀) − g(x) u₀`. Whatever part of `Φ` is not affine in `u` is
/// dropped; [`Rk4Model::affine_error`] measures it.
type FeatureFn = Box<dyn Fn(&DVector<f64>, usize) -> DVector<f64> + Send + Sync>;

pub struct Rk4Model<O> {
    ode: O,
    dt: f64,
    u0: Vec<f64>,
    feature_dim: usize,
    features: FeatureFn,
    feature_bound: Option<f64>,
}

/// Discretize `ode` with step `dt`. Features default to the empty vector;
/// attach them with [`Rk4Model::with_features`].
pub fn rk4_discretize<O: OdeSystem>(ode: O, dt: f64) -> Result<Rk4Model<O>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("sampling interval must be positive, got {dt}")));
    }
    let m = ode.control_dim();
    Ok(Rk4Model {
        ode,
        dt,
        u0: vec![0.0; m],
        feature_dim: 0,
        features: Box::new(|_, _| DVector::zeros(0)),
        feature_bound: None,
    })
}

impl<O: OdeSystem> Rk4Model<O> {
    /// Take the affine factorization about `u0` instead of zero.
    pub fn expanded_about(mut self, u0: &[f64]) -> Result<Self> {
        crate::error::check_dim("expansion control", self.ode.control_dim(), u0.len())?;
        self.u0 = u0.to_vec();
        Ok(self)
    }

    pub fn with_features(
        mut self,
        feature_dim: usize,
        features: impl Fn(&DVector<f64>, usize) -> DVector<f64> + Send + Sync + 'static,
        bound: Option<f64>,
    ) -> Self {
        self.feature_dim = feature_dim;
        self.features = Box::new(features);
        self.feature_bound = bound;
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn ode(&self) -> &O {
        &self.ode
    }

    /// The full (non-affine) RK4 step `Φ(x, u)`.
    pub fn exact_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(rk4_step(&self.ode, x.as_slice(), u.as_slice(), self.dt))
    }

    /// `‖Φ(x, u) − f̄(x, u)‖∞`.
    pub fn affine_error(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (self.exact_step(x, u) - self.nominal_step(x, u)).amax()
    }

    /// Largest [`affine_error`](Self::affine_error) over a grid of
    /// `state_box × control_box`.
    pub fn max_affine_error(&self, state_box: &Bounds, control_box: &Bounds, per_axis: usize) -> f64 {
        let controls: Vec<_> = control_box.grid(per_axis).collect();
        state_box
            .grid(per_axis)
            .flat_map(|x| controls.iter().map(move |u| (x.clone(), u)))
            .map(|(x, u)| self.affine_error(&x, u))
            .filter(|e| e.is_finite())
            .fold(0.0, f64::max)
    }
}

impl<O: OdeSystem> ControlAffine for Rk4Model<O> {
    fn state_dim(&self) -> usize {
        self.ode.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.ode.control_dim()
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let at_u0 = DVector::from_vec(rk4_step(&self.ode, x.as_slice(), &self.u0, self.dt));
        if self.u0.iter().all(|v| *v == 0.0) {
            return at_u0;
        }
        at_u0 - self.input_matrix(x) * DVector::from_column_slice(&self.u0)
    }

    fn input_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (d, m) = (self.state_dim(), self.control_dim());
        let xd: Vec<Dual64> = x.iter().map(|v| Dual64::from_re(*v)).collect();
        let mut g = DMatrix::zeros(d, m);
        for j in 0..m {
            let ud: Vec<Dual64> = (0..m)
                .map(|k| Dual64::new(self.u0[k], if k == j { 1.0 } else { 0.0 }))
                .collect();
            let out = rk4_step(&self.ode, &xd, &ud, self.dt);
            for i in 0..d {
                g[(i, j)] = out[i].eps;
            }
        }
        g
    }

    fn features(&self, x: &DVector<f64>, t: usize) -> DVector<f64> {
        (self.features)(x, t)
    }

    fn nominal_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        // Φ(x, u₀) + g(x)(u − u₀) in one pass: the directional derivative
        // along u − u₀ is exactly g(x)(u − u₀).
        let xd: Vec<Dual64> = x.iter().map(|v| Dual64::from_re(*v)).collect();
        let ud: Vec<Dual64> = u
            .iter()
            .zip(&self.u0)
            .map(|(v, v0)| Dual64::new(*v0, *v - *v0))
            .collect();
        let out = rk4_step(&self.ode, &xd, &ud, self.dt);
        DVector::from_iterator(out.len(), out.iter().map(|o| o.re + o.eps))
    }

    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.state_dim();
        let ud: Vec<HyperDual64> = u
            .iter()
            .zip(&self.u0)
            .map(|(v, v0)| HyperDual64::new(*v0, 0.0, *v - *v0, 0.0))
            .collect();
        let mut a = DMatrix::zeros(d, d);
        for i in 0..d {
            let xd: Vec<HyperDual64> = x
                .iter()
                .enumerate()
                .map(|(k, v)| HyperDual64::new(*v, if k == i { 1.0 } else { 0.0 }, 0.0, 0.0))
                .collect();
            let out = rk4_step(&self.ode, &xd, &ud, self.dt);
            // eps1: ∂Φ(x, u₀)/∂x_i, eps1eps2: ∂(g(x)(u − u₀))/∂x_i
            for r in 0..d {
                a[(r, i)] = out[r].eps1 + out[r].eps1eps2;
            }
        }
        (a, self.input_matrix(x))
    }

    fn feature_bound(&self, _state_box: &Bounds) -> Option<f64> {
        self.feature_bound
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Frozen;
    impl OdeSystem for Frozen {
        fn state_dim(&self) -> usize {
            2
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn rhs<D: DualNum<Primitive = f64> + Copy>(&self, x: &[D], _u: &[D]) -> Vec<D> {
            vec![x[0] * 0.0; 2]
        }
    }

    struct Integrator;
    impl OdeSystem for Integrator {
        fn state_dim(&self) -> usize {
            1
        }
        fn control_dim(&self) -> usize {
            1
        }
        fn rhs<D: DualNum<Primitive = f64> + Copy>(&self, _x: &[D], u: &[D]) -> Vec<D> {
            vec![u[0]]
        }
    }

    #[test]
    fn zero_vector_field_is_identity() {
        for dt in [0.01, 0.5, 3.0] {
            let m = rk4_discretize(Frozen, dt).unwrap();
            let x = DVector::from_row_slice(&[0.3, -1.2]);
            let u = DVector::from_row_slice(&[7.0]);
            assert_eq!(m.nominal_step(&x, &u), x);
        }
    }

    #[test]
    fn pure_integrator_is_exact() {
        let m = rk4_discretize(Integrator, 0.5).unwrap();
        let x = DVector::from_row_slice(&[1.25]);
        let u = DVector::from_row_slice(&[-2.0]);
        assert!((m.nominal_step(&x, &u)[0] - 0.25).abs() < 1e-15);
        assert_eq!(m.input_matrix(&x)[(0, 0)], 0.5);
        assert_eq!(m.affine_error(&x, &u), 0.0);
    }

    #[test]
    fn nonpositive_step_rejected() {
        assert!(rk4_discretize(Integrator, 0.0).is_err());
        assert!(rk4_discretize(Integrator, -0.1).is_err());
        assert!(rk4_discretize(Integrator, f64::NAN).is_err());
    }
}
