//! Discrete-time adaptive disturbance rejection.
//!
//! Each agent learns a weight `K` with the normalized update
//!
//! ```text
//! K⁺ = K − Γ g(x)† (x⁺ − f̄(x, u^m)) φ(x)ᵀ / (ε + ‖φ(x)‖²)
//! ```
//!
//! and applies `u^a = K φ(x)`. With `K̃ = K + W` and `ũ = K̃ φ(x)` the same
//! law reads `K̃⁺ = K̃ − Γ ũ φᵀ / (ε + ‖φ‖²)`, from which
//! `V_a = tr(K̃ᵀ Γ⁻¹ K̃)` is non-increasing whenever `λ_max(Γ) < 2`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{spectral_norm, SystemModel};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{eig_range, pinv_solve, quad_form};

/// `‖g(x)‖` at or below this is treated as `g(x) = 0` and the weight is frozen.
pub const DEFAULT_G_ZERO_TOL: f64 = 1e-9;

/// Singular values below `PINV_REL_TOL · σ_max` are dropped in `g(x)†`.
pub const PINV_REL_TOL: f64 = 1e-10;

/// Learned weight plus the gains of the update law.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    k: DMatrix<f64>,
    gamma: DMatrix<f64>,
    gamma_inv: DMatrix<f64>,
    epsilon: f64,
    g_zero_tol: f64,
}

impl AdaptiveState {
    /// Zero weight of shape `m × q`. `gamma` must be `m × m`, symmetric, with
    /// every eigenvalue in `(0, 2)`.
    pub fn new(m: usize, q: usize, gamma: DMatrix<f64>, epsilon: f64) -> Result<Self> {
        check_dim("gamma rows", m, gamma.nrows())?;
        check_dim("gamma columns", m, gamma.ncols())?;
        let asym = (&gamma - gamma.transpose()).amax();
        if asym > 1e-12 * gamma.amax().max(1.0) {
            return Err(Error::Config(format!("gamma is not symmetric (asymmetry {asym:e})")));
        }
        let (lo, hi) = eig_range(&gamma);
        if !(lo > 0.0 && hi < 2.0) {
            return Err(Error::Config(format!(
                "gamma eigenvalues must lie in (0, 2), got [{lo}, {hi}]"
            )));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        let gamma_inv = gamma
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Config("gamma is singular".into()))?;
        Ok(Self {
            k: DMatrix::zeros(m, q),
            gamma,
            gamma_inv,
            epsilon,
            g_zero_tol: DEFAULT_G_ZERO_TOL,
        })
    }

    /// `Γ = γ I`.
    pub fn scalar_gain(m: usize, q: usize, gamma: f64, epsilon: f64) -> Result<Self> {
        Self::new(m, q, DMatrix::identity(m, m) * gamma, epsilon)
    }

    pub fn with_g_zero_tol(mut self, tol: f64) -> Self {
        self.g_zero_tol = tol;
        self
    }

    /// Replace the weight (tests and fault injection).
    pub fn with_weight(mut self, k: DMatrix<f64>) -> Result<Self> {
        check_dim("weight rows", self.k.nrows(), k.nrows())?;
        check_dim("weight columns", self.k.ncols(), k.ncols())?;
        self.k = k;
        Ok(self)
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn gamma_inv(&self) -> &DMatrix<f64> {
        &self.gamma_inv
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn g_zero_tol(&self) -> f64 {
        self.g_zero_tol
    }

    /// `u^a = K φ`.
    pub fn control(&self, feature: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("feature", self.k.ncols(), feature.len())?;
        Ok(&self.k * feature)
    }

    /// One step of the weight update law from a measured transition
    /// `x_t → x_next` under MPC component `u_m`.
    pub fn update(
        &self,
        model: &SystemModel,
        x_t: &DVector<f64>,
        u_m: &DVector<f64>,
        x_next: &DVector<f64>,
        feature: &DVector<f64>,
    ) -> Result<Self> {
        check_dim("feature", self.k.ncols(), feature.len())?;
        check_dim("successor state", model.state_dim(), x_next.len())?;
        let g = model.input_matrix(x_t);
        if spectral_norm(&g) <= self.g_zero_tol {
            return Ok(self.clone());
        }
        let residual = x_next - model.step_nominal(x_t, u_m)?;
        let u_tilde_est = pinv_solve(&g, &residual, PINV_REL_TOL);
        let denom = self.epsilon + feature.norm_squared();
        let mut next = self.clone();
        next.k -= &self.gamma * u_tilde_est * feature.transpose() / denom;
        Ok(next)
    }

    /// `V_a = tr(K̃ᵀ Γ⁻¹ K̃)` with `K̃ = K + W`.
    pub fn lyapunov(&self, w_true: &DMatrix<f64>) -> f64 {
        adaptive_lyapunov(&(&self.k + w_true), &self.gamma_inv)
    }

    /// Simulation-only diagnostics at state `x_t`.
    pub fn diagnostics(
        &self,
        model: &SystemModel,
        x_t: &DVector<f64>,
        feature: &DVector<f64>,
    ) -> AdaptiveDiagnostics {
        let k_tilde = &self.k + model.w_true();
        let u_tilde = &k_tilde * feature;
        AdaptiveDiagnostics {
            v_a: adaptive_lyapunov(&k_tilde, &self.gamma_inv),
            k_tilde_norm: k_tilde.norm(),
            residual_norm: (model.input_matrix(x_t) * &u_tilde).norm(),
        }
    }
}

/// Quantities that need the true weight and therefore exist only in simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveDiagnostics {
    /// `tr(K̃ᵀ Γ⁻¹ K̃)`
    pub v_a: f64,
    /// `‖K̃‖_F`
    pub k_tilde_norm: f64,
    /// `‖g(x) ũ‖`
    pub residual_norm: f64,
}

pub fn adaptive_lyapunov(k_tilde: &DMatrix<f64>, gamma_inv: &DMatrix<f64>) -> f64 {
    (k_tilde.transpose() * gamma_inv * k_tilde).trace()
}

/// The update law written on the weight error: `K̃ − Γ ũ φᵀ / (ε + ‖φ‖²)`.
pub fn analysis_update(
    k_tilde: &DMatrix<f64>,
    u_tilde: &DVector<f64>,
    feature: &DVector<f64>,
    gamma: &DMatrix<f64>,
    epsilon: f64,
) -> DMatrix<f64> {
    k_tilde - gamma * u_tilde * feature.transpose() / (epsilon + feature.norm_squared())
}

/// Guaranteed one-step decrease of `V_a`: `−ũᵀ(2I − Γ)ũ / (ε + ‖φ‖²)`.
pub fn lyapunov_decrease_bound(
    u_tilde: &DVector<f64>,
    feature: &DVector<f64>,
    gamma: &DMatrix<f64>,
    epsilon: f64,
) -> f64 {
    let m = gamma.nrows();
    let two_minus_gamma = DMatrix::identity(m, m) * 2.0 - gamma;
    -quad_form(&two_minus_gamma, u_tilde) / (epsilon + feature.norm_squared())
}

/// `sqrt(λ_max(Γ) / λ_min(Γ))`.
pub fn gain_condition_root(gamma: &DMatrix<f64>) -> f64 {
    let (lo, hi) = eig_range(gamma);
    (hi / lo).sqrt()
}

/// Bound on the weight error: `‖K̃_t‖_F ≤ sqrt(λ_max/λ_min) ‖W‖_F` when `K_0 = 0`.
pub fn weight_error_bound(w_norm_f: f64, gamma: &DMatrix<f64>) -> f64 {
    gain_condition_root(gamma) * w_norm_f
}

/// `u^a_max = (sqrt(λ_max(Γ)/λ_min(Γ)) + 1) ‖W‖_F δ_φ`.
pub fn adaptive_bound(w_norm_f: f64, gamma: &DMatrix<f64>, delta_phi: f64) -> f64 {
    (gain_condition_root(gamma) + 1.0) * w_norm_f * delta_phi
}

/// `w′_max = δ_g sqrt(λ_max(Γ)/λ_min(Γ)) ‖W‖_F δ_φ`, the bound on the
/// disturbance `g(x) ũ` the MPC sees.
pub fn apparent_disturbance_bound(model: &SystemModel, gamma: &DMatrix<f64>) -> f64 {
    model.delta_g() * gain_condition_root(gamma) * model.w_true().norm() * model.delta_phi()
}
