//! Projected quasi-Newton minimization of `f(z)` subject to `lo ≤ z ≤ hi`.
//!
//! Coordinates within ε of a bound with the gradient pushing outward form the
//! active set and move along the projected-gradient arc. The free coordinates
//! take a quasi-Newton step, with curvature from either a limited-memory BFGS
//! two-loop recursion or a caller-supplied Hessian approximation. Steps are
//! projected back onto the box and accepted by Armijo backtracking.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSettings {
    /// Stop when `‖z − P(z − ∇f)‖∞` falls to this.
    pub tol: f64,
    pub max_iter: usize,
    pub memory: usize,
}

/// Objective, gradient and optional Hessian approximation at a point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

impl Evaluation {
    pub fn first_order(value: f64, gradient: DVector<f64>) -> Self {
        Self {
            value,
            gradient,
            hessian: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InnerResult {
    pub z: DVector<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final projected-gradient infinity norm.
    pub pg_norm: f64,
    /// Objective after each accepted iterate, starting with the initial point.
    pub trace: Vec<f64>,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const ACTIVE_EPS: f64 = 1e-6;
const ROUNDOFF_REL: f64 = 1e-13;
const NOISE_FACTOR: f64 = 100.0;
const APPROX_WOLFE: f64 = 0.8;

pub fn clamp(z: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(z.len(), |i, _| z[i].clamp(lo[i], hi[i]))
}

pub fn projected_gradient(z: &DVector<f64>, g: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    z - clamp(&(z - g), lo, hi)
}

struct Pair {
    s: DVector<f64>,
    y: DVector<f64>,
    rho: f64,
}

fn two_loop(memory: &VecDeque<Pair>, g: &DVector<f64>, free: &[bool]) -> DVector<f64> {
    let mask = |v: &DVector<f64>| DVector::from_fn(v.len(), |i, _| if free[i] { v[i] } else { 0.0 });
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(memory.len());
    for pair in memory.iter().rev() {
        let a = pair.rho * mask(&pair.s).dot(&q);
        q -= mask(&pair.y) * a;
        alphas.push(a);
    }
    if let Some(last) = memory.back() {
        let (sm, ym) = (mask(&last.s), mask(&last.y));
        let yy = ym.norm_squared();
        let sy = sm.dot(&ym);
        if yy > 0.0 && sy > 0.0 {
            q *= sy / yy;
        }
    }
    for (pair, a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = pair.rho * mask(&pair.y).dot(&q);
        q += mask(&pair.s) * (a - b);
    }
    -mask(&q)
}

/// `−H_FF⁻¹ g_F` on the free set, with Levenberg damping if `H_FF` is not
/// numerically positive definite.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>, free: &[bool]) -> DVector<f64> {
    let idx: Vec<usize> = (0..g.len()).filter(|&i| free[i]).collect();
    let mut d = DVector::zeros(g.len());
    if idx.is_empty() {
        return d;
    }
    let k = idx.len();
    let hff = DMatrix::from_fn(k, k, |a, b| h[(idx[a], idx[b])]);
    let gf = DVector::from_fn(k, |a, _| g[idx[a]]);
    let scale = hff.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut damping = 0.0;
    for _ in 0..20 {
        let mut damped = hff.clone();
        for a in 0..k {
            damped[(a, a)] += damping;
        }
        if let Some(chol) = damped.cholesky() {
            let step = chol.solve(&gf);
            for (a, &i) in idx.iter().enumerate() {
                d[i] = -step[a];
            }
            return d;
        }
        damping = if damping == 0.0 { 1e-12 * scale } else { damping * 10.0 };
    }
    for &i in &idx {
        d[i] = -g[i];
    }
    d
}

/// Minimize over the box starting from `P(z0)`.
///
/// `value` evaluates only the objective (used in the line search);
/// `evaluate` returns the full [`Evaluation`] at accepted points. When it
/// carries a Hessian, the free-set step is a projected Newton step and the
/// limited memory is unused.
pub fn minimize<F, G>(
    value: F,
    evaluate: G,
    z0: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    settings: &InnerSettings,
) -> Result<InnerResult>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
    G: Fn(&DVector<f64>) -> Result<Evaluation>,
{
    let n = z0.len();
    let mut z = clamp(z0, lo, hi);
    let Evaluation {
        value: mut fz,
        gradient: mut g,
        hessian: mut hess,
    } = evaluate(&z)?;
    if !fz.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("non-finite objective {fz} at the initial point")));
    }
    let mut trace = vec![fz];
    let mut memory: VecDeque<Pair> = VecDeque::with_capacity(settings.memory);
    let mut iterations = 0;
    let mut converged = false;
    let mut pg_norm = projected_gradient(&z, &g, lo, hi).amax();

    while iterations < settings.max_iter {
        if pg_norm <= settings.tol {
            converged = true;
            break;
        }
        // ε-active set: coordinates within ε of a bound with the gradient
        // pointing outward move only along the projected-gradient arc
        let eps = pg_norm.min(ACTIVE_EPS);
        let free: Vec<bool> = (0..n)
            .map(|i| !((z[i] <= lo[i] + eps && g[i] > 0.0) || (z[i] >= hi[i] - eps && g[i] < 0.0)))
            .collect();

        let newton = hess.is_some();
        let mut direction = match &hess {
            Some(h) => newton_direction(h, &g, &free),
            None => two_loop(&memory, &g, &free),
        };
        if (!newton && memory.is_empty()) || direction.dot(&g) >= 0.0 {
            memory.clear();
            direction = DVector::from_fn(n, |i, _| if free[i] { -g[i] } else { 0.0 });
        }
        for i in 0..n {
            if !free[i] {
                direction[i] = match &hess {
                    Some(h) if h[(i, i)] > 0.0 => -g[i] / h[(i, i)],
                    _ => -g[i],
                };
            }
        }
        let mut alpha = if !newton && memory.is_empty() {
            (1.0 / direction.amax()).min(1.0)
        } else {
            1.0
        };

        // Once the predicted decrease is down at the rounding level of f,
        // Armijo on function values is noise; switch to the approximate Wolfe
        // test on the directional derivative at the trial point.
        let noise = ROUNDOFF_REL * fz.abs().max(1.0);
        let mut accepted = None;
        let mut evaluated = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = clamp(&(&z + &direction * alpha), lo, hi);
            let step = &trial - &z;
            if step.amax() == 0.0 {
                break;
            }
            let slope = g.dot(&step);
            let f_trial = value(&trial)?;
            if !f_trial.is_finite() {
                alpha *= 0.5;
                continue;
            }
            if -slope > NOISE_FACTOR * noise {
                if f_trial <= fz + ARMIJO_C1 * slope {
                    accepted = Some(trial);
                    break;
                }
            } else if f_trial <= fz + noise {
                let full = evaluate(&trial)?;
                if full.gradient.dot(&step) <= -APPROX_WOLFE * slope {
                    evaluated = Some(full);
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= 0.5;
        }

        let Some(trial) = accepted else {
            if newton || memory.is_empty() {
                // steepest descent made no progress: stalled
                break;
            }
            memory.clear();
            continue;
        };
        let Evaluation {
            value: f_new,
            gradient: g_new,
            hessian: h_new,
        } = match evaluated {
            Some(e) => e,
            None => evaluate(&trial)?,
        };
        if !f_new.is_finite() || g_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite objective {f_new} during descent")));
        }
        let s = &trial - &z;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if !newton && sy > 1e-14 * s.norm() * y.norm() && sy > 0.0 {
            if memory.len() == settings.memory {
                memory.pop_front();
            }
            memory.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        z = trial;
        fz = f_new;
        g = g_new;
        hess = h_new;
        trace.push(fz);
        iterations += 1;
        pg_norm = projected_gradient(&z, &g, lo, hi).amax();
    }
    if pg_norm <= settings.tol {
        converged = true;
    }

    Ok(InnerResult {
        z,
        value: fz,
        iterations,
        converged,
        pg_norm,
        trace,
    })
}
