//! Centralized tube-based model predictive control with distributed
//! discrete-time adaptive disturbance rejection.
//!
//! Each agent obeys `x⁺ = f(x) + g(x)(u + W φ(x))` with an unknown weight
//! `W`. A central controller plans on the nominal dynamics `f̄(x, u)`:
//! an offline reference governor produces a padded reference trajectory and
//! an online tracking MPC follows it. Locally, each agent learns `K ≈ −W`
//! with a normalized weight update law and adds `u^a = K φ(x)` to the MPC
//! command.
//!
//! Modules, bottom-up:
//!
//! - [`dynamics`]: system models, constraint boxes, RK4 discretization and
//!   the two benchmark models (reactor, wing-rock).
//! - [`adaptive`]: weight update law, adaptive control and its bounds.
//! - [`trajopt`]: single-shooting projected L-BFGS optimal-control solver.
//! - [`governor`]: constraint tightening and the offline reference plan.
//! - [`mpc`]: online tracking MPC and value-function diagnostics.
//! - [`orchestrator`]: closed loop, multi-agent runs, logs and invariant checks.
//! - [`cli`]: configuration, experiment commands, CSV and SVG output.

pub mod adaptive;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod governor;
pub(crate) mod linalg;
pub mod mpc;
pub mod orchestrator;
pub mod trajopt;

pub use error::{Error, Result};
