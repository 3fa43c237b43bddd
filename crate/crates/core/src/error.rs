use std::fmt;

use thiserror::Error;

/// Errors produced by model construction, solvers and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("reference governor infeasible: {0}")]
    InfeasibleGovernor(GovernorDiagnostics),

    /// A tightened constraint set has no interior.
    #[error("empty constraint set: {0}")]
    EmptySet(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("controller failed at step {step}: {source}")]
    Controller {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// What the governor saw when it gave up.
#[derive(Debug, Clone)]
pub struct GovernorDiagnostics {
    pub max_violation: f64,
    pub terminal_error: f64,
    pub converged: bool,
    pub rounds: usize,
    pub iterations: usize,
}

impl fmt::Display for GovernorDiagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "max constraint violation {:.3e}, terminal error {:.3e}, converged={}, rounds={}, iterations={}",
            self.max_violation, self.terminal_error, self.converged, self.rounds, self.iterations
        )
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
