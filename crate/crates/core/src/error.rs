//! Error taxonomy for the solver library.
//!
//! Variants split into two families: configuration errors (bad dimensions,
//! incompatible grids, non-symmetric weights) that the caller can fix by
//! editing inputs, and numerical errors (loss of positive definiteness,
//! singular resolvents, blowup) that signal the instance leaves the regime
//! where the open-loop construction is valid.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("{name}: expected {expected}, got {got}")]
    DimensionMismatch {
        name: String,
        expected: String,
        got: String,
    },

    #[error("{name} is not symmetric (asymmetry {asymmetry:.3e})")]
    NonSymmetricWeight { name: String, asymmetry: f64 },

    #[error("delay {delay} is not an integer multiple of step {step}")]
    DelayNotDivisible { delay: f64, step: f64 },

    #[error("delay {delay} exceeds horizon {horizon}")]
    DelayExceedsHorizon { delay: f64, horizon: f64 },

    #[error("{name} at node {node} (t={t:.6}) is not positive definite (min eigenvalue {min_eig:.3e})")]
    OmegaNotPositiveDefinite {
        name: &'static str,
        node: usize,
        t: f64,
        min_eig: f64,
    },

    #[error("resolvent singular at node {node} (t={t:.6}), rcond {rcond:.3e}")]
    SingularResolvent { node: usize, t: f64, rcond: f64 },

    #[error("numerical blowup at node {node} (t={t:.6}): norm {norm:.3e} exceeds {limit:.3e}")]
    NumericalBlowup {
        node: usize,
        t: f64,
        norm: f64,
        limit: f64,
    },

    #[error("index {index} out of range in {context}")]
    IndexOutOfRange { index: isize, context: String },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("instance is not scalar (n={n}, k1={k1}, k2={k2}); closed-form path needs 1x1 data")]
    NotOneDimensional { n: usize, k1: usize, k2: usize },
}

impl SolverError {
    /// True for errors caused by the numerical state of a solve rather than
    /// by malformed input. The CLI maps these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SolverError::OmegaNotPositiveDefinite { .. }
                | SolverError::SingularResolvent { .. }
                | SolverError::NumericalBlowup { .. }
        )
    }
}
