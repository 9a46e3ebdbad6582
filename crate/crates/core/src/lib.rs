//! Open-loop leader-follower strategies for linear-quadratic stochastic
//! differential games with one constant delay in the state and in both
//! controls.
//!
//! The solve proceeds in stages:
//!
//! 1. validate the model data on a uniform grid whose step divides the
//!    delay exactly,
//! 2. march the follower and leader quadratic-cost kernels P1, P2
//!    backward (delayed lookups always hit already-solved or
//!    zero-extension nodes),
//! 3. reduce the follower's response into hatted coefficient schedules
//!    and assemble the doubled 2n-dimensional system,
//! 4. solve the coupled backward system for the costate map L and the
//!    banded kernel Pi,
//! 5. synthesize feedback gains on the realized state and its lag-ahead
//!    predictor,
//! 6. verify by closed-loop Monte Carlo: cost perturbation tests under
//!    common random numbers and the predictor tower property.
//!
//! The `stackelberg-delay` binary wraps the same pipeline behind config
//! files and CSV exports.

pub mod builtin;
pub mod config;
pub mod coupled;
pub mod error;
pub mod gains;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod output;
pub mod pipeline;
pub mod riccati;
pub mod schedule;
pub mod sim;
pub mod stacked;
pub mod tol;

pub use error::{Result, SolverError};
pub use model::GameSpec;
pub use pipeline::{solve_all, SolveArtifacts};
