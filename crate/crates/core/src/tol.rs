//! Numerical thresholds used across the solver.
//!
//! Everything scale-dependent is expressed as a multiplier on (1 + norm) of
//! the quantity being tested, so the same constants work for both the tiny
//! one-dimensional benchmark instances and larger systems.

/// Absolute asymmetry allowed in user-supplied weight matrices.
pub const SYMMETRY_ABS: f64 = 1e-12;

/// A symmetric matrix counts as positive definite when its smallest
/// eigenvalue exceeds `PD_EPS_SCALE * (1 + trace)`.
pub const PD_EPS_SCALE: f64 = 1e-12;

/// Default tolerance scale for the structural assumption checks:
/// residuals must stay below `ASSUMPTION_SCALE * (1 + max node norm of P)`.
pub const ASSUMPTION_SCALE: f64 = 1e-9;

/// Minimum reciprocal condition number (sigma_min / sigma_max) of the
/// resolvent `I - L*Cbar` before the backward recursion aborts.
pub const RESOLVENT_RCOND_MIN: f64 = 1e-10;

/// Any iterate whose max-abs entry exceeds this aborts with a blowup error.
pub const BLOWUP_NORM: f64 = 1e12;

/// Defect allowed when re-substituting solved trajectories into their
/// defining recursions: `RESIDUAL_SCALE * (1 + max norm)`.
pub const RESIDUAL_SCALE: f64 = 1e-12;

/// Agreement required between independent closed-form oracles and solver
/// output on the instances where both are exact.
pub const ORACLE_EQ: f64 = 1e-12;

/// First-order self-convergence window: the ratio of successive grid
/// refinement errors must land in [MIN, MAX].
pub const REFINE_RATIO_MIN: f64 = 1.5;
pub const REFINE_RATIO_MAX: f64 = 2.5;
