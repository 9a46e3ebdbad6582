//! Uniform time grid with a lag that is an exact multiple of the step.
//!
//! The horizon [0, T] is split into N+1 steps of width dt = T/(N+1), nodes
//! t_k = k*dt for k = 0..=N+1. The delay must satisfy delta = d*dt for an
//! integer d >= 1; delayed lookups then stay on the grid. Backward equations
//! are extended past the horizon by d extra nodes (values zero there), so
//! every t+delta lookup lands on a stored node.

use crate::error::{Result, SolverError};

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub delay: f64,
    /// N: the last interior node index; there are N+2 nodes on [0, T].
    pub n_steps: usize,
    pub dt: f64,
    /// d: the delay in steps.
    pub lag_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, delay: f64, n_steps: usize) -> Result<Self> {
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(SolverError::GridMismatch(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        if !delay.is_finite() || delay <= 0.0 {
            return Err(SolverError::GridMismatch(format!(
                "delay must be positive and finite, got {delay}"
            )));
        }
        if delay > horizon * (1.0 + 1e-12) {
            return Err(SolverError::DelayExceedsHorizon { delay, horizon });
        }
        let dt = horizon / (n_steps as f64 + 1.0);
        let ratio = delay / dt;
        let d = ratio.round();
        if d < 1.0 || (ratio - d).abs() > 1e-9 * ratio.max(1.0) {
            return Err(SolverError::DelayNotDivisible { delay, step: dt });
        }
        Ok(TimeGrid {
            horizon,
            delay,
            n_steps,
            dt,
            lag_steps: d as usize,
        })
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Node time allowing negative (history) indices.
    pub fn t_signed(&self, k: isize) -> f64 {
        k as f64 * self.dt
    }

    /// Nodes on [0, T]: indices 0..=N+1.
    pub fn len(&self) -> usize {
        self.n_steps + 2
    }

    /// Nodes including the zero extension (T, T + delta]: indices 0..=N+1+d.
    pub fn ext_len(&self) -> usize {
        self.n_steps + 2 + self.lag_steps
    }

    /// Index of the terminal node t = T.
    pub fn last(&self) -> usize {
        self.n_steps + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisible_delay_accepted() {
        let g = TimeGrid::new(10.0, 1.0, 999).unwrap();
        assert_eq!(g.lag_steps, 100);
        assert!((g.dt - 0.01).abs() < 1e-15);
        assert_eq!(g.len(), 1001);
        assert_eq!(g.ext_len(), 1101);
        assert!((g.t(1000) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn indivisible_delay_rejected() {
        // 0.73 / 0.1 = 7.3 steps
        let err = TimeGrid::new(10.0, 0.73, 99).unwrap_err();
        assert!(matches!(err, SolverError::DelayNotDivisible { .. }));
    }

    #[test]
    fn near_integer_ratio_rounds_to_the_grid() {
        // 0.7 / 0.1 is an exact 7 in real arithmetic; the float quotient
        // misses by a few ulps and must still be accepted
        let g = TimeGrid::new(10.0, 0.7, 99).unwrap();
        assert_eq!(g.lag_steps, 7);
    }

    #[test]
    fn delay_longer_than_horizon_rejected() {
        let err = TimeGrid::new(1.0, 2.0, 9).unwrap_err();
        assert!(matches!(err, SolverError::DelayExceedsHorizon { .. }));
    }

    #[test]
    fn delay_equal_horizon_allowed() {
        let g = TimeGrid::new(2.0, 2.0, 9).unwrap();
        assert_eq!(g.lag_steps, 10);
    }

    #[test]
    fn nonpositive_inputs_rejected() {
        assert!(TimeGrid::new(0.0, 1.0, 9).is_err());
        assert!(TimeGrid::new(1.0, 0.0, 9).is_err());
        assert!(TimeGrid::new(f64::NAN, 1.0, 9).is_err());
    }
}
