//! Backward recursion for the coupled kernel pair (L, Pi).
//!
//! The costate of the doubled system decomposes as
//!
//!   psi(t) = L(t) phi(t) - int_t^{(t+dl) and T} Pi(t, theta) phihat(t | theta - dl) dtheta
//!
//! where phihat(t|s) is the conditional mean of phi(t) given time-s
//! information. L satisfies a terminal-value equation fed by the band
//! diagonal Pi(t, t+dl); Pi is transported backward in its first argument
//! and closed by a boundary condition on the diagonal built from the xi
//! kernels. Only the band 0 <= theta - t <= dl up to the horizon ever
//! enters, so Pi is stored as one short row per node: pi[k][i] is the value
//! at (t_k, t_{k+i}).
//!
//! March order per step k (source row j = k+1): advance L using the stored
//! far-band entry of row j; sum row j's interior; close row j's diagonal;
//! transport row j one step back into row k. Rows inside the first lag
//! window keep zero diagonals: the kernels closing them would need
//! curvature one lag before time zero, and no consumed quantity ever reads
//! those entries. Every written value is checked for symmetry drift and
//! symmetrized; the terminal strip of rows near the horizon stays
//! identically zero.

use nalgebra::DMatrix;

use crate::error::{Result, SolverError};
use crate::linalg;
use crate::model::ValidatedSpec;
use crate::riccati::OmegaSchedule;
use crate::stacked::{build_xi, StackedCoefficients, XiTriple};
use crate::tol;

#[derive(Debug, Clone)]
pub struct CoupledSolution {
    /// L at nodes 0..=N+1.
    pub l: Vec<DMatrix<f64>>,
    /// pi[k][i] = Pi(t_k, t_{k+i}), i = 0..=min(d, N+1-k).
    pub pi: Vec<Vec<DMatrix<f64>>>,
    pub dt: f64,
    pub lag_steps: usize,
    /// Terminal node index.
    pub last: usize,
}

impl CoupledSolution {
    /// Stored band width of row k (max offset).
    pub fn band(&self, k: usize) -> usize {
        self.lag_steps.min(self.last - k)
    }

    pub fn pi_at(&self, k: usize, j: usize) -> &DMatrix<f64> {
        assert!(j >= k && j - k <= self.band(k), "({k},{j}) outside stored band");
        &self.pi[k][j - k]
    }

    /// Sum of row k's strict interior (offsets 1..=band), fixed order.
    pub fn interior_sum(&self, k: usize) -> DMatrix<f64> {
        let two_n = self.l[0].nrows();
        let mut acc = DMatrix::zeros(two_n, two_n);
        for i in 1..=self.band(k) {
            acc += &self.pi[k][i];
        }
        acc
    }

    /// Left-Riemann value of int_t^{(t+dl) and T} Pi(t, theta) dtheta at node k.
    pub fn pi_integral(&self, k: usize) -> DMatrix<f64> {
        self.dt * self.interior_sum(k)
    }

    /// Max-abs entry over L and the whole stored band.
    pub fn max_norm(&self) -> f64 {
        let mut m = 0.0f64;
        for v in &self.l {
            m = m.max(linalg::max_abs(v));
        }
        for row in &self.pi {
            for v in row {
                m = m.max(linalg::max_abs(v));
            }
        }
        m
    }
}

/// One backward step of L from its value at node j and the far-band entry
/// of row j (None when the horizon truncates the band there).
fn l_formula(
    st: &StackedCoefficients,
    dt: f64,
    j: usize,
    l_j: &DMatrix<f64>,
    pi_far: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    let a1 = st.a1.at(j);
    let a1b = st.a1_bar.at(j);
    let mut out = l_j + dt * (l_j * a1 + a1.transpose() * l_j + a1b.transpose() * l_j * a1b);
    if let Some(p) = pi_far {
        out -= dt * p;
    }
    out
}

/// Transport of one band entry of row j one step back in the first argument.
fn transport_formula(
    st: &StackedCoefficients,
    dt: f64,
    j: usize,
    entry: &DMatrix<f64>,
) -> DMatrix<f64> {
    let a1 = st.a1.at(j);
    entry + dt * (entry * a1 + a1.transpose() * entry)
}

/// Boundary closure of row j's diagonal from the interior sum and the xi
/// kernels at j.
fn diag_formula(dt: f64, midpi: &DMatrix<f64>, xi: &XiTriple) -> DMatrix<f64> {
    dt * (midpi * &xi.xi1)
        + dt * (xi.xi1.transpose() * midpi)
        + (dt * dt) * (midpi * &xi.xi2 * midpi)
        + &xi.xi3
}

fn check_sym_and_store(m: &mut DMatrix<f64>, node: usize, dt: f64) -> Result<()> {
    let asym = linalg::asymmetry(m);
    let bound = 1e-9 * (1.0 + linalg::max_abs(m));
    if asym > bound {
        return Err(SolverError::NumericalBlowup {
            node,
            t: node as f64 * dt,
            norm: asym,
            limit: bound,
        });
    }
    linalg::symmetrize(m);
    let norm = linalg::max_abs(m);
    if !norm.is_finite() || norm > tol::BLOWUP_NORM {
        return Err(SolverError::NumericalBlowup {
            node,
            t: node as f64 * dt,
            norm,
            limit: tol::BLOWUP_NORM,
        });
    }
    Ok(())
}

pub fn solve_l_pi(
    vs: &ValidatedSpec,
    st: &StackedCoefficients,
    omega3: &OmegaSchedule,
) -> Result<CoupledSolution> {
    let grid = &vs.grid;
    let d = grid.lag_steps;
    let last = grid.last();
    let dt = grid.dt;
    let two_n = 2 * vs.n;

    let mut sol = CoupledSolution {
        l: vec![DMatrix::zeros(two_n, two_n); last + 1],
        pi: (0..=last)
            .map(|k| vec![DMatrix::zeros(two_n, two_n); d.min(last - k) + 1])
            .collect(),
        dt,
        lag_steps: d,
        last,
    };

    // rows last-d+1..=last stay zero (terminal strip); march starts below
    for k in (0..=last - d).rev() {
        let j = k + 1;

        let pi_far = if j + d <= last {
            Some(&sol.pi[j][d])
        } else {
            None
        };
        let mut l_new = l_formula(st, dt, j, &sol.l[j], pi_far);
        check_sym_and_store(&mut l_new, k, dt)?;
        sol.l[k] = l_new;

        if j >= d {
            let midpi = sol.interior_sum(j);
            let xi = build_xi(vs, st, omega3, &sol.l[j], j)?;
            let mut diag = diag_formula(dt, &midpi, &xi);
            check_sym_and_store(&mut diag, j, dt)?;
            sol.pi[j][0] = diag;
        }

        for i in 1..=d.min(last - k) {
            let mut moved = transport_formula(st, dt, j, &sol.pi[j][i - 1]);
            check_sym_and_store(&mut moved, k, dt)?;
            sol.pi[k][i] = moved;
        }
    }

    Ok(sol)
}

/// Re-substitute the stored solution into every recursion formula and
/// return the worst absolute defect. Symmetrization at write time is the
/// only source of defect for a healthy solve.
pub fn residual_check(
    vs: &ValidatedSpec,
    st: &StackedCoefficients,
    omega3: &OmegaSchedule,
    sol: &CoupledSolution,
) -> Result<f64> {
    let d = sol.lag_steps;
    let last = sol.last;
    let dt = sol.dt;
    let mut worst = 0.0f64;

    // terminal strip must be untouched zeros
    for k in (last - d + 1)..=last {
        worst = worst.max(linalg::max_abs(&sol.l[k]));
        for i in 1..sol.pi[k].len() {
            worst = worst.max(linalg::max_abs(&sol.pi[k][i]));
        }
    }

    for k in (0..=last - d).rev() {
        let j = k + 1;
        let pi_far = if j + d <= last {
            Some(&sol.pi[j][d])
        } else {
            None
        };
        let l_ref = l_formula(st, dt, j, &sol.l[j], pi_far);
        worst = worst.max(linalg::max_abs(&(&l_ref - &sol.l[k])));

        if j >= d {
            let midpi = sol.interior_sum(j);
            let xi = build_xi(vs, st, omega3, &sol.l[j], j)?;
            let diag_ref = diag_formula(dt, &midpi, &xi);
            worst = worst.max(linalg::max_abs(&(&diag_ref - &sol.pi[j][0])));
        }

        for i in 1..=d.min(last - k) {
            let moved_ref = transport_formula(st, dt, j, &sol.pi[j][i - 1]);
            worst = worst.max(linalg::max_abs(&(&moved_ref - &sol.pi[k][i])));
        }
    }
    Ok(worst)
}

/// Free-function alias for the row integral, matching the solution method.
pub fn pi_integral(sol: &CoupledSolution, k: usize) -> DMatrix<f64> {
    sol.pi_integral(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_spec, GameSpec};
    use crate::riccati::{compute_omegas, solve_p1, solve_p2, compute_omega1};
    use crate::schedule::{MatSpec, VecSpec};
    use crate::stacked::{build_calligraphic, build_hats};
    use nalgebra::dmatrix;

    fn feedback_spec() -> GameSpec {
        GameSpec {
            horizon: 2.0,
            delay: 0.5,
            n: 1,
            k1: 1,
            k2: 1,
            a: MatSpec::scalar(-0.1),
            a_lag: MatSpec::scalar(0.0),
            c: MatSpec::scalar(-0.2),
            c_lag: MatSpec::scalar(0.0),
            b1_lag: MatSpec::scalar(0.4),
            d1_lag: MatSpec::scalar(1.5),
            b2_lag: MatSpec::scalar(0.3),
            d2_lag: MatSpec::scalar(1.0),
            q1: MatSpec::scalar(0.3),
            q1_lag: MatSpec::scalar(0.0),
            q2: MatSpec::scalar(0.2),
            q2_lag: MatSpec::scalar(0.0),
            r1: MatSpec::scalar(1.0),
            r1_lag: MatSpec::scalar(-0.5),
            r2: MatSpec::scalar(1.0),
            r2_lag: MatSpec::scalar(-0.5),
            g1: dmatrix![1.0],
            g2: dmatrix![0.5],
            phi: VecSpec::scalar(1.0),
            eta1: VecSpec::scalar(0.25),
            eta2: VecSpec::scalar(0.0),
        }
    }

    fn solve_chain(
        spec: &GameSpec,
        n_steps: usize,
    ) -> (
        crate::model::ValidatedSpec,
        StackedCoefficients,
        OmegaSchedule,
        CoupledSolution,
    ) {
        let vs = validate_spec(spec, n_steps).unwrap();
        let p1 = solve_p1(&vs, false).unwrap();
        let w1 = compute_omega1(&vs, &p1);
        let hats = build_hats(&vs, &p1, &w1).unwrap();
        let p2 = solve_p2(&vs, &hats, false).unwrap();
        let (_, w2, w3) = compute_omegas(&vs, &p1, &p2, &hats);
        let st = build_calligraphic(&vs, &hats, &p2, &w2).unwrap();
        let sol = solve_l_pi(&vs, &st, &w3).unwrap();
        (vs, st, w3, sol)
    }

    // dense reference: full (N+2)^2 table of Pi plus L, same equations,
    // no banding, independent of the production index bookkeeping
    fn dense_reference(
        vs: &crate::model::ValidatedSpec,
        st: &StackedCoefficients,
        w3: &OmegaSchedule,
    ) -> (Vec<DMatrix<f64>>, Vec<Vec<DMatrix<f64>>>) {
        let d = vs.grid.lag_steps;
        let last = vs.grid.last();
        let dt = vs.grid.dt;
        let two_n = 2 * vs.n;
        let z = DMatrix::<f64>::zeros(two_n, two_n);
        let mut l = vec![z.clone(); last + 1];
        let mut pi = vec![vec![z.clone(); last + 1]; last + 1];
        for k in (0..=last - d).rev() {
            let j = k + 1;
            let a1 = st.a1.at(j);
            let a1b = st.a1_bar.at(j);
            let mut lnew = &l[j]
                + dt * (&l[j] * a1 + a1.transpose() * &l[j] + a1b.transpose() * &l[j] * a1b);
            if j + d <= last {
                lnew -= dt * &pi[j][j + d];
            }
            crate::linalg::symmetrize(&mut lnew);
            l[k] = lnew;

            if j >= d {
                let mut mid = z.clone();
                let hi = (j + d).min(last);
                for col in (j + 1)..=hi {
                    mid += &pi[j][col];
                }
                let xi = build_xi(vs, st, w3, &l[j], j).unwrap();
                let mut diag = dt * (&mid * &xi.xi1)
                    + dt * (xi.xi1.transpose() * &mid)
                    + dt * dt * (&mid * &xi.xi2 * &mid)
                    + &xi.xi3;
                crate::linalg::symmetrize(&mut diag);
                pi[j][j] = diag;
            }

            for i in 1..=d.min(last - k) {
                let col = k + i;
                let mut moved =
                    &pi[j][col] + dt * (&pi[j][col] * a1 + a1.transpose() * &pi[j][col]);
                crate::linalg::symmetrize(&mut moved);
                pi[k][col] = moved;
            }
        }
        (l, pi)
    }

    #[test]
    fn no_coupling_means_zero_solution() {
        let mut spec = feedback_spec();
        spec.b1_lag = MatSpec::scalar(0.0);
        spec.d1_lag = MatSpec::scalar(0.0);
        spec.b2_lag = MatSpec::scalar(0.0);
        spec.d2_lag = MatSpec::scalar(0.0);
        spec.r1_lag = MatSpec::scalar(0.0);
        let (_, _, _, sol) = solve_chain(&spec, 39);
        assert_eq!(sol.max_norm(), 0.0);
    }

    #[test]
    fn banded_march_matches_dense_reference() {
        let (vs, st, w3, sol) = solve_chain(&feedback_spec(), 39);
        let (l_ref, pi_ref) = dense_reference(&vs, &st, &w3);
        let last = vs.grid.last();
        for k in 0..=last {
            assert!(
                (&sol.l[k] - &l_ref[k]).amax() < 1e-13,
                "L mismatch at node {k}"
            );
            for i in 0..=sol.band(k) {
                assert!(
                    (&sol.pi[k][i] - &pi_ref[k][k + i]).amax() < 1e-13,
                    "Pi mismatch at ({k},{})",
                    k + i
                );
            }
        }
        // something nonzero actually happened
        assert!(sol.max_norm() > 1e-6);
    }

    #[test]
    fn stored_values_satisfy_their_own_recursion() {
        let (vs, st, w3, sol) = solve_chain(&feedback_spec(), 79);
        let defect = residual_check(&vs, &st, &w3, &sol).unwrap();
        assert!(
            defect <= tol::RESIDUAL_SCALE * (1.0 + sol.max_norm()),
            "defect {defect}"
        );
    }

    #[test]
    fn outputs_are_symmetric() {
        let (vs, _, _, sol) = solve_chain(&feedback_spec(), 39);
        for k in 0..=vs.grid.last() {
            assert_eq!(linalg::asymmetry(&sol.l[k]), 0.0);
            for i in 0..=sol.band(k) {
                assert_eq!(linalg::asymmetry(&sol.pi[k][i]), 0.0);
            }
        }
    }

    #[test]
    fn terminal_strip_stays_zero() {
        let (vs, _, _, sol) = solve_chain(&feedback_spec(), 39);
        let d = vs.grid.lag_steps;
        let last = vs.grid.last();
        for k in (last - d + 1)..=last {
            assert_eq!(linalg::max_abs(&sol.l[k]), 0.0);
        }
        assert_eq!(linalg::max_abs(sol.pi_at(last, last)), 0.0);
    }
}
