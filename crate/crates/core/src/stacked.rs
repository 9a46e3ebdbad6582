//! Reduced coefficients after substituting the follower's reaction, and the
//! doubled-state system built from them.
//!
//! Substituting the follower's optimal response into the dynamics replaces
//! each lagged loading by a "hatted" version, e.g.
//!
//!   A2^ = A_ - B1_ I_[dl,T](t) W1^-1(t-dl) D1_^T P1 C_ ,
//!
//! with W1 the follower control curvature, plus pure-feedback kernels
//! F^, H^, K^, M^ built from W1^-1 sandwiched between B1_/D1_ factors.
//! The leader's problem then lives on the doubled state (xi, X) whose
//! drift/diffusion blocks (built here as 2n x 2n matrices) mix the hatted
//! coefficients with the leader kernel P2.
//!
//! At a node where W1 degenerates, a hat whose bracket carries a P1 factor
//! is only well defined if that bracket vanishes; otherwise the instance is
//! rejected. The pure-feedback kernels instead store zero and record the
//! node; the coupled solve later verifies those zeros only ever multiply
//! exact zeros (see the pipeline guard).

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SolverError};
use crate::linalg;
use crate::model::ValidatedSpec;
use crate::riccati::OmegaSchedule;
use crate::schedule::ScheduleMatrix;

/// Lag loadings after absorbing the follower's reaction. All schedules live
/// on the extended grid and vanish past the horizon.
#[derive(Debug, Clone)]
pub struct HatCoefficients {
    /// Drift loading of the lagged state, n x n.
    pub a2_hat: ScheduleMatrix,
    /// Same, stored as zero inside the first lag window (where the
    /// multiplied argument vanishes identically).
    pub a2_tilde: ScheduleMatrix,
    /// Diffusion loading of the lagged state, n x n.
    pub c2_hat: ScheduleMatrix,
    pub c2_tilde: ScheduleMatrix,
    /// Drift/diffusion loadings of the lagged leader control, n x k2.
    pub b_hat: ScheduleMatrix,
    pub d_hat: ScheduleMatrix,
    /// Pure-feedback kernels, n x n.
    pub f_hat: ScheduleMatrix,
    pub h_hat: ScheduleMatrix,
    pub k_hat: ScheduleMatrix,
    pub m_hat: ScheduleMatrix,
    /// Costate couplings of the leader channel, n x k2.
    pub n1_hat: ScheduleMatrix,
    pub n2_hat: ScheduleMatrix,
    /// Curvature nodes where a pure-feedback kernel was zeroed instead of
    /// inverted; the coupled solve must prove these benign.
    pub omega1_singular_used: BTreeSet<usize>,
}

pub fn build_hats(
    vs: &ValidatedSpec,
    p1: &ScheduleMatrix,
    omega1: &OmegaSchedule,
) -> Result<HatCoefficients> {
    let g = &vs.grid;
    let d = g.lag_steps;
    let last = g.last();
    let ext = g.ext_len();
    let (n, k2) = (vs.n, vs.k2);

    let mut a2_hat = ScheduleMatrix::zeros(n, n, ext);
    let mut a2_tilde = ScheduleMatrix::zeros(n, n, ext);
    let mut c2_hat = ScheduleMatrix::zeros(n, n, ext);
    let mut c2_tilde = ScheduleMatrix::zeros(n, n, ext);
    let mut b_hat = ScheduleMatrix::zeros(n, k2, ext);
    let mut d_hat = ScheduleMatrix::zeros(n, k2, ext);
    let mut f_hat = ScheduleMatrix::zeros(n, n, ext);
    let mut h_hat = ScheduleMatrix::zeros(n, n, ext);
    let mut k_hat = ScheduleMatrix::zeros(n, n, ext);
    let mut m_hat = ScheduleMatrix::zeros(n, n, ext);
    let mut n1_hat = ScheduleMatrix::zeros(n, k2, ext);
    let mut n2_hat = ScheduleMatrix::zeros(n, k2, ext);
    let mut recorded = BTreeSet::new();

    for j in 0..ext {
        let b1 = vs.b1_lag.at(j);
        let d1 = vs.d1_lag.at(j);
        if j < d {
            // feedback not yet active: loadings pass through untouched
            a2_hat.vals[j] = vs.a_lag.at(j).clone();
            c2_hat.vals[j] = vs.c_lag.at(j).clone();
            b_hat.vals[j] = vs.b2_lag.at(j).clone();
            d_hat.vals[j] = vs.d2_lag.at(j).clone();
        } else {
            let m = j - d;
            let d1t_p1 = d1.transpose() * p1.at(j);
            let y_c = &d1t_p1 * vs.c_lag.at(j);
            let y_d2 = &d1t_p1 * vs.d2_lag.at(j);
            let x_c = omega1.solve(m, &y_c)?;
            let x_d2 = omega1.solve(m, &y_d2)?;
            a2_hat.vals[j] = vs.a_lag.at(j) - b1 * &x_c;
            c2_hat.vals[j] = vs.c_lag.at(j) - d1 * &x_c;
            b_hat.vals[j] = vs.b2_lag.at(j) - b1 * &x_d2;
            d_hat.vals[j] = vs.d2_lag.at(j) - d1 * &x_d2;

            let z_b = omega1.solve_or_zero(m, &b1.transpose(), &mut recorded);
            let z_d = omega1.solve_or_zero(m, &d1.transpose(), &mut recorded);
            f_hat.vals[j] = -(b1 * &z_b);
            h_hat.vals[j] = -(b1 * &z_d);
            k_hat.vals[j] = -(d1 * &z_b);
            m_hat.vals[j] = -(d1 * &z_d);

            a2_tilde.vals[j] = a2_hat.vals[j].clone();
            c2_tilde.vals[j] = c2_hat.vals[j].clone();
        }

        // costate couplings; the first reads one lag ahead and applies the
        // curvature at j itself
        if j + d <= last {
            let jd = j + d;
            let p1_d2 = p1.at(jd) * vs.d2_lag.at(jd);
            let clag_t_p1 = vs.c_lag.at(jd).transpose() * p1.at(jd);
            let y2 = vs.d1_lag.at(jd).transpose() * &p1_d2;
            let inner = omega1.solve_or_zero(j, &y2, &mut recorded);
            n1_hat.vals[j] =
                -(vs.c_lag.at(jd).transpose() * &p1_d2) + &clag_t_p1 * vs.d1_lag.at(jd) * inner;
        }
        if j <= last {
            n2_hat.vals[j] =
                -(p1.at(j) * vs.b2_lag.at(j)) - vs.c.at(j).transpose() * p1.at(j) * vs.d2_lag.at(j);
        }
    }

    Ok(HatCoefficients {
        a2_hat,
        a2_tilde,
        c2_hat,
        c2_tilde,
        b_hat,
        d_hat,
        f_hat,
        h_hat,
        k_hat,
        m_hat,
        n1_hat,
        n2_hat,
        omega1_singular_used: recorded,
    })
}

/// Drift/diffusion blocks of the doubled system, one value per extended-grid
/// node. Single letters follow the block roles: `a*` multiply the doubled
/// state at t, t (conditioned), and t - dl; `b`/`c`/`c_bar` multiply the
/// conditioned costate pair; `d`/`d_bar` multiply the lagged leader control;
/// `g1`/`g2` couple the costate source to the leader control; `e` is the
/// curvature correction block; `m_drift`/`m_diff` carry the control-history
/// terms active inside the first lag window.
#[derive(Debug, Clone)]
pub struct StackedCoefficients {
    pub a1: ScheduleMatrix,
    pub a2: ScheduleMatrix,
    pub a3: ScheduleMatrix,
    pub b: ScheduleMatrix,
    pub c: ScheduleMatrix,
    pub a1_bar: ScheduleMatrix,
    pub a2_bar: ScheduleMatrix,
    pub a3_bar: ScheduleMatrix,
    pub c_bar: ScheduleMatrix,
    pub d: ScheduleMatrix,
    pub d_bar: ScheduleMatrix,
    pub g1: ScheduleMatrix,
    pub g2: ScheduleMatrix,
    pub e: ScheduleMatrix,
    pub m_drift: Vec<DVector<f64>>,
    pub m_diff: Vec<DVector<f64>>,
}

fn block2(
    tl: &DMatrix<f64>,
    tr: &DMatrix<f64>,
    bl: &DMatrix<f64>,
    br: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = tl.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(tl);
    out.view_mut((0, n), (n, n)).copy_from(tr);
    out.view_mut((n, 0), (n, n)).copy_from(bl);
    out.view_mut((n, n), (n, n)).copy_from(br);
    out
}

fn stack2(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let n = top.nrows();
    let c = top.ncols();
    let mut out = DMatrix::zeros(2 * n, c);
    out.view_mut((0, 0), (n, c)).copy_from(top);
    out.view_mut((n, 0), (n, c)).copy_from(bottom);
    out
}

pub fn build_calligraphic(
    vs: &ValidatedSpec,
    hats: &HatCoefficients,
    p2: &ScheduleMatrix,
    omega2: &OmegaSchedule,
) -> Result<StackedCoefficients> {
    let g = &vs.grid;
    let d = g.lag_steps;
    let last = g.last();
    let ext = g.ext_len();
    let (n, k2) = (vs.n, vs.k2);
    let zn = DMatrix::<f64>::zeros(n, n);
    let znk = DMatrix::<f64>::zeros(n, k2);

    let mut st = StackedCoefficients {
        a1: ScheduleMatrix::zeros(2 * n, 2 * n, ext),
        a2: ScheduleMatrix::zeros(2 * n, 2 * n, ext),
        a3: ScheduleMatrix::zeros(2 * n, 2 * n, ext),
        b: ScheduleMatrix::zeros(2 * n, 2 * n, ext),
        c: ScheduleMatrix::zeros(2 * n, 2 * n, ext),
        a1_bar: ScheduleMatrix::zeros(2 * n, 2 * n, ext),
        a2_bar: ScheduleMatrix::zeros(2 * n, 2 * n, ext),
        a3_bar: ScheduleMatrix::zeros(2 * n, 2 * n, ext),
        c_bar: ScheduleMatrix::zeros(2 * n, 2 * n, ext),
        d: ScheduleMatrix::zeros(2 * n, k2, ext),
        d_bar: ScheduleMatrix::zeros(2 * n, k2, ext),
        g1: ScheduleMatrix::zeros(2 * n, k2, ext),
        g2: ScheduleMatrix::zeros(2 * n, k2, ext),
        e: ScheduleMatrix::zeros(2 * n, 2 * n, ext),
        m_drift: vec![DVector::zeros(2 * n); ext],
        m_diff: vec![DVector::zeros(2 * n); ext],
    };

    for k in 0..ext {
        let p2k = p2.at(k);
        let f = hats.f_hat.at(k);
        let h = hats.h_hat.at(k);
        let kk = hats.k_hat.at(k);
        let mm = hats.m_hat.at(k);
        let c2 = hats.c2_hat.at(k);
        let ck = vs.c.at(k);

        st.a1.vals[k] = block2(vs.a.at(k), &zn, &zn, vs.a.at(k));
        st.a1_bar.vals[k] = block2(ck, &zn, &zn, ck);

        let kt_p2 = kk.transpose() * p2k;
        let mt_p2 = mm.transpose() * p2k;
        st.a2.vals[k] = block2(&zn, &(f.transpose() * p2k + &kt_p2 * ck), &zn, &zn);
        st.a2_bar.vals[k] = block2(&zn, &(h.transpose() * p2k + &mt_p2 * ck), &zn, &zn);
        st.a3.vals[k] = block2(hats.a2_tilde.at(k), &(&kt_p2 * c2), &zn, hats.a2_hat.at(k));
        st.a3_bar.vals[k] = block2(hats.c2_tilde.at(k), &(&mt_p2 * c2), &zn, c2);
        st.b.vals[k] = block2(&(&kt_p2 * kk), &f.transpose(), f, &zn);
        st.c.vals[k] = block2(&(&kt_p2 * mm), &kk.transpose(), h, &zn);
        st.c_bar.vals[k] = block2(&(&mt_p2 * mm), &mm.transpose(), mm, &zn);
        st.d.vals[k] = stack2(&(&kt_p2 * hats.d_hat.at(k)), hats.b_hat.at(k));
        st.d_bar.vals[k] = stack2(&(&mt_p2 * hats.d_hat.at(k)), hats.d_hat.at(k));
        st.g2.vals[k] = stack2(hats.n2_hat.at(k), &znk);

        if k + d <= last {
            let jd = k + d;
            let c2f = hats.c2_hat.at(jd);
            let c2t_p2 = c2f.transpose() * p2.at(jd);
            let coupling = &c2t_p2 * hats.d_hat.at(jd);
            st.g1.vals[k] = stack2(hats.n1_hat.at(k), &(-&coupling));
            // curvature correction block, lazy in the bracket
            let y = hats.d_hat.at(jd).transpose() * p2.at(jd) * c2f;
            if !linalg::is_exactly_zero(&y) {
                let x = omega2.solve(k, &y)?;
                st.e.vals[k] = block2(&zn, &zn, &zn, &(-(&coupling * x)));
            }
        } else {
            st.g1.vals[k] = stack2(hats.n1_hat.at(k), &znk);
        }

        if k < d {
            let eta = vs.eta1_at(k as isize - d as isize);
            let d1_eta = vs.d1_lag.at(k) * eta;
            st.m_drift[k] = DVector::from_iterator(
                2 * n,
                (kk.transpose() * p2k * &d1_eta)
                    .iter()
                    .chain((vs.b1_lag.at(k) * eta).iter())
                    .cloned(),
            );
            st.m_diff[k] = DVector::from_iterator(
                2 * n,
                (mm.transpose() * p2k * &d1_eta)
                    .iter()
                    .chain(d1_eta.iter())
                    .cloned(),
            );
        }
    }

    // inside the first lag window the costate-coupled blocks must vanish,
    // otherwise the conditional-mean substitutions downstream would need
    // costate values that do not exist there
    for k in 0..d.min(ext) {
        for (name, sched) in [
            ("a2", &st.a2),
            ("a2_bar", &st.a2_bar),
            ("b", &st.b),
            ("c", &st.c),
            ("c_bar", &st.c_bar),
        ] {
            if linalg::max_abs(sched.at(k)) != 0.0 {
                return Err(SolverError::GridMismatch(format!(
                    "stacked block {name} nonzero at node {k} inside the lag window"
                )));
            }
        }
    }

    Ok(st)
}

/// The three quadratic-update kernels of the boundary-diagonal formula,
/// assembled at one node from the stacked blocks and the current L value.
#[derive(Debug, Clone)]
pub struct XiTriple {
    pub xi1: DMatrix<f64>,
    pub xi2: DMatrix<f64>,
    pub xi3: DMatrix<f64>,
}

/// Assemble the kernels at node `j` (requires j >= d so the lagged
/// curvature exists). `l` is the L value at node j.
pub fn build_xi(
    vs: &ValidatedSpec,
    st: &StackedCoefficients,
    omega3: &OmegaSchedule,
    l: &DMatrix<f64>,
    j: usize,
) -> Result<XiTriple> {
    let d = vs.grid.lag_steps;
    if j < d {
        return Err(SolverError::IndexOutOfRange {
            index: j as isize,
            context: "xi kernels need one full lag of history".to_string(),
        });
    }
    let m = j - d;
    let two_n = 2 * vs.n;
    let eye = DMatrix::<f64>::identity(two_n, two_n);
    let t = vs.grid.t(j);

    // resolvent of the diffusion feedback loop
    let res = &eye - l * st.c_bar.at(j);
    let rc = linalg::rcond(&res);
    if !rc.is_finite() || rc < crate::tol::RESOLVENT_RCOND_MIN {
        return Err(SolverError::SingularResolvent { node: j, t, rcond: rc });
    }
    let lu = res.lu();
    let solve_res = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        lu.solve(rhs)
            .ok_or(SolverError::SingularResolvent { node: j, t, rcond: rc })
    };

    // shared pieces
    let u = st.a1_bar.at(j) + st.a2_bar.at(j) + st.c.at(j).transpose() * l;
    let rl_u = solve_res(&(l * &u))?;
    let rl_ct = solve_res(&(l * st.c.at(j).transpose()))?;
    let w = st.g2.at(j).transpose() - st.d.at(j).transpose() * l;
    let om_w = omega3.solve(m, &w)?;
    let om_dt = omega3.solve(m, &st.d.at(j).transpose())?;

    let xi1 = st.a2.at(j) + st.b.at(j) * l + st.c.at(j) * &rl_u + st.d.at(j) * &om_w;
    let xi2 = -st.b.at(j) - st.c.at(j) * &rl_ct + st.d.at(j) * &om_dt;
    let mut xi3 = w.transpose() * &om_w - u.transpose() * &rl_u - st.a2.at(j).transpose() * l
        - l * st.a2.at(j)
        - l * st.b.at(j) * l
        + st.a1_bar.at(j).transpose() * l * st.a1_bar.at(j);
    let asym = linalg::asymmetry(&xi3);
    let bound = 1e-9 * (1.0 + linalg::max_abs(&xi3));
    if asym > bound {
        return Err(SolverError::NumericalBlowup {
            node: j,
            t,
            norm: asym,
            limit: bound,
        });
    }
    linalg::symmetrize(&mut xi3);

    Ok(XiTriple { xi1, xi2, xi3 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_spec;
    use crate::riccati::{compute_omega1, compute_omegas, solve_p1, solve_p2};

    // data with active feedback in the scalar lag-cancelling family
    fn spec() -> crate::model::GameSpec {
        use crate::schedule::{MatSpec, VecSpec};
        use nalgebra::dmatrix;
        crate::model::GameSpec {
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

    #[test]
    fn hats_reduce_to_raw_loadings_before_the_lag() {
        let vs = validate_spec(&spec(), 39).unwrap();
        let p1 = solve_p1(&vs, false).unwrap();
        let w1 = compute_omega1(&vs, &p1);
        let hats = build_hats(&vs, &p1, &w1).unwrap();
        let d = vs.grid.lag_steps;
        for j in 0..d {
            assert_eq!(hats.a2_hat.at(j)[(0, 0)], 0.0); // a_lag = 0
            assert_eq!(hats.b_hat.at(j)[(0, 0)], 0.3);
            assert_eq!(hats.d_hat.at(j)[(0, 0)], 1.0);
            assert_eq!(hats.f_hat.at(j)[(0, 0)], 0.0);
            assert_eq!(hats.m_hat.at(j)[(0, 0)], 0.0);
            assert_eq!(hats.a2_tilde.at(j)[(0, 0)], 0.0);
        }
        assert!(hats.omega1_singular_used.is_empty());
        // scalar identities on the active window
        for j in d..=vs.grid.last() {
            let m = j - d;
            let w = w1.at(m)[(0, 0)];
            let p = p1.at(j)[(0, 0)];
            let expect_f = -0.4 * 0.4 / w;
            assert!((hats.f_hat.at(j)[(0, 0)] - expect_f).abs() < 1e-12);
            let expect_d = 1.0 - 1.5 * (1.5 * p * 1.0) / w;
            assert!((hats.d_hat.at(j)[(0, 0)] - expect_d).abs() < 1e-12);
        }
    }

    #[test]
    fn stacked_blocks_vanish_inside_lag_window() {
        let vs = validate_spec(&spec(), 39).unwrap();
        let p1 = solve_p1(&vs, false).unwrap();
        let w1 = compute_omega1(&vs, &p1);
        let hats = build_hats(&vs, &p1, &w1).unwrap();
        let p2 = solve_p2(&vs, &hats, false).unwrap();
        let (_, w2, w3) = compute_omegas(&vs, &p1, &p2, &hats);
        let st = build_calligraphic(&vs, &hats, &p2, &w2).unwrap();
        let d = vs.grid.lag_steps;
        for k in 0..d {
            assert_eq!(linalg::max_abs(st.b.at(k)), 0.0);
            assert_eq!(linalg::max_abs(st.c.at(k)), 0.0);
            assert_eq!(linalg::max_abs(st.c_bar.at(k)), 0.0);
            // history forcing active only here
            assert!(st.m_drift[k][1] != 0.0);
        }
        for k in d..vs.grid.ext_len() {
            assert_eq!(st.m_drift[k].amax(), 0.0);
        }
        // xi kernels reject sub-lag nodes
        let l = DMatrix::<f64>::zeros(2, 2);
        assert!(build_xi(&vs, &st, &w3, &l, 0).is_err());
        let xi = build_xi(&vs, &st, &w3, &l, d).unwrap();
        assert_eq!(xi.xi1.nrows(), 2);
        // at L = 0 the third kernel collapses to the curvature outer product
        let g2 = st.g2.at(d);
        let expect = g2 * w3.solve(0, &g2.transpose()).unwrap();
        assert!((xi.xi3.clone() - expect).amax() < 1e-14);
    }
}
