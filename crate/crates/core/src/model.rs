//! Two-player game data and its validated, grid-sampled form.
//!
//! Dynamics (one-dimensional Brownian motion W):
//!
//!   dX = [ A X + A_ X(t-dl) + B1_ u1(t-dl) + B2_ u2(t-dl) ] dt
//!      + [ C X + C_ X(t-dl) + D1_ u1(t-dl) + D2_ u2(t-dl) ] dW
//!
//! where `_` marks a coefficient acting on a lagged argument and dl is the
//! common delay. Player i pays a quadratic running cost with weights Qi on
//! the state, Qi_ on the lagged state, Ri on the control, Ri_ on the lagged
//! control, plus a terminal weight Gi. Player 1 reacts to player 2's
//! announced strategy; player 2 announces first.
//!
//! `validate_spec` checks dimensions and symmetry, samples every schedule
//! onto the extended grid (zero past the horizon), and samples the initial
//! state/control histories onto the lag window.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SolverError};
use crate::grid::TimeGrid;
use crate::linalg;
use crate::riccati::OmegaSchedule;
use crate::schedule::{MatSpec, ScheduleMatrix, VecSpec};
use crate::tol;

#[derive(Debug, Clone)]
pub struct GameSpec {
    pub horizon: f64,
    pub delay: f64,
    /// State dimension.
    pub n: usize,
    /// Follower control dimension.
    pub k1: usize,
    /// Leader control dimension.
    pub k2: usize,

    pub a: MatSpec,
    pub a_lag: MatSpec,
    pub c: MatSpec,
    pub c_lag: MatSpec,
    pub b1_lag: MatSpec,
    pub d1_lag: MatSpec,
    pub b2_lag: MatSpec,
    pub d2_lag: MatSpec,

    pub q1: MatSpec,
    pub q1_lag: MatSpec,
    pub q2: MatSpec,
    pub q2_lag: MatSpec,
    pub r1: MatSpec,
    pub r1_lag: MatSpec,
    pub r2: MatSpec,
    pub r2_lag: MatSpec,
    pub g1: DMatrix<f64>,
    pub g2: DMatrix<f64>,

    /// Initial state trajectory on [-dl, 0].
    pub phi: VecSpec,
    /// Initial follower control on [-dl, 0).
    pub eta1: VecSpec,
    /// Initial leader control on [-dl, 0).
    pub eta2: VecSpec,
}

/// Everything sampled and checked; the form all solver stages consume.
#[derive(Debug, Clone)]
pub struct ValidatedSpec {
    pub grid: TimeGrid,
    pub n: usize,
    pub k1: usize,
    pub k2: usize,

    pub a: ScheduleMatrix,
    pub a_lag: ScheduleMatrix,
    pub c: ScheduleMatrix,
    pub c_lag: ScheduleMatrix,
    pub b1_lag: ScheduleMatrix,
    pub d1_lag: ScheduleMatrix,
    pub b2_lag: ScheduleMatrix,
    pub d2_lag: ScheduleMatrix,

    pub q1: ScheduleMatrix,
    pub q1_lag: ScheduleMatrix,
    pub q2: ScheduleMatrix,
    pub q2_lag: ScheduleMatrix,
    pub r1: ScheduleMatrix,
    pub r1_lag: ScheduleMatrix,
    pub r2: ScheduleMatrix,
    pub r2_lag: ScheduleMatrix,
    pub g1: DMatrix<f64>,
    pub g2: DMatrix<f64>,

    /// Nodes -d..=0; index j holds node j - d.
    pub phi_hist: Vec<DVector<f64>>,
    /// Nodes -d..=-1; index j holds node j - d.
    pub eta1_hist: Vec<DVector<f64>>,
    pub eta2_hist: Vec<DVector<f64>>,
}

impl ValidatedSpec {
    /// Initial state at history node k, -d <= k <= 0.
    pub fn phi_at(&self, k: isize) -> &DVector<f64> {
        let d = self.grid.lag_steps as isize;
        assert!(-d <= k && k <= 0, "phi history node {k} out of [-{d}, 0]");
        &self.phi_hist[(k + d) as usize]
    }

    /// Follower control history at node k, -d <= k <= -1.
    pub fn eta1_at(&self, k: isize) -> &DVector<f64> {
        let d = self.grid.lag_steps as isize;
        assert!(-d <= k && k < 0, "eta1 history node {k} out of [-{d}, -1]");
        &self.eta1_hist[(k + d) as usize]
    }

    /// Leader control history at node k, -d <= k <= -1.
    pub fn eta2_at(&self, k: isize) -> &DVector<f64> {
        let d = self.grid.lag_steps as isize;
        assert!(-d <= k && k < 0, "eta2 history node {k} out of [-{d}, -1]");
        &self.eta2_hist[(k + d) as usize]
    }
}

fn check_symmetric_schedule(s: &mut ScheduleMatrix, name: &str, last: usize) -> Result<()> {
    for k in 0..=last {
        let asym = linalg::asymmetry(s.at(k));
        if asym > tol::SYMMETRY_ABS {
            return Err(SolverError::NonSymmetricWeight {
                name: name.to_string(),
                asymmetry: asym,
            });
        }
    }
    for m in s.vals.iter_mut() {
        linalg::symmetrize(m);
    }
    Ok(())
}

pub fn validate_spec(spec: &GameSpec, n_steps: usize) -> Result<ValidatedSpec> {
    let grid = TimeGrid::new(spec.horizon, spec.delay, n_steps)?;
    let (n, k1, k2) = (spec.n, spec.k1, spec.k2);
    if n == 0 || k1 == 0 || k2 == 0 {
        return Err(SolverError::DimensionMismatch {
            name: "dimensions".to_string(),
            expected: "n, k1, k2 >= 1".to_string(),
            got: format!("n={n}, k1={k1}, k2={k2}"),
        });
    }

    let checks: [(&str, &MatSpec, usize, usize); 16] = [
        ("a", &spec.a, n, n),
        ("a_lag", &spec.a_lag, n, n),
        ("c", &spec.c, n, n),
        ("c_lag", &spec.c_lag, n, n),
        ("b1_lag", &spec.b1_lag, n, k1),
        ("d1_lag", &spec.d1_lag, n, k1),
        ("b2_lag", &spec.b2_lag, n, k2),
        ("d2_lag", &spec.d2_lag, n, k2),
        ("q1", &spec.q1, n, n),
        ("q1_lag", &spec.q1_lag, n, n),
        ("q2", &spec.q2, n, n),
        ("q2_lag", &spec.q2_lag, n, n),
        ("r1", &spec.r1, k1, k1),
        ("r1_lag", &spec.r1_lag, k1, k1),
        ("r2", &spec.r2, k2, k2),
        ("r2_lag", &spec.r2_lag, k2, k2),
    ];
    for (name, ms, r, c) in checks {
        ms.validate(name, r, c)?;
    }
    for (name, g) in [("g1", &spec.g1), ("g2", &spec.g2)] {
        if g.nrows() != n || g.ncols() != n {
            return Err(SolverError::DimensionMismatch {
                name: name.to_string(),
                expected: format!("{n}x{n}"),
                got: format!("{}x{}", g.nrows(), g.ncols()),
            });
        }
        let asym = linalg::asymmetry(g);
        if asym > tol::SYMMETRY_ABS {
            return Err(SolverError::NonSymmetricWeight {
                name: name.to_string(),
                asymmetry: asym,
            });
        }
    }
    spec.phi.validate("phi", n)?;
    spec.eta1.validate("eta1", k1)?;
    spec.eta2.validate("eta2", k2)?;

    let last = grid.last();
    let mut q1 = spec.q1.sample(&grid, n, n);
    let mut q1_lag = spec.q1_lag.sample(&grid, n, n);
    let mut q2 = spec.q2.sample(&grid, n, n);
    let mut q2_lag = spec.q2_lag.sample(&grid, n, n);
    let mut r1 = spec.r1.sample(&grid, k1, k1);
    let mut r1_lag = spec.r1_lag.sample(&grid, k1, k1);
    let mut r2 = spec.r2.sample(&grid, k2, k2);
    let mut r2_lag = spec.r2_lag.sample(&grid, k2, k2);
    check_symmetric_schedule(&mut q1, "q1", last)?;
    check_symmetric_schedule(&mut q1_lag, "q1_lag", last)?;
    check_symmetric_schedule(&mut q2, "q2", last)?;
    check_symmetric_schedule(&mut q2_lag, "q2_lag", last)?;
    check_symmetric_schedule(&mut r1, "r1", last)?;
    check_symmetric_schedule(&mut r1_lag, "r1_lag", last)?;
    check_symmetric_schedule(&mut r2, "r2", last)?;
    check_symmetric_schedule(&mut r2_lag, "r2_lag", last)?;

    let mut g1 = spec.g1.clone();
    let mut g2 = spec.g2.clone();
    linalg::symmetrize(&mut g1);
    linalg::symmetrize(&mut g2);

    let d = grid.lag_steps as isize;
    Ok(ValidatedSpec {
        n,
        k1,
        k2,
        a: spec.a.sample(&grid, n, n),
        a_lag: spec.a_lag.sample(&grid, n, n),
        c: spec.c.sample(&grid, n, n),
        c_lag: spec.c_lag.sample(&grid, n, n),
        b1_lag: spec.b1_lag.sample(&grid, n, k1),
        d1_lag: spec.d1_lag.sample(&grid, n, k1),
        b2_lag: spec.b2_lag.sample(&grid, n, k2),
        d2_lag: spec.d2_lag.sample(&grid, n, k2),
        q1,
        q1_lag,
        q2,
        q2_lag,
        r1,
        r1_lag,
        r2,
        r2_lag,
        g1,
        g2,
        phi_hist: spec.phi.sample_history(&grid, -d, 0),
        eta1_hist: spec.eta1.sample_history(&grid, -d, -1),
        eta2_hist: spec.eta2.sample_history(&grid, -d, -1),
        grid,
    })
}

/// Result of checking one structural identity of the model data against a
/// solved quadratic-cost kernel.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub name: String,
    pub max_residual: f64,
    pub tol: f64,
    pub pass: bool,
    /// Node where the residual peaks.
    pub worst_node: usize,
    /// Nodes excluded because the required inverse does not exist there.
    pub skipped_nodes: Vec<usize>,
}

impl AssumptionReport {
    fn from_scan(name: &str, residuals: &[(usize, f64)], tol: f64, skipped: Vec<usize>) -> Self {
        let (worst_node, max_residual) = residuals
            .iter()
            .cloned()
            .fold((0usize, 0.0f64), |acc, (k, r)| if r > acc.1 { (k, r) } else { acc });
        AssumptionReport {
            name: name.to_string(),
            max_residual,
            tol,
            pass: max_residual <= tol,
            worst_node,
            skipped_nodes: skipped,
        }
    }
}

fn assumption_tol(p: &ScheduleMatrix, tol_override: Option<f64>) -> f64 {
    tol_override.unwrap_or_else(|| tol::ASSUMPTION_SCALE * (1.0 + p.max_norm()))
}

/// Compatibility of the drift/diffusion cross terms with the follower
/// kernel: C^T P1 D1_ + P1 B1_ = 0 and C^T P1 C_ + P1 A_ = 0 on [0, T].
pub fn check_a1(vs: &ValidatedSpec, p1: &ScheduleMatrix, tol_override: Option<f64>) -> AssumptionReport {
    let mut residuals = Vec::with_capacity(vs.grid.len());
    for k in 0..=vs.grid.last() {
        let ct_p = vs.c.at(k).transpose() * p1.at(k);
        let r1 = &ct_p * vs.d1_lag.at(k) + p1.at(k) * vs.b1_lag.at(k);
        let r2 = &ct_p * vs.c_lag.at(k) + p1.at(k) * vs.a_lag.at(k);
        residuals.push((k, linalg::max_abs(&r1).max(linalg::max_abs(&r2))));
    }
    AssumptionReport::from_scan(
        "follower cross-term cancellation",
        &residuals,
        assumption_tol(p1, tol_override),
        vec![],
    )
}

/// Same cross-term compatibility for the leader kernel, including the
/// leader's own control channel: C^T P2 D1_ + P2 B1_, C^T P2 C_ + P2 A_,
/// and C^T P2 D2_ + P2 B2_ all vanish on [0, T].
pub fn check_a2(vs: &ValidatedSpec, p2: &ScheduleMatrix, tol_override: Option<f64>) -> AssumptionReport {
    let mut residuals = Vec::with_capacity(vs.grid.len());
    for k in 0..=vs.grid.last() {
        let ct_p = vs.c.at(k).transpose() * p2.at(k);
        let r1 = &ct_p * vs.d1_lag.at(k) + p2.at(k) * vs.b1_lag.at(k);
        let r2 = &ct_p * vs.c_lag.at(k) + p2.at(k) * vs.a_lag.at(k);
        let r3 = &ct_p * vs.d2_lag.at(k) + p2.at(k) * vs.b2_lag.at(k);
        residuals.push((
            k,
            linalg::max_abs(&r1)
                .max(linalg::max_abs(&r2))
                .max(linalg::max_abs(&r3)),
        ));
    }
    AssumptionReport::from_scan(
        "leader cross-term cancellation",
        &residuals,
        assumption_tol(p2, tol_override),
        vec![],
    )
}

/// Exact-cancellation identities that collapse the lag corrections:
/// I - D1_(t) W^-1(t-dl) D1_(t)^T P1(t) = 0 and
/// A_(t) - B1_(t) W^-1(t-dl) D1_(t)^T P1(t) C_(t) = 0 for t in [dl, T],
/// where W is the follower's control curvature. Nodes where W is singular
/// are skipped and reported.
pub fn check_a3(
    vs: &ValidatedSpec,
    p1: &ScheduleMatrix,
    omega1: &OmegaSchedule,
    tol_override: Option<f64>,
) -> AssumptionReport {
    let d = vs.grid.lag_steps;
    let n = vs.n;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut residuals = Vec::new();
    let mut skipped = Vec::new();
    for k in d..=vs.grid.last() {
        let m = k - d;
        if !omega1.is_pd(m) {
            skipped.push(k);
            continue;
        }
        let d1t_p1 = vs.d1_lag.at(k).transpose() * p1.at(k);
        let x = omega1
            .solve(m, &d1t_p1)
            .expect("positive definite node must solve");
        let r1 = &eye - vs.d1_lag.at(k) * &x;
        let r2 = vs.a_lag.at(k) - vs.b1_lag.at(k) * &x * vs.c_lag.at(k);
        residuals.push((k, linalg::max_abs(&r1).max(linalg::max_abs(&r2))));
    }
    AssumptionReport::from_scan(
        "lag correction collapse",
        &residuals,
        assumption_tol(p1, tol_override),
        skipped,
    )
}

/// Which scalar benchmark family the data falls into, if any. Family 1
/// admits closed-form kernels for both players with a nonzero leader
/// kernel; family 2 zeroes the leader kernel data so P2 vanishes
/// identically.
#[derive(Debug, Clone)]
pub struct OneDimReport {
    pub case1: bool,
    pub case2: bool,
    pub details: Vec<String>,
}

pub fn check_one_dim_conditions(vs: &ValidatedSpec) -> Result<OneDimReport> {
    if vs.n != 1 || vs.k1 != 1 || vs.k2 != 1 {
        return Err(SolverError::NotOneDimensional {
            n: vs.n,
            k1: vs.k1,
            k2: vs.k2,
        });
    }
    let g = &vs.grid;
    let d = g.lag_steps;
    let last = g.last();
    let s = |sched: &ScheduleMatrix, k: usize| sched.at(k)[(0, 0)];
    let tol_eq = 1e-12;

    let mut details = Vec::new();
    let mut scan = |label: &str, ok: bool| -> bool {
        details.push(format!("{label}: {}", if ok { "holds" } else { "fails" }));
        ok
    };

    let mut b1_pair = 0.0f64;
    let mut alag_pair = 0.0f64;
    let mut b2_pair = 0.0f64;
    for k in 0..=last {
        b1_pair = b1_pair.max((s(&vs.b1_lag, k) + s(&vs.c, k) * s(&vs.d1_lag, k)).abs());
        alag_pair = alag_pair.max((s(&vs.a_lag, k) + s(&vs.c, k) * s(&vs.c_lag, k)).abs());
        b2_pair = b2_pair.max((s(&vs.b2_lag, k) + s(&vs.c, k) * s(&vs.d2_lag, k)).abs());
    }
    let mut d1_nonzero = true;
    let mut r1_pair = 0.0f64;
    let mut omega3_pos = true;
    for k in d..=last {
        d1_nonzero &= s(&vs.d1_lag, k) != 0.0;
        r1_pair = r1_pair.max((s(&vs.r1_lag, k) + s(&vs.r1, k - d)).abs());
        omega3_pos &= s(&vs.r2, k - d) + s(&vs.r2_lag, k) > 0.0;
    }
    let mut q2_zero = 0.0f64;
    for k in 0..=last {
        let q2lag_fwd = if k + d <= last { s(&vs.q2_lag, k + d) } else { 0.0 };
        q2_zero = q2_zero.max((s(&vs.q2, k) + q2lag_fwd).abs());
    }

    let c_b1 = scan("diffusion pairing of follower channel (b1_lag + c*d1_lag = 0)", b1_pair <= tol_eq);
    let c_alag = scan("diffusion pairing of lagged state (a_lag + c*c_lag = 0)", alag_pair <= tol_eq);
    let c_b2 = scan("diffusion pairing of leader channel (b2_lag + c*d2_lag = 0)", b2_pair <= tol_eq);
    let c_d1 = scan("follower diffusion channel nonzero on [dl, T]", d1_nonzero);
    let c_r1 = scan("follower control weights cancel across the lag (r1_lag(t) + r1(t-dl) = 0)", r1_pair <= tol_eq);
    let c_r2 = scan("leader control curvature positive (r2(t-dl) + r2_lag(t) > 0)", omega3_pos);
    let c_g2 = scan("terminal leader weight zero", linalg::max_abs(&vs.g2) == 0.0);
    let c_q2 = scan("leader state weights cancel across the lag (q2 + q2_lag(t+dl) = 0)", q2_zero <= tol_eq);

    let shared = c_b1 && c_alag && c_d1 && c_r1 && c_r2;
    Ok(OneDimReport {
        case1: shared && c_b2,
        case2: shared && c_g2 && c_q2,
        details,
    })
}
