//! End-to-end solve: validate the model, march both quadratic-cost
//! kernels, assemble the doubled-system coefficients, solve the coupled
//! backward system, and synthesize the feedback gains.

use crate::coupled::{residual_check, solve_l_pi, CoupledSolution};
use crate::error::{Result, SolverError};
use crate::gains::{
    compute_follower_gains, compute_leader_gain, compute_substitutions, GainSchedule,
    SubstitutionTables,
};
use crate::linalg;
use crate::model::{
    check_a1, check_a2, check_a3, check_one_dim_conditions, validate_spec, AssumptionReport,
    GameSpec, OneDimReport, ValidatedSpec,
};
use crate::riccati::{compute_omega1, compute_omegas, solve_p1, solve_p2, RiccatiSolution};
use crate::stacked::{build_calligraphic, build_hats, HatCoefficients, StackedCoefficients};

/// Everything produced by one solve, in dependency order.
pub struct SolveArtifacts {
    pub vs: ValidatedSpec,
    pub riccati: RiccatiSolution,
    pub hats: HatCoefficients,
    pub stacked: StackedCoefficients,
    pub coupled: CoupledSolution,
    pub subs: SubstitutionTables,
    pub gains: GainSchedule,
    /// Structural identities the strategy construction relies on,
    /// evaluated on the solved kernels.
    pub assumptions: Vec<AssumptionReport>,
    /// Scalar benchmark classification; present only when all dimensions
    /// equal one.
    pub one_dim: Option<OneDimReport>,
    /// Worst raw defect of the coupled solution under replay.
    pub residual: f64,
}

impl SolveArtifacts {
    pub fn assumptions_pass(&self) -> bool {
        self.assumptions.iter().all(|a| a.pass)
    }

    /// Residual gate scale: defects are compared against this bound.
    pub fn residual_bound(&self) -> f64 {
        crate::tol::RESIDUAL_SCALE * (1.0 + self.coupled.max_norm())
    }
}

/// A curvature inverse that was unavailable at some node is tolerated only
/// while everything that node feeds is exactly zero; otherwise the solve
/// is rejected at that node.
fn check_singular_nodes(
    vs: &ValidatedSpec,
    hats: &HatCoefficients,
    riccati: &RiccatiSolution,
    coupled: &CoupledSolution,
) -> Result<()> {
    let d = vs.grid.lag_steps;
    let last = vs.grid.last();
    for &m in &hats.omega1_singular_used {
        let j = m + d;
        if j > last {
            continue;
        }
        let p2_zero = linalg::max_abs(riccati.p2.at(j)) == 0.0;
        let l_zero = linalg::max_abs(&coupled.l[j]) == 0.0;
        let pi_zero = (0..=coupled.band(j)).all(|i| linalg::is_exactly_zero(coupled.pi_at(j, j + i)));
        if !(p2_zero && l_zero && pi_zero) {
            return Err(SolverError::OmegaNotPositiveDefinite {
                name: "omega1",
                node: m,
                t: vs.grid.t(m),
                min_eig: f64::NAN,
            });
        }
    }
    Ok(())
}

pub fn solve_all(spec: &GameSpec, n_steps: usize, rk4: bool) -> Result<SolveArtifacts> {
    let vs = validate_spec(spec, n_steps)?;

    let p1 = solve_p1(&vs, rk4)?;
    let omega1 = compute_omega1(&vs, &p1);
    let hats = build_hats(&vs, &p1, &omega1)?;
    let p2 = solve_p2(&vs, &hats, rk4)?;
    let (omega1, omega2, omega3) = compute_omegas(&vs, &p1, &p2, &hats);

    let assumptions = vec![
        check_a1(&vs, &p1, None),
        check_a2(&vs, &p2, None),
        check_a3(&vs, &p1, &omega1, None),
    ];

    let stacked = build_calligraphic(&vs, &hats, &p2, &omega2)?;
    let riccati = RiccatiSolution {
        p1,
        p2,
        omega1,
        omega2,
        omega3,
    };

    let coupled = solve_l_pi(&vs, &stacked, &riccati.omega3)?;
    check_singular_nodes(&vs, &hats, &riccati, &coupled)?;
    let residual = residual_check(&vs, &stacked, &riccati.omega3, &coupled)?;

    let subs = compute_substitutions(&vs, &stacked, &coupled)?;
    let ku2 = compute_leader_gain(&vs, &stacked, &coupled, &riccati.omega3)?;
    let (ku1_now, ku1_pred) =
        compute_follower_gains(&vs, &riccati.p1, &riccati.omega1, &subs, &ku2)?;
    let gains = GainSchedule {
        ku2,
        ku1_now,
        ku1_pred,
    };

    let one_dim = if vs.n == 1 && vs.k1 == 1 && vs.k2 == 1 {
        Some(check_one_dim_conditions(&vs)?)
    } else {
        None
    };

    Ok(SolveArtifacts {
        vs,
        riccati,
        hats,
        stacked,
        coupled,
        subs,
        gains,
        assumptions,
        one_dim,
        residual,
    })
}
