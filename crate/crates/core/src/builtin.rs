//! Two built-in benchmark configurations with known solution structure.
//!
//! Benchmark 1: scalar game whose lagged loadings switch on at the delay
//! and whose combined running weights cancel against the kernel; the
//! coupled system and all gains vanish identically, so equilibrium play
//! is no control at all.
//!
//! Benchmark 2: scalar advertising-style game. The follower kernel has a
//! positive closed form decaying to zero at the horizon, the leader
//! kernel vanishes identically, and the equilibrium controls are
//! nontrivial. The follower's combined control weight degenerates at
//! exactly one node (one lag before the horizon), where every quantity it
//! would scale is exactly zero.

use crate::config::{RawMat, RawMatNode, RawMatTable, RawVec, RunConfig};
use crate::config::{GameSection, GridSection, OutputSection, SimSection, VerifySection};

fn sq(v: f64) -> Option<RawMat> {
    Some(RawMat::Constant(vec![vec![v]]))
}

fn step_at(t: f64, before: f64, after: f64) -> Option<RawMat> {
    Some(RawMat::Table(RawMatTable {
        table: vec![
            RawMatNode {
                t: 0.0,
                value: vec![vec![before]],
            },
            RawMatNode {
                t,
                value: vec![vec![after]],
            },
        ],
    }))
}

fn vec1(v: f64) -> Option<RawVec> {
    Some(RawVec::Constant(vec![v]))
}

/// Scalar benchmark with identically zero equilibrium controls.
pub fn example1_config() -> RunConfig {
    RunConfig {
        game: GameSection {
            state_dim: 1,
            follower_dim: 1,
            leader_dim: 1,
            horizon: 10.0,
            delay: 1.0,
            a: sq(0.0),
            a_lag: sq(0.0),
            c: sq(-1.0),
            c_lag: sq(0.0),
            b1_lag: step_at(1.0, 0.0, 1.0),
            d1_lag: step_at(1.0, 0.0, 1.0),
            b2_lag: step_at(1.0, 0.0, 1.0),
            d2_lag: step_at(1.0, 0.0, 1.0),
            q1: sq(0.1),
            q1_lag: sq(0.0),
            q2: sq(0.1),
            q2_lag: sq(0.0),
            r1: sq(1.0),
            r1_lag: sq(-1.0),
            r2: sq(1.0),
            r2_lag: sq(-0.5),
            g1: Some(vec![vec![1.0]]),
            g2: Some(vec![vec![1.0]]),
            phi: vec1(1.0),
            eta1: vec1(0.0),
            eta2: vec1(0.0),
        },
        grid: GridSection {
            n_steps: 999,
            rk4: false,
        },
        simulation: SimSection::default(),
        verification: VerifySection::default(),
        output: OutputSection {
            directory: "out-example1".to_string(),
            formats: vec!["csv".to_string()],
        },
    }
}

/// Scalar benchmark with a closed-form follower kernel and a vanishing
/// leader kernel. Discount rate 0.02 over horizon 10 with unit delay.
pub fn example2_config() -> RunConfig {
    let gamma: f64 = 0.02;
    let a = -gamma / 2.0;
    let c = -gamma.sqrt() / 2.0;
    let b1 = -2.0 * (-gamma / 2.0).exp();
    let d1 = -b1 / c;
    let b2 = (-gamma / 2.0).exp();
    let d2 = gamma.exp();
    let q1 = 0.05 * (1.0 - (-gamma).exp());
    let r2_lag = -(-gamma / 2.0).exp();

    RunConfig {
        game: GameSection {
            state_dim: 1,
            follower_dim: 1,
            leader_dim: 1,
            horizon: 10.0,
            delay: 1.0,
            a: sq(a),
            a_lag: sq(0.0),
            c: sq(c),
            c_lag: sq(0.0),
            b1_lag: sq(b1),
            d1_lag: sq(d1),
            b2_lag: sq(b2),
            d2_lag: sq(d2),
            q1: sq(q1),
            q1_lag: sq(0.0),
            q2: sq(0.0),
            q2_lag: sq(0.0),
            r1: sq(1.0),
            r1_lag: sq(-1.0),
            r2: sq(1.0),
            r2_lag: sq(r2_lag),
            g1: Some(vec![vec![0.0]]),
            g2: Some(vec![vec![0.0]]),
            phi: vec1(1.0),
            eta1: vec1(0.0),
            eta2: vec1(0.0),
        },
        grid: GridSection {
            n_steps: 999,
            rk4: false,
        },
        simulation: SimSection::default(),
        verification: VerifySection::default(),
        output: OutputSection {
            directory: "out-example2".to_string(),
            formats: vec!["csv".to_string()],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{check_one_dim_conditions, validate_spec};

    #[test]
    fn example1_is_the_cancelling_scalar_family() {
        let cfg = example1_config();
        let spec = cfg.to_game_spec().unwrap();
        let vs = validate_spec(&spec, cfg.grid.n_steps).unwrap();
        assert_eq!(vs.grid.lag_steps, 100);
        let report = check_one_dim_conditions(&vs).unwrap();
        assert!(report.case1, "details: {:?}", report.details);
        assert!(!report.case2); // nonzero terminal leader weight
    }

    #[test]
    fn example2_is_the_degenerate_leader_family() {
        let cfg = example2_config();
        let spec = cfg.to_game_spec().unwrap();
        let vs = validate_spec(&spec, cfg.grid.n_steps).unwrap();
        let report = check_one_dim_conditions(&vs).unwrap();
        assert!(report.case2, "details: {:?}", report.details);
        assert!(!report.case1); // leader loadings do not cancel against c
        // follower loading pair cancels by construction (up to one rounding)
        let pair = spec.b1_lag.value_at(3.0)[(0, 0)]
            + spec.c.value_at(3.0)[(0, 0)] * spec.d1_lag.value_at(3.0)[(0, 0)];
        assert!(pair.abs() < 1e-15, "pair = {pair:e}");
    }

    #[test]
    fn builtin_configs_survive_a_toml_roundtrip() {
        for cfg in [example1_config(), example2_config()] {
            let dumped = cfg.to_toml().unwrap();
            let back = RunConfig::parse(&dumped).unwrap();
            assert_eq!(cfg, back);
        }
    }
}
