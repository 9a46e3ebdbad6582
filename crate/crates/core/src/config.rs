//! TOML run configuration: the game data, grid, simulation, verification,
//! and output blocks. Unknown keys are rejected at every level.
//!
//! Matrix-valued coefficients accept either a plain row-major array
//! (constant in time) or `{ table = [{ t, value }] }` breakpoints applied
//! piecewise-constant from each t onward. Vector-valued initial data use
//! the same two shapes with flat arrays. Omitted coefficients are zero.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolverError};
use crate::model::GameSpec;
use crate::schedule::{MatSpec, VecSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawMat {
    Constant(Vec<Vec<f64>>),
    Table(RawMatTable),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMatTable {
    pub table: Vec<RawMatNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMatNode {
    pub t: f64,
    pub value: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawVec {
    Constant(Vec<f64>),
    Table(RawVecTable),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawVecTable {
    pub table: Vec<RawVecNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawVecNode {
    pub t: f64,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSection {
    pub state_dim: usize,
    pub follower_dim: usize,
    pub leader_dim: usize,
    pub horizon: f64,
    pub delay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_lag: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_lag: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b1_lag: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1_lag: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b2_lag: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d2_lag: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q1: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q1_lag: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q2: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q2_lag: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1_lag: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2_lag: Option<RawMat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g1: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g2: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<RawVec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta1: Option<RawVec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta2: Option<RawVec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub n_steps: usize,
    pub rk4: bool,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            n_steps: 999,
            rk4: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub paths: usize,
    pub seed: u64,
    /// Predictor base nodes; empty means evenly spaced defaults.
    pub checkpoints: Vec<usize>,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            paths: 10_000,
            seed: 42,
            checkpoints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub epsilons: Vec<f64>,
    pub directions: Vec<String>,
    pub follower_se_mult: f64,
    pub leader_se_mult: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            epsilons: vec![0.01, 0.05, 0.1],
            directions: vec![
                "constant".to_string(),
                "ramp".to_string(),
                "pulse".to_string(),
            ],
            follower_se_mult: 3.0,
            leader_se_mult: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: String,
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: "out".to_string(),
            formats: vec!["csv".to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub game: GameSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub simulation: SimSection,
    #[serde(default)]
    pub verification: VerifySection,
    #[serde(default)]
    pub output: OutputSection,
}

fn to_dmatrix(v: &[Vec<f64>], rows: usize, cols: usize, name: &str) -> Result<DMatrix<f64>> {
    if v.len() != rows || v.iter().any(|r| r.len() != cols) {
        return Err(SolverError::DimensionMismatch {
            name: name.to_string(),
            expected: format!("{rows}x{cols}"),
            got: format!(
                "{}x{}",
                v.len(),
                v.first().map_or(0, |r| r.len())
            ),
        });
    }
    Ok(DMatrix::from_fn(rows, cols, |i, j| v[i][j]))
}

fn to_mat_spec(raw: &Option<RawMat>, rows: usize, cols: usize, name: &str) -> Result<MatSpec> {
    match raw {
        None => Ok(MatSpec::zero(rows, cols)),
        Some(RawMat::Constant(v)) => Ok(MatSpec::Constant(to_dmatrix(v, rows, cols, name)?)),
        Some(RawMat::Table(t)) => {
            if t.table.is_empty() {
                return Err(SolverError::DimensionMismatch {
                    name: name.to_string(),
                    expected: "nonempty table".to_string(),
                    got: "empty table".to_string(),
                });
            }
            let mut out = Vec::with_capacity(t.table.len());
            for node in &t.table {
                out.push((node.t, to_dmatrix(&node.value, rows, cols, name)?));
            }
            Ok(MatSpec::Table(out))
        }
    }
}

fn to_vec_spec(raw: &Option<RawVec>, len: usize, name: &str) -> Result<VecSpec> {
    let to_dvec = |v: &[f64]| -> Result<DVector<f64>> {
        if v.len() != len {
            return Err(SolverError::DimensionMismatch {
                name: name.to_string(),
                expected: format!("{len}"),
                got: format!("{}", v.len()),
            });
        }
        Ok(DVector::from_column_slice(v))
    };
    match raw {
        None => Ok(VecSpec::zero(len)),
        Some(RawVec::Constant(v)) => Ok(VecSpec::Constant(to_dvec(v)?)),
        Some(RawVec::Table(t)) => {
            if t.table.is_empty() {
                return Err(SolverError::DimensionMismatch {
                    name: name.to_string(),
                    expected: "nonempty table".to_string(),
                    got: "empty table".to_string(),
                });
            }
            let mut out = Vec::with_capacity(t.table.len());
            for node in &t.table {
                out.push((node.t, to_dvec(&node.value)?));
            }
            Ok(VecSpec::Table(out))
        }
    }
}

impl RunConfig {
    pub fn to_game_spec(&self) -> Result<GameSpec> {
        let g = &self.game;
        let (n, k1, k2) = (g.state_dim, g.follower_dim, g.leader_dim);
        if n == 0 || k1 == 0 || k2 == 0 {
            return Err(SolverError::DimensionMismatch {
                name: "dimensions".to_string(),
                expected: "positive state_dim/follower_dim/leader_dim".to_string(),
                got: format!("{n}/{k1}/{k2}"),
            });
        }
        let zero_sq = vec![vec![0.0; n]; n];
        Ok(GameSpec {
            horizon: g.horizon,
            delay: g.delay,
            n,
            k1,
            k2,
            a: to_mat_spec(&g.a, n, n, "a")?,
            a_lag: to_mat_spec(&g.a_lag, n, n, "a_lag")?,
            c: to_mat_spec(&g.c, n, n, "c")?,
            c_lag: to_mat_spec(&g.c_lag, n, n, "c_lag")?,
            b1_lag: to_mat_spec(&g.b1_lag, n, k1, "b1_lag")?,
            d1_lag: to_mat_spec(&g.d1_lag, n, k1, "d1_lag")?,
            b2_lag: to_mat_spec(&g.b2_lag, n, k2, "b2_lag")?,
            d2_lag: to_mat_spec(&g.d2_lag, n, k2, "d2_lag")?,
            q1: to_mat_spec(&g.q1, n, n, "q1")?,
            q1_lag: to_mat_spec(&g.q1_lag, n, n, "q1_lag")?,
            q2: to_mat_spec(&g.q2, n, n, "q2")?,
            q2_lag: to_mat_spec(&g.q2_lag, n, n, "q2_lag")?,
            r1: to_mat_spec(&g.r1, k1, k1, "r1")?,
            r1_lag: to_mat_spec(&g.r1_lag, k1, k1, "r1_lag")?,
            r2: to_mat_spec(&g.r2, k2, k2, "r2")?,
            r2_lag: to_mat_spec(&g.r2_lag, k2, k2, "r2_lag")?,
            g1: to_dmatrix(g.g1.as_ref().unwrap_or(&zero_sq), n, n, "g1")?,
            g2: to_dmatrix(g.g2.as_ref().unwrap_or(&zero_sq), n, n, "g2")?,
            phi: to_vec_spec(&g.phi, n, "phi")?,
            eta1: to_vec_spec(&g.eta1, k1, "eta1")?,
            eta2: to_vec_spec(&g.eta2, k2, "eta2")?,
        })
    }

    pub fn parse(text: &str) -> std::result::Result<RunConfig, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> std::result::Result<String, String> {
        toml::to_string_pretty(self).map_err(|e| e.to_string())
    }
}

pub fn load_config(path: &std::path::Path) -> std::result::Result<RunConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    RunConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
}
