//! Piecewise-constant schedules and their sampled-on-grid form.
//!
//! Coefficients and weights enter either as constants or as breakpoint
//! tables (t_i, value) meaning the value holds on [t_i, t_{i+1}) (left
//! closed). Sampling a schedule produces one matrix per node of the
//! extended grid; nodes strictly past the horizon carry zeros, which is
//! exactly the terminal extension the backward equations require.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SolverError};
use crate::grid::TimeGrid;
use crate::linalg;

#[derive(Debug, Clone)]
pub enum MatSpec {
    Constant(DMatrix<f64>),
    /// Breakpoints with strictly increasing times; value i holds on
    /// [t_i, t_{i+1}), the last value holds to the horizon. Times before
    /// the first breakpoint clamp to the first value.
    Table(Vec<(f64, DMatrix<f64>)>),
}

impl MatSpec {
    pub fn zero(rows: usize, cols: usize) -> Self {
        MatSpec::Constant(DMatrix::zeros(rows, cols))
    }

    pub fn scalar(v: f64) -> Self {
        MatSpec::Constant(DMatrix::from_element(1, 1, v))
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        match self {
            MatSpec::Constant(m) => Some((m.nrows(), m.ncols())),
            MatSpec::Table(rows) => rows.first().map(|(_, m)| (m.nrows(), m.ncols())),
        }
    }

    pub fn validate(&self, name: &str, rows: usize, cols: usize) -> Result<()> {
        let check_one = |m: &DMatrix<f64>| -> Result<()> {
            if m.nrows() != rows || m.ncols() != cols {
                return Err(SolverError::DimensionMismatch {
                    name: name.to_string(),
                    expected: format!("{rows}x{cols}"),
                    got: format!("{}x{}", m.nrows(), m.ncols()),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(SolverError::GridMismatch(format!(
                    "{name} contains a non-finite entry"
                )));
            }
            Ok(())
        };
        match self {
            MatSpec::Constant(m) => check_one(m),
            MatSpec::Table(table) => {
                if table.is_empty() {
                    return Err(SolverError::GridMismatch(format!("{name}: empty table")));
                }
                for (t, m) in table {
                    if !t.is_finite() {
                        return Err(SolverError::GridMismatch(format!(
                            "{name}: non-finite breakpoint time"
                        )));
                    }
                    check_one(m)?;
                }
                for w in table.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(SolverError::GridMismatch(format!(
                            "{name}: breakpoint times must be strictly increasing"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Value holding at time t (left-closed lookup with a small forgiveness
    /// for times computed as k*dt).
    pub fn value_at(&self, t: f64) -> &DMatrix<f64> {
        match self {
            MatSpec::Constant(m) => m,
            MatSpec::Table(table) => {
                let fuzz = 1e-9 * (1.0 + t.abs());
                let mut current = &table[0].1;
                for (ti, m) in table {
                    if *ti <= t + fuzz {
                        current = m;
                    } else {
                        break;
                    }
                }
                current
            }
        }
    }

    /// Sample onto the extended grid: nodes 0..=N+1 take the schedule value,
    /// nodes N+2..=N+1+d are zero.
    pub fn sample(&self, grid: &TimeGrid, rows: usize, cols: usize) -> ScheduleMatrix {
        let mut vals = Vec::with_capacity(grid.ext_len());
        for k in 0..grid.ext_len() {
            if k <= grid.last() {
                vals.push(self.value_at(grid.t(k)).clone());
            } else {
                vals.push(DMatrix::zeros(rows, cols));
            }
        }
        ScheduleMatrix { rows, cols, vals }
    }
}

#[derive(Debug, Clone)]
pub enum VecSpec {
    Constant(DVector<f64>),
    Table(Vec<(f64, DVector<f64>)>),
}

impl VecSpec {
    pub fn zero(len: usize) -> Self {
        VecSpec::Constant(DVector::zeros(len))
    }

    pub fn scalar(v: f64) -> Self {
        VecSpec::Constant(DVector::from_element(1, v))
    }

    pub fn validate(&self, name: &str, len: usize) -> Result<()> {
        let check_one = |v: &DVector<f64>| -> Result<()> {
            if v.len() != len {
                return Err(SolverError::DimensionMismatch {
                    name: name.to_string(),
                    expected: format!("{len}"),
                    got: format!("{}", v.len()),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(SolverError::GridMismatch(format!(
                    "{name} contains a non-finite entry"
                )));
            }
            Ok(())
        };
        match self {
            VecSpec::Constant(v) => check_one(v),
            VecSpec::Table(table) => {
                if table.is_empty() {
                    return Err(SolverError::GridMismatch(format!("{name}: empty table")));
                }
                for (t, v) in table {
                    if !t.is_finite() {
                        return Err(SolverError::GridMismatch(format!(
                            "{name}: non-finite breakpoint time"
                        )));
                    }
                    check_one(v)?;
                }
                for w in table.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(SolverError::GridMismatch(format!(
                            "{name}: breakpoint times must be strictly increasing"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn value_at(&self, t: f64) -> &DVector<f64> {
        match self {
            VecSpec::Constant(v) => v,
            VecSpec::Table(table) => {
                let fuzz = 1e-9 * (1.0 + t.abs());
                let mut current = &table[0].1;
                for (ti, v) in table {
                    if *ti <= t + fuzz {
                        current = v;
                    } else {
                        break;
                    }
                }
                current
            }
        }
    }

    /// Sample at history nodes first..=last (inclusive, indices may be
    /// negative); entry j corresponds to node first + j.
    pub fn sample_history(&self, grid: &TimeGrid, first: isize, last: isize) -> Vec<DVector<f64>> {
        (first..=last)
            .map(|k| self.value_at(grid.t_signed(k)).clone())
            .collect()
    }
}

/// A schedule sampled onto the extended grid.
#[derive(Debug, Clone)]
pub struct ScheduleMatrix {
    pub rows: usize,
    pub cols: usize,
    pub vals: Vec<DMatrix<f64>>,
}

impl ScheduleMatrix {
    pub fn zeros(rows: usize, cols: usize, len: usize) -> Self {
        ScheduleMatrix {
            rows,
            cols,
            vals: vec![DMatrix::zeros(rows, cols); len],
        }
    }

    pub fn from_vals(vals: Vec<DMatrix<f64>>) -> Self {
        let (rows, cols) = vals
            .first()
            .map(|m| (m.nrows(), m.ncols()))
            .unwrap_or((0, 0));
        ScheduleMatrix { rows, cols, vals }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        &self.vals[k]
    }

    /// Max over nodes of the max-abs entry.
    pub fn max_norm(&self) -> f64 {
        self.vals
            .iter()
            .fold(0.0f64, |acc, m| acc.max(linalg::max_abs(m)))
    }
}
