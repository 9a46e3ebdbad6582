//! CSV artifact writers.
//!
//! Every number prints with Rust's shortest round-trip formatting and all
//! iteration orders are fixed, so identical in-memory results produce
//! byte-identical files.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::grid::TimeGrid;
use crate::pipeline::SolveArtifacts;
use crate::sim::{McReport, PerturbOutcome, SimulatedPath};

fn push_mat_headers(out: &mut String, prefix: &str, rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            out.push_str(&format!(",{prefix}_{i}_{j}"));
        }
    }
}

fn push_vec_headers(out: &mut String, prefix: &str, len: usize) {
    for i in 0..len {
        out.push_str(&format!(",{prefix}_{i}"));
    }
}

fn write_mat_cells(w: &mut impl Write, m: &DMatrix<f64>) -> io::Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            write!(w, ",{}", m[(i, j)])?;
        }
    }
    Ok(())
}

fn create(dir: &Path, name: &str) -> io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

pub fn write_solve_outputs(dir: &Path, art: &SolveArtifacts) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let vs = &art.vs;
    let (n, k1, k2) = (vs.n, vs.k1, vs.k2);
    let two_n = 2 * n;
    let last = vs.grid.last();

    {
        let mut w = create(dir, "riccati.csv")?;
        let mut h = String::from("t");
        push_mat_headers(&mut h, "p1", n, n);
        push_mat_headers(&mut h, "p2", n, n);
        push_mat_headers(&mut h, "omega1", k1, k1);
        push_mat_headers(&mut h, "omega2", k2, k2);
        push_mat_headers(&mut h, "omega3", k2, k2);
        writeln!(w, "{h}")?;
        for k in 0..=last {
            write!(w, "{}", vs.grid.t(k))?;
            write_mat_cells(&mut w, art.riccati.p1.at(k))?;
            write_mat_cells(&mut w, art.riccati.p2.at(k))?;
            write_mat_cells(&mut w, art.riccati.omega1.at(k))?;
            write_mat_cells(&mut w, art.riccati.omega2.at(k))?;
            write_mat_cells(&mut w, art.riccati.omega3.at(k))?;
            writeln!(w)?;
        }
    }

    {
        let mut w = create(dir, "coupled.csv")?;
        let mut h = String::from("t");
        push_mat_headers(&mut h, "l", two_n, two_n);
        push_mat_headers(&mut h, "piint", two_n, two_n);
        writeln!(w, "{h}")?;
        for k in 0..=last {
            write!(w, "{}", vs.grid.t(k))?;
            write_mat_cells(&mut w, &art.coupled.l[k])?;
            write_mat_cells(&mut w, &art.coupled.pi_integral(k))?;
            writeln!(w)?;
        }
    }

    {
        let mut w = create(dir, "gains.csv")?;
        let mut h = String::from("t");
        push_mat_headers(&mut h, "ku2", k2, two_n);
        push_mat_headers(&mut h, "ku1now", k1, two_n);
        push_mat_headers(&mut h, "ku1pred", k1, two_n);
        writeln!(w, "{h}")?;
        for k in 0..=last {
            write!(w, "{}", vs.grid.t(k))?;
            write_mat_cells(&mut w, &art.gains.ku2[k])?;
            write_mat_cells(&mut w, &art.gains.ku1_now[k])?;
            write_mat_cells(&mut w, &art.gains.ku1_pred[k])?;
            writeln!(w)?;
        }
    }

    {
        let mut w = create(dir, "stacked.csv")?;
        let st = &art.stacked;
        let blocks: [(&str, &crate::schedule::ScheduleMatrix); 14] = [
            ("a1", &st.a1),
            ("a2", &st.a2),
            ("a3", &st.a3),
            ("b", &st.b),
            ("c", &st.c),
            ("a1bar", &st.a1_bar),
            ("a2bar", &st.a2_bar),
            ("a3bar", &st.a3_bar),
            ("cbar", &st.c_bar),
            ("d", &st.d),
            ("dbar", &st.d_bar),
            ("g1", &st.g1),
            ("g2", &st.g2),
            ("e", &st.e),
        ];
        let mut h = String::from("t");
        for (name, sched) in &blocks {
            let m = sched.at(0);
            push_mat_headers(&mut h, name, m.nrows(), m.ncols());
        }
        push_vec_headers(&mut h, "mdrift", two_n);
        push_vec_headers(&mut h, "mdiff", two_n);
        writeln!(w, "{h}")?;
        for k in 0..=last {
            write!(w, "{}", vs.grid.t(k))?;
            for (_, sched) in &blocks {
                write_mat_cells(&mut w, sched.at(k))?;
            }
            for i in 0..two_n {
                write!(w, ",{}", st.m_drift[k][i])?;
            }
            for i in 0..two_n {
                write!(w, ",{}", st.m_diff[k][i])?;
            }
            writeln!(w)?;
        }
    }

    Ok(())
}

pub fn write_mc_outputs(
    dir: &Path,
    grid: &TimeGrid,
    report: &McReport,
    exemplars: &[SimulatedPath],
) -> io::Result<()> {
    fs::create_dir_all(dir)?;

    {
        let mut w = create(dir, "summary.csv")?;
        writeln!(w, "paths,seed,j1_mean,j1_se,j2_mean,j2_se")?;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            report.paths, report.seed, report.j1_mean, report.j1_se, report.j2_mean, report.j2_se
        )?;
    }

    {
        let mut w = create(dir, "checkpoints.csv")?;
        let dim = report
            .checkpoints
            .first()
            .map_or(0, |c| c.pred_mean.len());
        let mut h = String::from("t,base,target");
        push_vec_headers(&mut h, "pred_mean", dim);
        push_vec_headers(&mut h, "pred_se", dim);
        push_vec_headers(&mut h, "real_mean", dim);
        push_vec_headers(&mut h, "real_se", dim);
        push_vec_headers(&mut h, "diff_mean", dim);
        push_vec_headers(&mut h, "diff_se", dim);
        writeln!(w, "{h}")?;
        for c in &report.checkpoints {
            write!(w, "{},{},{}", grid.t(c.base), c.base, c.target)?;
            for v in [
                &c.pred_mean,
                &c.pred_se,
                &c.real_mean,
                &c.real_se,
                &c.diff_mean,
                &c.diff_se,
            ] {
                for i in 0..v.len() {
                    write!(w, ",{}", v[i])?;
                }
            }
            writeln!(w)?;
        }
    }

    {
        let mut w = create(dir, "controls.csv")?;
        writeln!(w, "t,mean_abs_u1,mean_abs_u2")?;
        for k in 0..report.mean_abs_u1.len() {
            writeln!(
                w,
                "{},{},{}",
                grid.t(k),
                report.mean_abs_u1[k],
                report.mean_abs_u2[k]
            )?;
        }
    }

    for (i, path) in exemplars.iter().enumerate() {
        let mut w = create(dir, &format!("path_{i}.csv"))?;
        let two_n = path.phi[0].len();
        let (du1, du2) = (path.u1[0].len(), path.u2[0].len());
        let mut h = String::from("t");
        push_vec_headers(&mut h, "phi", two_n);
        push_vec_headers(&mut h, "pred", two_n);
        push_vec_headers(&mut h, "u1", du1);
        push_vec_headers(&mut h, "u2", du2);
        h.push_str(",dw");
        writeln!(w, "{h}")?;
        for k in 0..path.phi.len() {
            write!(w, "{}", grid.t(k))?;
            for j in 0..two_n {
                write!(w, ",{}", path.phi[k][j])?;
            }
            for j in 0..two_n {
                write!(w, ",{}", path.s_pred[k][j])?;
            }
            if k < path.u1.len() {
                for j in 0..du1 {
                    write!(w, ",{}", path.u1[k][j])?;
                }
                for j in 0..du2 {
                    write!(w, ",{}", path.u2[k][j])?;
                }
                write!(w, ",{}", path.dw[k])?;
            } else {
                // no step is taken from the terminal node
                for _ in 0..(du1 + du2 + 1) {
                    write!(w, ",")?;
                }
            }
            writeln!(w)?;
        }
    }

    Ok(())
}

pub fn write_perturb_outputs(dir: &Path, outcome: &PerturbOutcome) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = create(dir, "perturb.csv")?;
    writeln!(w, "check,direction,epsilon,value,se,pass")?;
    for r in &outcome.follower {
        writeln!(
            w,
            "follower_delta,{},{},{},{},{}",
            r.direction.name(),
            r.epsilon,
            r.mean,
            r.se,
            r.pass
        )?;
    }
    for r in &outcome.curvature {
        writeln!(
            w,
            "follower_curvature,{},,{},,{}",
            r.direction.name(),
            r.curvature,
            r.pass
        )?;
    }
    for r in &outcome.leader {
        writeln!(
            w,
            "leader_derivative,{},{},{},{},{}",
            r.direction.name(),
            r.epsilon,
            r.mean,
            r.se,
            r.pass
        )?;
    }
    Ok(())
}
