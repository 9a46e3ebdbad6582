//! Command-line front end: load a run configuration (or one of the two
//! built-in benchmarks), drive the solve pipeline, and emit CSV
//! artifacts.
//!
//! Exit codes: 0 success, 1 numerical failure or failed verification
//! gate, 2 malformed configuration or usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stackelberg_delay::builtin::{example1_config, example2_config};
use stackelberg_delay::config::{load_config, RunConfig};
use stackelberg_delay::output::{write_mc_outputs, write_perturb_outputs, write_solve_outputs};
use stackelberg_delay::pipeline::{solve_all, SolveArtifacts};
use stackelberg_delay::sim::{
    default_checkpoints, perturbation_test, run_mc, simulate_path, Direction, PerturbOptions,
    SimContext,
};
use stackelberg_delay::SolverError;

#[derive(Parser)]
#[command(name = "stackelberg-delay", version, about = "Delayed leader-follower LQ game solver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check the model data and report the structural identities.
    Validate(FileArgs),
    /// Solve kernels, coupled system, and gains; write schedule CSVs.
    Solve(FileArgs),
    /// Solve, then Monte Carlo the closed loop; write reports.
    Simulate(FileArgs),
    /// Solve, then run the cost perturbation gates.
    Perturb(FileArgs),
    /// Run the built-in all-cancelling benchmark (solve + simulate).
    Example1(ExampleArgs),
    /// Run the built-in degenerate-leader benchmark (solve + simulate).
    Example2(ExampleArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte Carlo seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo path count (overrides the config).
    #[arg(long)]
    paths: Option<usize>,
    /// Number of interior grid steps N (overrides the config).
    #[arg(long)]
    grid: Option<usize>,
    /// Use the higher-order kernel integrator.
    #[arg(long)]
    rk4: bool,
    /// Fail (exit 1) when any structural identity check fails.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct FileArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct ExampleArgs {
    /// Write the benchmark's TOML configuration here and exit.
    #[arg(long)]
    write_config: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

enum Failure {
    Numerical(String),
    Usage(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Numerical(_) => 1,
            Failure::Usage(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Numerical(m) | Failure::Usage(m) => m,
        }
    }
}

impl From<SolverError> for Failure {
    fn from(e: SolverError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(format!("io: {e}"))
    }
}

fn apply_overrides(cfg: &mut RunConfig, common: &CommonArgs) {
    if let Some(out) = &common.out {
        cfg.output.directory = out.display().to_string();
    }
    if let Some(seed) = common.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(paths) = common.paths {
        cfg.simulation.paths = paths;
    }
    if let Some(grid) = common.grid {
        cfg.grid.n_steps = grid;
    }
    if common.rk4 {
        cfg.grid.rk4 = true;
    }
}

fn check_formats(cfg: &RunConfig) -> Result<(), Failure> {
    for f in &cfg.output.formats {
        if f != "csv" {
            return Err(Failure::Usage(format!("unsupported output format {f:?}")));
        }
    }
    Ok(())
}

fn solve_configured(cfg: &RunConfig) -> Result<SolveArtifacts, Failure> {
    let spec = cfg.to_game_spec()?;
    Ok(solve_all(&spec, cfg.grid.n_steps, cfg.grid.rk4)?)
}

fn print_reports(art: &SolveArtifacts) {
    for a in &art.assumptions {
        println!(
            "{}: {} (max residual {:e} at node {}, tol {:e}{})",
            a.name,
            if a.pass { "pass" } else { "FAIL" },
            a.max_residual,
            a.worst_node,
            a.tol,
            if a.skipped_nodes.is_empty() {
                String::new()
            } else {
                format!(", skipped nodes {:?}", a.skipped_nodes)
            }
        );
    }
    if let Some(od) = &art.one_dim {
        println!(
            "scalar benchmark family: cancelling={} degenerate-leader={}",
            od.case1, od.case2
        );
    }
    let singular = art.riccati.omega1.singular_nodes();
    if !singular.is_empty() {
        println!(
            "follower curvature not invertible at nodes {singular:?}; all dependent quantities are exactly zero there"
        );
    }
    println!(
        "coupled-system replay defect {:e} (bound {:e})",
        art.residual,
        art.residual_bound()
    );
}

fn strict_gate(art: &SolveArtifacts, strict: bool) -> u8 {
    if strict && !art.assumptions_pass() {
        1
    } else {
        0
    }
}

fn cmd_validate(cfg: &RunConfig) -> Result<u8, Failure> {
    let art = solve_configured(cfg)?;
    print_reports(&art);
    Ok(if art.assumptions_pass() { 0 } else { 1 })
}

fn cmd_solve(cfg: &RunConfig, strict: bool) -> Result<u8, Failure> {
    check_formats(cfg)?;
    let art = solve_configured(cfg)?;
    let dir = PathBuf::from(&cfg.output.directory);
    write_solve_outputs(&dir, &art)?;
    print_reports(&art);
    println!("schedules written to {}", dir.display());
    Ok(strict_gate(&art, strict))
}

fn cmd_simulate(cfg: &RunConfig, strict: bool) -> Result<u8, Failure> {
    check_formats(cfg)?;
    if cfg.simulation.paths == 0 {
        return Err(Failure::Usage("paths must be positive".to_string()));
    }
    let art = solve_configured(cfg)?;
    let dir = PathBuf::from(&cfg.output.directory);
    write_solve_outputs(&dir, &art)?;

    let ctx = SimContext::new(&art.vs, &art.stacked, &art.subs, &art.gains);
    let checkpoints = if cfg.simulation.checkpoints.is_empty() {
        default_checkpoints(&art.vs.grid)
    } else {
        let last = art.vs.grid.last();
        for &b in &cfg.simulation.checkpoints {
            if b > last {
                return Err(Failure::Usage(format!(
                    "checkpoint {b} beyond the last grid node {last}"
                )));
            }
        }
        cfg.simulation.checkpoints.clone()
    };
    let seed = cfg.simulation.seed;
    let paths = cfg.simulation.paths;
    let report = run_mc(&ctx, paths, seed, &checkpoints)?;
    let exemplars: Result<Vec<_>, SolverError> = (0..paths.min(3))
        .map(|p| simulate_path(&ctx, seed, p, false, None))
        .collect();
    write_mc_outputs(&dir, &art.vs.grid, &report, &exemplars?)?;

    print_reports(&art);
    println!(
        "{} paths, seed {}: J1 = {:.6} (se {:.2e}), J2 = {:.6} (se {:.2e})",
        report.paths, report.seed, report.j1_mean, report.j1_se, report.j2_mean, report.j2_se
    );
    println!("reports written to {}", dir.display());
    Ok(strict_gate(&art, strict))
}

fn parse_directions(names: &[String]) -> Result<Vec<Direction>, Failure> {
    names
        .iter()
        .map(|s| {
            Direction::parse(s)
                .ok_or_else(|| Failure::Usage(format!("unknown perturbation direction {s:?}")))
        })
        .collect()
}

fn cmd_perturb(cfg: &RunConfig, strict: bool) -> Result<u8, Failure> {
    check_formats(cfg)?;
    if cfg.simulation.paths == 0 {
        return Err(Failure::Usage("paths must be positive".to_string()));
    }
    if cfg.verification.epsilons.iter().any(|&e| e <= 0.0) {
        return Err(Failure::Usage("epsilons must be positive".to_string()));
    }
    let art = solve_configured(cfg)?;
    let ctx = SimContext::new(&art.vs, &art.stacked, &art.subs, &art.gains);
    let opts = PerturbOptions {
        paths: cfg.simulation.paths,
        seed: cfg.simulation.seed,
        epsilons: cfg.verification.epsilons.clone(),
        directions: parse_directions(&cfg.verification.directions)?,
        follower_se_mult: cfg.verification.follower_se_mult,
        leader_se_mult: cfg.verification.leader_se_mult,
    };
    let outcome = perturbation_test(&ctx, &opts)?;
    let dir = PathBuf::from(&cfg.output.directory);
    write_perturb_outputs(&dir, &outcome)?;

    for r in &outcome.follower {
        println!(
            "follower {} eps={}: mean dJ1 {:+.3e} (se {:.3e}) {}",
            r.direction.name(),
            r.epsilon,
            r.mean,
            r.se,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    for c in &outcome.curvature {
        println!(
            "follower curvature {}: {:+.3e} {}",
            c.direction.name(),
            c.curvature,
            if c.pass { "pass" } else { "FAIL" }
        );
    }
    for r in &outcome.leader {
        println!(
            "leader {} eps={}: derivative {:+.3e} (se {:.3e}) {}",
            r.direction.name(),
            r.epsilon,
            r.mean,
            r.se,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let strict_fail = strict_gate(&art, strict);
    Ok(if outcome.all_pass { strict_fail } else { 1 })
}

fn run_example(cfg: RunConfig, args: &ExampleArgs) -> Result<u8, Failure> {
    if let Some(path) = &args.write_config {
        let text = cfg
            .to_toml()
            .map_err(Failure::Usage)?;
        std::fs::write(path, text)?;
        println!("configuration written to {}", path.display());
        return Ok(0);
    }
    let mut cfg = cfg;
    apply_overrides(&mut cfg, &args.common);
    cmd_simulate(&cfg, args.common.strict)
}

fn load(path: &Path) -> Result<RunConfig, Failure> {
    load_config(path).map_err(Failure::Usage)
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    match cli.cmd {
        Cmd::Validate(a) => {
            let mut cfg = load(&a.config)?;
            apply_overrides(&mut cfg, &a.common);
            cmd_validate(&cfg)
        }
        Cmd::Solve(a) => {
            let mut cfg = load(&a.config)?;
            apply_overrides(&mut cfg, &a.common);
            cmd_solve(&cfg, a.common.strict)
        }
        Cmd::Simulate(a) => {
            let mut cfg = load(&a.config)?;
            apply_overrides(&mut cfg, &a.common);
            cmd_simulate(&cfg, a.common.strict)
        }
        Cmd::Perturb(a) => {
            let mut cfg = load(&a.config)?;
            apply_overrides(&mut cfg, &a.common);
            cmd_perturb(&cfg, a.common.strict)
        }
        Cmd::Example1(a) => run_example(example1_config(), &a),
        Cmd::Example2(a) => run_example(example2_config(), &a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
