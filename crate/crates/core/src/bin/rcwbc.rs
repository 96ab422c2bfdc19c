//! Command-line front end: model checking, scenario simulation, and
//! centroidal-inertia sweeps.
//!
//! Exit codes: 0 ok, 1 validation failure, 2 unreadable or unparsable
//! file, 3 solver failure, 4 inverse-kinematics failure. The log level is
//! taken from `RCWBC_LOG_LEVEL` (error, warn, info, debug; default warn).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rcwbc::cii::{cii_report, run_sweep_series, CiiError, CiiSeries, CiiSweepConfig};
use rcwbc::dynamics::mass_matrix;
use rcwbc::model::{load_model, ModelError, RobotModel};
use rcwbc::rolling::{
    check_actuation_validity, constraint_residual, nullspace_projector, InternalConstraintSet,
};
use rcwbc::sim::{load_scenario, run_scenario, SimError};
use rcwbc::wbc::WbcError;

const EXIT_VALIDATION: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_IK: u8 = 4;

#[derive(Parser)]
#[command(
    name = "rcwbc",
    version,
    about = "Whole-body control toolkit for robots with rolling-contact joints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a model file and run randomized consistency checks
    Check {
        /// Model TOML file
        model: PathBuf,
        /// Random configurations per check
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Seed for the sampled configurations
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run a scenario and write log.csv plus summary.toml
    Simulate {
        /// Scenario TOML file
        scenario: PathBuf,
        /// Output directory, created if missing
        #[arg(long)]
        out: PathBuf,
        /// Keep every Nth control tick in the log
        #[arg(long, default_value_t = 1)]
        log_every: usize,
        /// Random seed (the bundled scenarios draw no randomness)
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep stepping configurations and report centroidal inertia isotropy
    Cii {
        /// Model TOML file
        model: PathBuf,
        /// Second model of the same topology; switches to a paired
        /// comparison report
        second: Option<PathBuf>,
        /// Sweep configuration TOML (defaults derive from the model)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file: per-configuration CSV table for one model, TOML
        /// comparison report for two
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("RCWBC_LOG_LEVEL", "warn"),
    )
    .init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Check {
            model,
            samples,
            seed,
        } => run_check(&model, samples, seed),
        Command::Simulate {
            scenario,
            out,
            log_every,
            seed: _,
        } => run_simulate(&scenario, &out, log_every),
        Command::Cii {
            model,
            second,
            config,
            out,
        } => run_cii(&model, second.as_deref(), config.as_deref(), &out),
    };
    ExitCode::from(code)
}

fn model_exit(e: &ModelError) -> u8 {
    match e {
        ModelError::Io { .. } | ModelError::Parse(_) => EXIT_PARSE,
        ModelError::Topology(_) | ModelError::Validation { .. } => EXIT_VALIDATION,
    }
}

fn wbc_exit(e: &WbcError) -> u8 {
    match e {
        WbcError::Io(_) | WbcError::Parse(_) => EXIT_PARSE,
        WbcError::SolverInfeasible { .. } | WbcError::Solver(_) => EXIT_SOLVER,
        _ => EXIT_VALIDATION,
    }
}

fn sim_exit(e: &SimError) -> u8 {
    match e {
        SimError::Model(m) => model_exit(m),
        SimError::Controller(c) => wbc_exit(c),
        SimError::SingularKkt { .. } => EXIT_SOLVER,
        SimError::Io(_) | SimError::Parse(_) => EXIT_PARSE,
        SimError::Scenario(_) | SimError::Dynamics(_) => EXIT_VALIDATION,
    }
}

fn cii_exit(e: &CiiError) -> u8 {
    match e {
        CiiError::IkDidNotConverge { .. } => EXIT_IK,
        CiiError::SingularInertia { .. } => EXIT_SOLVER,
        CiiError::Dynamics(_) | CiiError::BadConfig(_) => EXIT_VALIDATION,
    }
}

/// `amax` that treats empty vectors and matrices as zero (models without
/// rolling pairs have zero-row internal Jacobians).
fn amax_or_zero<R: nalgebra::Dim, C: nalgebra::Dim, S>(
    m: &nalgebra::Matrix<f64, R, C, S>,
) -> f64
where
    S: nalgebra::RawStorage<f64, R, C>,
{
    if m.is_empty() {
        0.0
    } else {
        m.amax()
    }
}

fn run_check(path: &Path, samples: usize, seed: u64) -> u8 {
    let model = match load_model(path) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("{e}");
            return model_exit(&e);
        }
    };
    println!(
        "model {:?}: {} dof, {} actuated, {} rolling pairs, {:.1} kg",
        model.name,
        model.nv,
        model.actuated_v().len(),
        model.rolling_pairs.len(),
        model.total_mass()
    );

    let ics = InternalConstraintSet::from_model(&model);
    let base_cols = amax_or_zero(&ics.jacobian().view((0, 0), (ics.k(), 6)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coupling: f64 = 0.0;
    let mut projector: f64 = 0.0;
    let mut actuation: f64 = 0.0;
    let mut actuation_ok = true;
    for _ in 0..samples {
        let state = model.sample_state(&mut rng, true);
        coupling = coupling.max(amax_or_zero(&constraint_residual(&model, &state)));
        let a = match mass_matrix(&model, &state) {
            Ok(a) => a,
            Err(e) => {
                eprintln!("{e}");
                return EXIT_VALIDATION;
            }
        };
        let n = nullspace_projector(&ics, &a);
        let jn = amax_or_zero(&(ics.jacobian() * &n));
        let idem = (&n * &n - &n).amax();
        projector = projector.max(jn.max(idem));
        let (ok, defect) = check_actuation_validity(&ics, model.actuated_v(), &a);
        actuation_ok &= ok;
        actuation = actuation.max(defect);
    }

    let rows = [
        ("rolling coupling residual", coupling, "1e-12", coupling < 1e-12),
        (
            "internal jacobian base columns",
            base_cols,
            "exact 0",
            base_cols == 0.0,
        ),
        (
            "nullspace projector identities",
            projector,
            "1e-9",
            projector < 1e-9,
        ),
        ("actuation validity", actuation, "1e-8", actuation_ok),
    ];
    println!(
        "{} random configurations (seed {seed})",
        samples
    );
    println!("  {:<32} {:>10}  {:>8}  result", "check", "worst", "bound");
    let mut passed = 0;
    for (name, worst, bound, ok) in rows {
        println!(
            "  {:<32} {:>10.2e}  {:>8}  {}",
            name,
            worst,
            bound,
            if ok { "pass" } else { "FAIL" }
        );
        passed += ok as usize;
    }
    if passed == rows.len() {
        println!("all checks passed");
        0
    } else {
        eprintln!("{} of {} checks failed", rows.len() - passed, rows.len());
        EXIT_VALIDATION
    }
}

fn run_simulate(path: &Path, out: &Path, log_every: usize) -> u8 {
    let scenario = match load_scenario(path) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return sim_exit(&e);
        }
    };
    let result = match run_scenario(&scenario, log_every) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return sim_exit(&e);
        }
    };

    if let Err(e) = std::fs::create_dir_all(out) {
        eprintln!("cannot create {}: {e}", out.display());
        return EXIT_PARSE;
    }
    let summary_toml = match toml::to_string_pretty(&result.summary) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("summary serialization failed: {e}");
            return EXIT_VALIDATION;
        }
    };
    let log_path = out.join("log.csv");
    let summary_path = out.join("summary.toml");
    for (p, text) in [(&log_path, result.log.to_csv()), (&summary_path, summary_toml)] {
        if let Err(e) = std::fs::write(p, text) {
            eprintln!("cannot write {}: {e}", p.display());
            return EXIT_PARSE;
        }
    }

    let s = &result.summary;
    println!(
        "scenario {:?}: {} ticks, {} log rows",
        s.scenario,
        s.ticks,
        result.log.rows.len()
    );
    println!(
        "  {:<14} {:>14}  {:>10} {:>10} {:>10} {:>12}",
        "phase", "window [s]", "com_xy_rms", "icp_rms", "base_z_rms", "rpy_max_deg"
    );
    for p in &s.phases {
        println!(
            "  {:<14} {:>6.2}..{:<6.2}  {:>10.3e} {:>10.3e} {:>10.3e} {:>12.3e}",
            p.name, p.start, p.end, p.com_xy_rms, p.icp_rms, p.base_z_rms, p.base_rpy_max_deg
        );
    }
    println!(
        "  internal velocity max {:.2e}, cone margin min {:.2e}, qp iterations max {} (mean {:.2})",
        s.max_internal_vel, s.min_cone_margin, s.max_solver_iterations, s.mean_solver_iterations
    );
    println!("  wrote {} and {}", log_path.display(), summary_path.display());

    if let Some(f) = &s.failure {
        eprintln!("solver failed at t = {:.4} s: {}", f.time, f.error);
        return EXIT_SOLVER;
    }
    0
}

fn load_sweep_config(path: Option<&Path>) -> Result<CiiSweepConfig, u8> {
    let Some(path) = path else {
        return Ok(CiiSweepConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("cannot read {}: {e}", path.display());
        EXIT_PARSE
    })?;
    toml::from_str(&text).map_err(|e| {
        eprintln!("sweep config parse: {e}");
        EXIT_PARSE
    })
}

fn load_model_or_exit(path: &Path) -> Result<RobotModel, u8> {
    load_model(path).map_err(|e| {
        eprintln!("{e}");
        model_exit(&e)
    })
}

fn print_series(series: &CiiSeries) {
    println!(
        "  {:<24} {} configurations ({} skipped), cii in [{:+.4e}, {:+.4e}], range {:.4e}",
        series.model, series.configurations, series.skipped, series.min, series.max, series.range
    );
}

fn ik_failure_rate(series: &CiiSeries) -> f64 {
    series.skipped as f64 / (series.configurations + series.skipped) as f64
}

fn run_cii(path: &Path, second: Option<&Path>, config: Option<&Path>, out: &Path) -> u8 {
    let model = match load_model_or_exit(path) {
        Ok(m) => m,
        Err(code) => return code,
    };
    let cfg = match load_sweep_config(config) {
        Ok(c) => c,
        Err(code) => return code,
    };

    let (text, worst_rate) = if let Some(second) = second {
        let model_b = match load_model_or_exit(second) {
            Ok(m) => m,
            Err(code) => return code,
        };
        let report = match cii_report(&model, &model_b, &cfg) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("{e}");
                return cii_exit(&e);
            }
        };
        print_series(&report.first);
        print_series(&report.second);
        println!(
            "  range reduction, first relative to second: {:+.1}%",
            100.0 * report.range_reduction
        );
        let rate = ik_failure_rate(&report.first).max(ik_failure_rate(&report.second));
        let text = match toml::to_string_pretty(&report) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("report serialization failed: {e}");
                return EXIT_VALIDATION;
            }
        };
        (text, rate)
    } else {
        let series = match run_sweep_series(&model, &cfg) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("{e}");
                return cii_exit(&e);
            }
        };
        print_series(&series);
        let rate = ik_failure_rate(&series);
        (series.table_csv(), rate)
    };

    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        if let Err(e) = std::fs::create_dir_all(dir) {
            eprintln!("cannot create {}: {e}", dir.display());
            return EXIT_PARSE;
        }
    }
    if let Err(e) = std::fs::write(out, text) {
        eprintln!("cannot write {}: {e}", out.display());
        return EXIT_PARSE;
    }
    println!("  wrote {}", out.display());

    if worst_rate > 0.5 {
        eprintln!(
            "inverse kinematics failed for {:.0}% of the sweep",
            100.0 * worst_rate
        );
        return EXIT_IK;
    }
    0
}
