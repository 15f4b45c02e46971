//! Command-line front end: certification, solving, validation suites and
//! contraction probing, all pure functions of (config bytes, flags).
//!
//! Exit codes: 0 success, 1 config error, 2 validation-suite failure,
//! 3 certification negative, 4 solver non-convergence.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use qbsde::certificate::{certify_with, CertifyOptions};
use qbsde::pasting::{probe_start, solve_full, SolveParams};
use qbsde::picard::{contraction_probe, PhiMode};
use qbsde::problem::ProblemSpec;
use qbsde::regression::{Basis, BasisSpec, TerminalMap};

mod validate;

#[derive(Parser)]
#[command(name = "qbsde", version, about = "Quadratic-BSDE solver and certificate engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the constant ledger and print it as JSON.
    Certify {
        /// Problem JSON document.
        config: PathBuf,
        /// Evaluate the delta-dependent constants at this delta instead of
        /// the searched one.
        #[arg(long)]
        force_delta: Option<f64>,
        /// Points in the geometric lambda grid.
        #[arg(long, default_value_t = 64)]
        lambda_points: usize,
        /// Denominator of the dyadic delta grid.
        #[arg(long, default_value_t = 1024)]
        delta_denominator: u32,
    },
    /// Solve on [0, T] and print the report as JSON; the convergence trace
    /// goes to <config>.trace.csv next to the config.
    Solve {
        config: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        paths: usize,
        /// Time steps per pasting window.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// girsanov or frozen-driver.
        #[arg(long, default_value = "girsanov")]
        mode: String,
        /// Solve with this window fraction regardless of certification.
        #[arg(long)]
        force_delta: Option<f64>,
        #[arg(long, default_value_t = 25)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Total polynomial degree of the regression basis.
        #[arg(long, default_value_t = 2)]
        degree: usize,
        /// Drop the terminal-value feature column from the basis.
        #[arg(long)]
        no_terminal_feature: bool,
        /// Attach a binomial-tree reference at this many steps (d = k = 1
        /// problems without a closed form; 0 disables).
        #[arg(long, default_value_t = 0)]
        tree_oracle_steps: usize,
    },
    /// Run the built-in check suites.
    Validate {
        /// all, oracles (statistical) or invariants (exact).
        #[arg(long, default_value = "all")]
        suite: String,
        /// Scales every statistical tolerance; 0 makes statistical cases
        /// fail by construction.
        #[arg(long, default_value_t = 1.0)]
        tol_multiplier: f64,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Probe the contraction factor on a certified problem.
    Contraction {
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value = "girsanov")]
        mode: String,
    },
}

fn read_spec(path: &PathBuf) -> Result<ProblemSpec, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    ProblemSpec::from_json(&text).map_err(|e| e.to_string())
}

fn cmd_certify(
    config: PathBuf,
    force_delta: Option<f64>,
    lambda_points: usize,
    delta_denominator: u32,
) -> ExitCode {
    let spec = match read_spec(&config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let opts = CertifyOptions {
        lambda_points,
        delta_denominator,
        forced_delta: force_delta,
        ..CertifyOptions::default()
    };
    match certify_with(&spec, &opts) {
        Ok(ledger) => {
            println!("{}", ledger.to_json());
            if ledger.existence_gate {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_solve(
    config: PathBuf,
    paths: usize,
    steps: usize,
    seed: u64,
    mode: String,
    force_delta: Option<f64>,
    max_iter: usize,
    tol: f64,
    degree: usize,
    no_terminal_feature: bool,
    tree_oracle_steps: usize,
) -> ExitCode {
    let spec = match read_spec(&config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let mode = match PhiMode::from_str(&mode) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    // Certified problems solve at their searched delta; everything else is
    // best-effort on a single window unless a delta is forced.
    let mut opts = CertifyOptions {
        forced_delta: force_delta,
        ..CertifyOptions::default()
    };
    let probe = match certify_with(&spec, &opts) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    if probe.delta.is_none() {
        eprintln!("note: problem is not certified; solving best-effort on a single window");
        opts.forced_delta = Some(1.0);
    }
    let ledger = match certify_with(&spec, &opts) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let params = SolveParams {
        n_paths: paths,
        steps_per_window: steps,
        seed,
        mode,
        max_iter,
        tol,
        basis: BasisSpec {
            degree,
            include_terminal_feature: !no_terminal_feature,
        },
        tree_oracle_steps,
    };
    match solve_full(&spec, &ledger, &params) {
        Ok((_, report)) => {
            println!("{}", report.to_json());
            let trace_path = config.with_extension("trace.csv");
            if let Err(e) = std::fs::write(&trace_path, report.trace_csv()) {
                eprintln!("warning: cannot write {}: {e}", trace_path.display());
            }
            if report.windows.iter().any(|w| w.clip_warning) {
                eprintln!("warning: weight clipping exceeded 1% of paths in some window");
            }
            if report.converged {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(4)
            }
        }
        Err(e) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_contraction(
    config: PathBuf,
    trials: u64,
    seed: u64,
    paths: usize,
    steps: usize,
    mode: String,
) -> ExitCode {
    let spec = match read_spec(&config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let mode = match PhiMode::from_str(&mode) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let ledger = match certify_with(&spec, &CertifyOptions::default()) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    if !ledger.existence_gate {
        eprintln!("problem is not certified; no probe run");
        println!("{}", ledger.to_json());
        return ExitCode::from(3);
    }
    let delta = ledger.delta.expect("certified ledger has delta");
    let bound = ledger.contraction_factor.expect("certified ledger has lambda");
    let horizon = spec.horizon;
    let grid = match qbsde::paths::TimeGrid::new(horizon - delta * horizon, horizon, steps) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let run = || -> qbsde::Result<Vec<f64>> {
        let ensemble = qbsde::paths::generate_ensemble(grid, paths, spec.k, seed)?;
        let terminal = Arc::new(TerminalMap::Spec {
            spec: spec.terminal.clone(),
            d: spec.d,
            clip: spec.c1,
        });
        let basis = Basis::new(BasisSpec::default(), spec.k, Some(terminal.clone()))?;
        let mut ratios = Vec::new();
        for t in 0..trials {
            let a = probe_start(&spec, &ensemble, &basis, terminal.clone(), 2 * t);
            let b = probe_start(&spec, &ensemble, &basis, terminal.clone(), 2 * t + 1);
            ratios.push(contraction_probe(&spec, &ensemble, &a, &b, mode)?);
        }
        Ok(ratios)
    };
    match run() {
        Ok(ratios) => {
            println!("trial,ratio,bound");
            for (t, r) in ratios.iter().enumerate() {
                println!("{t},{r},{bound}");
            }
            let max = ratios.iter().copied().fold(0.0, f64::max);
            let n = ratios.len() as f64;
            let mean = ratios.iter().sum::<f64>() / n;
            let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
                / (n - 1.0).max(1.0);
            let se = (var / n).sqrt();
            println!("max_ratio,{max}");
            println!("bound,{bound}");
            if max <= bound + 3.0 * se + 1e-9 {
                ExitCode::SUCCESS
            } else {
                eprintln!("contraction bound violated: max ratio {max} > {bound}");
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("config error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Certify {
            config,
            force_delta,
            lambda_points,
            delta_denominator,
        } => cmd_certify(config, force_delta, lambda_points, delta_denominator),
        Command::Solve {
            config,
            paths,
            steps,
            seed,
            mode,
            force_delta,
            max_iter,
            tol,
            degree,
            no_terminal_feature,
            tree_oracle_steps,
        } => cmd_solve(
            config,
            paths,
            steps,
            seed,
            mode,
            force_delta,
            max_iter,
            tol,
            degree,
            no_terminal_feature,
            tree_oracle_steps,
        ),
        Command::Validate {
            suite,
            tol_multiplier,
            paths,
            seed,
        } => validate::run(&suite, tol_multiplier, paths, seed),
        Command::Contraction {
            config,
            trials,
            seed,
            paths,
            steps,
            mode,
        } => cmd_contraction(config, trials, seed, paths, steps, mode),
    }
}
