//! `gse`: measurement generation, state estimation and benchmarking.
//!
//! Exit codes: 0 success, 1 parse/binding/usage error, 2 I/O error,
//! 3 no convergence, 4 numerical or determinism failure.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gse_core::assembly::DecoupledModel;
use gse_core::bench::{max_workers, run_benchmark, BenchConfig, BenchError};
use gse_core::case_io::Report;
use gse_core::estimator::EstimateError;
use gse_core::measurement::{generate_measurements, NoiseSigmas};
use gse_core::{
    build_graph, estimate, parse_case, parse_measurements, write_measurements, write_report, EstimationMode,
    EstimationOptions, NetworkCase, PartitionedMeasurements, SystemState,
};

#[derive(Debug, Parser)]
#[command(name = "gse", version, about = "Graph-parallel WLS power system state estimator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a full measurement set from a case's solved state.
    GenMeas {
        #[arg(long)]
        case: PathBuf,
        /// Output file; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Estimate the state from a measurement file, starting flat.
    Estimate {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        /// JSON report file; the report goes to standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Decoupled)]
        mode: ModeArg,
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        workers: u64,
    },
    /// Run both modes serially and in parallel on seeded measurements.
    Bench {
        #[arg(long)]
        case: PathBuf,
        /// JSON benchmark report file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
        /// Parallel worker count compared against the serial run.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        workers: Option<u64>,
        #[command(flatten)]
        noise: NoiseArgs,
    },
}

#[derive(Debug, Args)]
struct NoiseArgs {
    /// Standard deviation for every measurement kind.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    sigma_v: Option<f64>,
    #[arg(long)]
    sigma_inj: Option<f64>,
    #[arg(long)]
    sigma_flow: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl NoiseArgs {
    fn sigmas(&self) -> Result<NoiseSigmas, String> {
        let mut s = self.sigma.map_or_else(NoiseSigmas::default, NoiseSigmas::uniform);
        if let Some(v) = self.sigma_v {
            s.voltage = v;
        }
        if let Some(v) = self.sigma_inj {
            s.injection = v;
        }
        if let Some(v) = self.sigma_flow {
            s.flow = v;
        }
        if [s.voltage, s.injection, s.flow]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            Ok(s)
        } else {
            Err("noise sigmas must be finite and non-negative".into())
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Decoupled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecoupledArg {
    /// Reactance-only angle side, voltage-normalized residuals.
    Xb,
    /// Exact Jacobian at flat start on both sides.
    Flat,
}

#[derive(Debug, Args)]
struct SolverArgs {
    #[arg(long, value_enum, default_value_t = DecoupledArg::Xb)]
    decoupled_model: DecoupledArg,
    #[arg(long, default_value_t = EstimationOptions::default().tol)]
    tol: f64,
    #[arg(long, default_value_t = EstimationOptions::default().max_iter)]
    max_iter: usize,
}

impl SolverArgs {
    fn options(&self, mode: EstimationMode, workers: usize) -> Result<EstimationOptions, String> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err("--tol must be positive".into());
        }
        if self.max_iter == 0 {
            return Err("--max-iter must be at least 1".into());
        }
        Ok(EstimationOptions {
            mode,
            tol: self.tol,
            max_iter: self.max_iter,
            workers,
            decoupled_model: match self.decoupled_model {
                DecoupledArg::Xb => DecoupledModel::Xb,
                DecoupledArg::Flat => DecoupledModel::FlatStart,
            },
        })
    }
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Display) -> Self {
        Failure {
            code: 1,
            message: message.to_string(),
        }
    }

    fn io(path: &Path, err: impl Display) -> Self {
        Failure {
            code: 2,
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl From<EstimateError> for Failure {
    fn from(err: EstimateError) -> Self {
        let code = match err {
            EstimateError::InvalidOptions(_) | EstimateError::Measurement(_) | EstimateError::StateDimension { .. } => {
                1
            }
            _ => 4,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(err: BenchError) -> Self {
        match err {
            BenchError::Estimate(e) => e.into(),
            BenchError::Network(_) | BenchError::Measurement(_) => Failure::usage(err),
            BenchError::Nondeterministic { .. } => Failure {
                code: 4,
                message: err.to_string(),
            },
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Failure::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_case(path: &Path) -> Result<NetworkCase, Failure> {
    parse_case(&read(path)?).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn to_workers(n: u64) -> Result<usize, Failure> {
    usize::try_from(n).map_err(Failure::usage)
}

fn not_converged(iterations: usize) -> Failure {
    Failure {
        code: 3,
        message: format!("no convergence after {iterations} iterations"),
    }
}

fn gen_meas(case: &Path, out: Option<&Path>, noise: &NoiseArgs) -> Result<(), Failure> {
    let sigmas = noise.sigmas().map_err(Failure::usage)?;
    let case = load_case(case)?;
    let graph = build_graph(&case).map_err(Failure::usage)?;
    let set = generate_measurements(&graph, &SystemState::truth(&case), sigmas, noise.seed);
    write_output(out, &write_measurements(&set))
}

fn run_estimate(
    case: &Path,
    measurements: &Path,
    out: Option<&Path>,
    mode: ModeArg,
    solver: &SolverArgs,
    workers: u64,
) -> Result<(), Failure> {
    let mode = match mode {
        ModeArg::Full => EstimationMode::FullNewton,
        ModeArg::Decoupled => EstimationMode::FastDecoupled,
    };
    let opts = solver.options(mode, to_workers(workers)?).map_err(Failure::usage)?;
    let case = load_case(case)?;
    let set = parse_measurements(&read(measurements)?)
        .map_err(|e| Failure::usage(format!("{}: {e}", measurements.display())))?;
    let graph = build_graph(&case).map_err(Failure::usage)?;
    let pm = PartitionedMeasurements::bind(&graph, &set).map_err(Failure::usage)?;
    let result = estimate(&graph, &pm, &opts)?;
    let report = write_report(&result);
    if out.is_some() {
        print!("{}", summary(&Report::from_result(&result)));
    }
    write_output(out, &report)?;
    if result.converged {
        Ok(())
    } else {
        Err(not_converged(result.iterations))
    }
}

fn summary(r: &Report) -> String {
    let t = &r.timings_ms;
    format!(
        "mode {}, {} iterations, converged {}\n\
         mse {:.3e}, objective {:.6e}, max |V residual| {:.3e}\n\
         gain matrix formulation       {:>10.3} ms\n\
         gain matrix factorization     {:>10.3} ms\n\
         residual + substitution/iter  {:>10.3} ms\n\
         rhs formation/iter            {:>10.3} ms\n\
         total                         {:>10.3} ms\n",
        r.mode,
        r.iterations,
        r.converged,
        r.mse,
        r.objective,
        r.max_voltage_residual,
        t.gain_formulation,
        t.factorization,
        t.residual_and_substitution_per_iter,
        t.rhs_per_iter,
        t.total
    )
}

fn bench(
    case: &Path,
    out: Option<&Path>,
    solver: &SolverArgs,
    workers: Option<u64>,
    noise: &NoiseArgs,
) -> Result<(), Failure> {
    let parallel = match workers {
        Some(w) => to_workers(w)?,
        None => max_workers(),
    };
    let opts = solver
        .options(EstimationMode::FastDecoupled, 1)
        .map_err(Failure::usage)?;
    let config = BenchConfig {
        noise: noise.sigmas().map_err(Failure::usage)?,
        seed: noise.seed,
        tol: opts.tol,
        max_iter: opts.max_iter,
        worker_counts: if parallel == 1 { vec![1] } else { vec![1, parallel] },
        decoupled_model: opts.decoupled_model,
    };
    let case = load_case(case)?;
    let report = run_benchmark(&case, &config)?;
    print!("{}", report.to_table());
    if let Some(path) = out {
        fs::write(path, report.to_json()).map_err(|e| Failure::io(path, e))?;
    }
    match report.rows.iter().find(|r| !r.report.converged) {
        Some(row) => Err(not_converged(row.report.iterations)),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenMeas { case, out, noise } => gen_meas(&case, out.as_deref(), &noise),
        Command::Estimate {
            case,
            measurements,
            out,
            mode,
            solver,
            workers,
        } => run_estimate(&case, &measurements, out.as_deref(), mode, &solver, workers),
        Command::Bench {
            case,
            out,
            solver,
            workers,
            noise,
        } => bench(&case, out.as_deref(), &solver, workers, &noise),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gse: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
