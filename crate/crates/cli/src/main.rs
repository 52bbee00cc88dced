use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use odemap_core::bench::{
    dump_solution, fit_rate, run_experiment, series, ErrorKind, ExperimentConfig, PriorKind,
    ProblemSpec,
};
use odemap_core::problems::reference_on_grid;
use odemap_core::{solve, Error, Method, SolverConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;

#[derive(Parser)]
#[command(
    name = "odemap",
    version,
    about = "MAP ODE solvers under Gauss-Markov priors"
)]
struct Cli {
    /// Accepted for scripting compatibility; every run is deterministic.
    #[arg(long, global = true)]
    seedless: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convergence sweep over fill distances, written as CSV.
    Convergence(ConvergenceArgs),
    /// Single solve on a uniform mesh, written as a plot-ready CSV.
    Solve(SolveArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemArg {
    Logistic,
    Riccati,
    Fhn,
    Nonsmooth,
}

impl ProblemArg {
    fn spec(self) -> ProblemSpec {
        let label = match self {
            ProblemArg::Logistic => "logistic",
            ProblemArg::Riccati => "riccati",
            ProblemArg::Fhn => "fhn",
            ProblemArg::Nonsmooth => "nonsmooth",
        };
        ProblemSpec::from_label(label).expect("known label")
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Iwp,
    Ioup,
    Matern,
}

#[derive(Args)]
struct PriorOpts {
    #[arg(long, value_enum, default_value = "iwp")]
    prior: PriorArg,
    /// IOUP uses F_nu = -rate I; Matérn uses lambda = rate.
    #[arg(long, default_value_t = 1.0)]
    prior_rate: f64,
}

impl PriorOpts {
    fn kind(&self) -> PriorKind {
        match self.prior {
            PriorArg::Iwp => PriorKind::Iwp,
            PriorArg::Ioup => PriorKind::Ioup {
                rate: self.prior_rate,
            },
            PriorArg::Matern => PriorKind::Matern {
                lambda: self.prior_rate,
            },
        }
    }
}

#[derive(Args)]
struct ConvergenceArgs {
    #[arg(long, value_enum)]
    problem: ProblemArg,
    #[arg(long, value_delimiter = ',', default_value = "eks0,eks1,ieks", value_parser = parse_method)]
    methods: Vec<Method>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    nu: Vec<usize>,
    /// The dense grid has 2^DENSE_EXP intervals.
    #[arg(long, default_value_t = 12)]
    dense_exp: u32,
    /// Decimation exponents, as an inclusive range `a..b` or a comma list.
    #[arg(long, default_value = "4..11", value_parser = parse_exponents)]
    decimations: Exponents,
    #[command(flatten)]
    prior: PriorOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, value_enum)]
    problem: ProblemArg,
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long)]
    nu: usize,
    /// Uniform step; must divide the horizon.
    #[arg(long)]
    step: f64,
    #[command(flatten)]
    prior: PriorOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug)]
struct Exponents(Vec<u32>);

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_exponents(s: &str) -> Result<Exponents, String> {
    let bad = || format!("expected `a..b` or a comma list, got `{s}`");
    if let Some((a, b)) = s.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| bad())?;
        let b: u32 = b
            .trim()
            .trim_start_matches('=')
            .parse()
            .map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok(Exponents((a..=b).collect()));
    }
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()
        .map(Exponents)
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidParameter(_)
            | Error::InvalidMesh(_)
            | Error::DimensionMismatch { .. }
            | Error::MissingJacobian(_)
            | Error::NotPositiveDefinite(_)
            | Error::NotPositiveSemiDefinite(_)
            | Error::NoStationaryDistribution { .. }
            | Error::Parse(_)
    )
}

fn fail(err: anyhow::Error, solver_code: Option<u8>) -> ExitCode {
    eprintln!("error: {err:#}");
    let core = err.downcast_ref::<Error>();
    let code = match core {
        Some(e) if is_config_error(e) => EXIT_CONFIG,
        Some(Error::Solver { .. }) => solver_code.unwrap_or(1),
        _ => 1,
    };
    ExitCode::from(code)
}

fn convergence(args: &ConvergenceArgs) -> anyhow::Result<()> {
    let config = ExperimentConfig {
        problem: args.problem.spec(),
        methods: args.methods.clone(),
        nu_list: args.nu.clone(),
        dense_exponent: args.dense_exp,
        decimation_exponents: args.decimations.0.clone(),
        prior: args.prior.kind(),
        output: Some(args.out.clone()),
    };
    let rows = run_experiment(&config)?;
    let flagged = rows.iter().filter(|r| r.flagged).count();
    println!("{} rows written to {}", rows.len(), args.out.display());
    if flagged > 0 {
        eprintln!("warning: {flagged} rows flagged (solver failure or IEKS non-convergence)");
    }
    for &method in &config.methods {
        for &nu in &config.nu_list {
            let s = series(&rows, method, nu);
            let show = |kind| match fit_rate(&s, kind) {
                Ok(f) => format!("{:.2}", f.slope),
                Err(_) => "n/a".into(),
            };
            println!(
                "{method} nu={nu}: slope y {}, slope dy {}",
                show(ErrorKind::Solution),
                show(ErrorKind::Derivative)
            );
        }
    }
    Ok(())
}

fn solve_once(args: &SolveArgs) -> anyhow::Result<()> {
    let named = args.problem.spec().build()?;
    let horizon = named.problem.horizon();
    let steps = (horizon / args.step).round();
    if !(args.step > 0.0) || steps < 1.0 || (steps * args.step - horizon).abs() > 1e-9 * horizon {
        return Err(Error::InvalidParameter(format!(
            "step {} does not divide the horizon {horizon}",
            args.step
        ))
        .into());
    }
    let prior = args.prior.kind().build(args.nu, named.problem.dim())?;
    let config = SolverConfig::uniform(args.method, prior, horizon, steps as usize);
    let solution = solve(&named.problem, &config)?;
    let reference = match reference_on_grid(&named, &solution.mesh) {
        Ok(r) => Some(r),
        Err(e) => {
            eprintln!("warning: no reference columns ({e})");
            None
        }
    };
    dump_solution(&solution, reference.as_ref(), &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if !solution.converged {
        eprintln!(
            "warning: IEKS stopped after {} iterations without converging",
            solution.iterations
        );
    }
    println!(
        "{} nu={} steps={}: sigma2_hat {:.6e}, objective {:.6e}, iterations {}, f evals {}, jacobian evals {}",
        solution.method,
        solution.nu,
        steps,
        solution.sigma2_hat,
        solution.map_objective,
        solution.iterations,
        solution.f_evals,
        solution.jf_evals
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _ = cli.seedless;
    let result = match &cli.command {
        Command::Convergence(args) => convergence(args).map_err(|e| (e, None)),
        Command::Solve(args) => solve_once(args).map_err(|e| (e, Some(EXIT_SOLVER))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((e, code)) => fail(e, code),
    }
}
