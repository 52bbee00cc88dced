//! Convergence harness: dense evaluation meshes with decimated updates,
//! fill distances, sup-norm errors, log–log rate fits and CSV output.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Method, Result};
use crate::prior::{build_ioup, build_iwp, build_matern_multivariate, StateSpaceModel};
use crate::problems::{self, NamedProblem, ReferenceSamples};
use crate::solver::{solve, uniform_mesh, Solution, SolverConfig};

/// CSV header of a convergence sweep.
pub const CSV_HEADER: [&str; 8] = [
    "delta",
    "method",
    "nu",
    "err_sup_y",
    "err_sup_dy",
    "sigma2_hat",
    "iterations",
    "flagged",
];

/// Errors below this are treated as the floating-point floor and left out of
/// rate fits.
pub const NUMERICAL_FLOOR: f64 = 1e-11;

/// Largest gap from any `t ∈ [0, horizon]` to its nearest point in `points`.
pub fn fill_distance(points: &[f64], horizon: f64) -> Result<f64> {
    let (Some(&first), Some(&last)) = (points.first(), points.last()) else {
        return Err(Error::InvalidMesh("fill distance of an empty mesh".into()));
    };
    if points.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidMesh("mesh must be sorted".into()));
    }
    let interior = points
        .windows(2)
        .map(|w| 0.5 * (w[1] - w[0]))
        .fold(0.0, f64::max);
    Ok(interior.max(first).max(horizon - last))
}

/// Uniform dense mesh with ODE updates on a sub-lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct DecimatedMesh {
    pub mesh: Vec<f64>,
    /// Solver update mask; entry 0 is false (the initial point is
    /// conditioned on the initial values instead).
    pub update_mask: Vec<bool>,
    pub horizon: f64,
}

impl DecimatedMesh {
    /// Points the estimate is conditioned on: `t0` plus every updated point.
    pub fn conditioning_points(&self) -> Vec<f64> {
        self.mesh
            .iter()
            .zip(&self.update_mask)
            .enumerate()
            .filter(|(i, (_, &u))| *i == 0 || u)
            .map(|(_, (&t, _))| t)
            .collect()
    }

    pub fn fill_distance(&self) -> f64 {
        fill_distance(&self.conditioning_points(), self.horizon).expect("mesh is non-empty")
    }
}

/// `2^dense_exponent + 1` uniform points on `[0, horizon]`, updated at every
/// `2^decimation_exponent`-th point.
pub fn build_decimated_mesh(
    horizon: f64,
    dense_exponent: u32,
    decimation_exponent: u32,
) -> Result<DecimatedMesh> {
    if decimation_exponent > dense_exponent {
        return Err(Error::InvalidParameter(format!(
            "decimation 2^{decimation_exponent} does not divide 2^{dense_exponent} intervals"
        )));
    }
    if dense_exponent > 24 {
        return Err(Error::InvalidParameter(format!(
            "dense exponent {dense_exponent} is too large"
        )));
    }
    let intervals = 1usize << dense_exponent;
    let stride = 1usize << decimation_exponent;
    let mesh = uniform_mesh(horizon, intervals);
    let update_mask = (0..=intervals).map(|i| i > 0 && i % stride == 0).collect();
    Ok(DecimatedMesh {
        mesh,
        update_mask,
        horizon,
    })
}

/// `max_n max_i |(E_mᵀ μ_S(t_n))_i - D^m y*_i(t_n)|` over the solution mesh.
pub fn sup_error(solution: &Solution, reference: &[DVector<f64>], m: usize) -> Result<f64> {
    if reference.len() != solution.means.len() {
        return Err(Error::MisalignedGrids(format!(
            "{} reference samples for {} mesh points",
            reference.len(),
            solution.means.len()
        )));
    }
    if m > solution.nu {
        return Err(Error::InvalidParameter(format!(
            "derivative order {m} exceeds smoothness {}",
            solution.nu
        )));
    }
    let mut worst = 0.0f64;
    for (n, r) in reference.iter().enumerate() {
        if r.len() != solution.dim {
            return Err(Error::MisalignedGrids(format!(
                "reference sample {n} has wrong dimension"
            )));
        }
        let est = solution.derivative(n, m);
        worst = worst.max((est - r).amax());
    }
    Ok(worst)
}

/// Problem selection for a sweep, with parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProblemSpec {
    Logistic,
    Riccati {
        c: f64,
    },
    FitzHughNagumo {
        a: f64,
        b: f64,
        c: f64,
    },
    Nonsmooth {
        kappa: f64,
        b: f64,
        lambda: f64,
        y0: f64,
    },
}

impl ProblemSpec {
    /// Looks up a problem by label with its default parameters.
    pub fn from_label(label: &str) -> Result<Self> {
        let (a, b, c) = problems::FHN_DEFAULTS;
        match label.trim().to_ascii_lowercase().as_str() {
            "logistic" => Ok(Self::Logistic),
            "riccati" => Ok(Self::Riccati { c: 1.0 }),
            "fhn" | "fitzhugh-nagumo" => Ok(Self::FitzHughNagumo { a, b, c }),
            "nonsmooth" => Ok(Self::Nonsmooth {
                kappa: 2.0,
                b: 1.0,
                lambda: -5.0,
                y0: 0.0,
            }),
            other => Err(Error::InvalidParameter(format!(
                "unknown problem `{other}`"
            ))),
        }
    }

    pub fn build(&self) -> Result<NamedProblem> {
        match *self {
            Self::Logistic => Ok(problems::logistic()),
            Self::Riccati { c } => problems::riccati(c),
            Self::FitzHughNagumo { a, b, c } => problems::fitzhugh_nagumo(a, b, c),
            Self::Nonsmooth {
                kappa,
                b,
                lambda,
                y0,
            } => problems::nonsmooth(kappa, b, lambda, y0),
        }
    }
}

/// Prior family for a sweep; each is instantiated per `nu` with unit scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorKind {
    /// `IWP(I, nu)` with `Σ(t0-) = I`.
    Iwp,
    /// `IOUP(-rate I, I, nu)` with `Σ(t0-) = I`.
    Ioup { rate: f64 },
    /// Independent Matérn(`nu`, `lambda`, σ² = 1) per coordinate, stationary start.
    Matern { lambda: f64 },
}

impl PriorKind {
    pub fn from_label(label: &str, rate: f64) -> Result<Self> {
        match label.trim().to_ascii_lowercase().as_str() {
            "iwp" => Ok(Self::Iwp),
            "ioup" => Ok(Self::Ioup { rate }),
            "matern" => Ok(Self::Matern { lambda: rate }),
            other => Err(Error::InvalidParameter(format!("unknown prior `{other}`"))),
        }
    }

    pub fn build(&self, nu: usize, dim: usize) -> Result<StateSpaceModel> {
        let n = dim * (nu + 1);
        let eye = DMatrix::identity(dim, dim);
        match *self {
            Self::Iwp => build_iwp(nu, dim, eye, DMatrix::identity(n, n)),
            Self::Ioup { rate } => {
                build_ioup(nu, dim, &eye * -rate, eye.clone(), DMatrix::identity(n, n))
            }
            Self::Matern { lambda } => build_matern_multivariate(nu, dim, lambda, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub methods: Vec<Method>,
    pub nu_list: Vec<usize>,
    /// The dense grid has `2^dense_exponent` intervals on `[0, T]`.
    pub dense_exponent: u32,
    /// Updates every `2^k`-th dense point, for each listed `k`.
    pub decimation_exponents: Vec<u32>,
    pub prior: PriorKind,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Logistic sweep of the reference experiment: dense grid `2^-12`,
    /// decimation `2^(3+m)`, `m = 1..=8`, all methods, `nu = 1..=4`.
    pub fn logistic_reference() -> Self {
        Self {
            problem: ProblemSpec::Logistic,
            methods: Method::ALL.to_vec(),
            nu_list: vec![1, 2, 3, 4],
            dense_exponent: 12,
            decimation_exponents: (4..=11).collect(),
            prior: PriorKind::Iwp,
            output: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub delta: f64,
    pub method: Method,
    pub nu: usize,
    pub err_sup_y: f64,
    pub err_sup_dy: f64,
    pub sigma2_hat: f64,
    pub iterations: usize,
    /// Solver failure (errors are NaN) or IEKS non-convergence.
    pub flagged: bool,
}

/// Which error column a rate is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Solution,
    Derivative,
}

impl ErrorKind {
    fn of(self, row: &ConvergenceRow) -> f64 {
        match self {
            ErrorKind::Solution => row.err_sup_y,
            ErrorKind::Derivative => row.err_sup_dy,
        }
    }
}

/// Least-squares line `ln err = slope · ln δ + intercept`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub used: usize,
}

impl fmt::Display for RateFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "slope {:.3} (intercept {:.3}, {} points)",
            self.slope, self.intercept, self.used
        )
    }
}

/// Fits the convergence rate over rows of one (method, nu) series, skipping
/// flagged rows and errors under [`NUMERICAL_FLOOR`].
pub fn fit_rate(rows: &[ConvergenceRow], kind: ErrorKind) -> Result<RateFit> {
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| !r.flagged && r.delta > 0.0)
        .map(|r| (r.delta, kind.of(r)))
        .filter(|&(_, e)| e.is_finite() && e >= NUMERICAL_FLOOR)
        .map(|(d, e)| (d.ln(), e.ln()))
        .collect();
    if points.len() < 3 {
        return Err(Error::InsufficientRows(points.len()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter(
            "rate fit needs distinct fill distances".into(),
        ));
    }
    let slope = sxy / sxx;
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        used: points.len(),
    })
}

/// True when, ordered by increasing `δ`, each error is at most `factor`
/// times the next one (errors shrink with `δ` up to the tolerance band).
pub fn monotone_within(rows: &[ConvergenceRow], kind: ErrorKind, factor: f64) -> bool {
    let mut sorted: Vec<_> = rows.iter().filter(|r| !r.flagged).collect();
    sorted.sort_by(|a, b| a.delta.total_cmp(&b.delta));
    sorted
        .windows(2)
        .all(|w| kind.of(w[0]) <= factor * kind.of(w[1]))
}

/// Rows of one (method, nu) series.
pub fn series(rows: &[ConvergenceRow], method: Method, nu: usize) -> Vec<ConvergenceRow> {
    rows.iter()
        .filter(|r| r.method == method && r.nu == nu)
        .copied()
        .collect()
}

/// Runs the full sweep and, if `config.output` is set, writes the CSV.
/// Rows come out in (method, nu, δ ascending) order whatever the order of
/// completion.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ConvergenceRow>> {
    let named = config.problem.build()?;
    let horizon = named.problem.horizon();
    let mut decimations = config.decimation_exponents.clone();
    decimations.sort_unstable();
    decimations.dedup();

    let rows = if config.methods.is_empty() || config.nu_list.is_empty() || decimations.is_empty() {
        Vec::new()
    } else {
        let dense = build_decimated_mesh(horizon, config.dense_exponent, 0)?;
        for &k in &decimations {
            build_decimated_mesh(horizon, config.dense_exponent, k)?;
        }
        let reference = problems::reference_on_grid(&named, &dense.mesh)?;
        let mut jobs = Vec::new();
        for &method in &config.methods {
            for &nu in &config.nu_list {
                for &k in &decimations {
                    jobs.push((method, nu, k));
                }
            }
        }
        jobs.par_iter()
            .map(|&(method, nu, k)| {
                let mesh = build_decimated_mesh(horizon, config.dense_exponent, k)?;
                let prior = config.prior.build(nu, named.problem.dim())?;
                Ok(run_row(&named, &reference, &mesh, method, prior))
            })
            .collect::<Result<Vec<_>>>()?
    };

    if let Some(path) = &config.output {
        write_rows_csv(path, &rows)?;
    }
    Ok(rows)
}

fn run_row(
    named: &NamedProblem,
    reference: &ReferenceSamples,
    mesh: &DecimatedMesh,
    method: Method,
    prior: StateSpaceModel,
) -> ConvergenceRow {
    let nu = prior.nu();
    let delta = mesh.fill_distance();
    let config =
        SolverConfig::new(method, prior, mesh.mesh.clone()).with_mask(mesh.update_mask.clone());
    let evaluated = solve(&named.problem, &config).and_then(|s| {
        let ey = sup_error(&s, &reference.values, 0)?;
        let edy = sup_error(&s, &reference.derivatives, 1)?;
        Ok((s, ey, edy))
    });
    match evaluated {
        Ok((s, ey, edy)) => ConvergenceRow {
            delta,
            method,
            nu,
            err_sup_y: ey,
            err_sup_dy: edy,
            sigma2_hat: s.sigma2_hat,
            iterations: s.iterations,
            flagged: !s.converged,
        },
        Err(_) => ConvergenceRow {
            delta,
            method,
            nu,
            err_sup_y: f64::NAN,
            err_sup_dy: f64::NAN,
            sigma2_hat: f64::NAN,
            iterations: 0,
            flagged: true,
        },
    }
}

/// 17 significant digits, round-trips exactly.
fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_rows<W: Write>(writer: W, rows: &[ConvergenceRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            fmt_float(r.delta),
            r.method.to_string(),
            r.nu.to_string(),
            fmt_float(r.err_sup_y),
            fmt_float(r.err_sup_dy),
            fmt_float(r.sigma2_hat),
            r.iterations.to_string(),
            r.flagged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows_csv(path: &Path, rows: &[ConvergenceRow]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_rows(std::io::BufWriter::new(file), rows)
}

pub fn read_rows<R: std::io::Read>(reader: R) -> Result<Vec<ConvergenceRow>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse(format!("unexpected header {header:?}")));
    }
    let bad = |what: &str, v: &str| Error::Parse(format!("bad {what} `{v}`"));
    r.records()
        .map(|rec| {
            let rec = rec?;
            let float = |i: usize| {
                rec[i]
                    .parse::<f64>()
                    .map_err(|_| bad(CSV_HEADER[i], &rec[i]))
            };
            let int = |i: usize| {
                rec[i]
                    .parse::<usize>()
                    .map_err(|_| bad(CSV_HEADER[i], &rec[i]))
            };
            Ok(ConvergenceRow {
                delta: float(0)?,
                method: rec[1].parse()?,
                nu: int(2)?,
                err_sup_y: float(3)?,
                err_sup_dy: float(4)?,
                sigma2_hat: float(5)?,
                iterations: int(6)?,
                flagged: rec[7].parse().map_err(|_| bad("flagged", &rec[7]))?,
            })
        })
        .collect()
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ConvergenceRow>> {
    read_rows(std::fs::File::open(path)?)
}

/// Writes one row per mesh point: `t`, then for each coordinate `i` the
/// smoothed value and derivative with their ±2σ̂ bands, followed by the
/// reference values (empty when not supplied).
pub fn write_solution<W: Write>(
    writer: W,
    solution: &Solution,
    reference: Option<&ReferenceSamples>,
) -> Result<()> {
    if let Some(r) = reference {
        if r.values.len() != solution.mesh.len() || r.derivatives.len() != solution.mesh.len() {
            return Err(Error::MisalignedGrids(format!(
                "{} reference samples for {} mesh points",
                r.values.len(),
                solution.mesh.len()
            )));
        }
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header = vec!["t".to_string()];
    for i in 0..solution.dim {
        for col in [
            "y", "y_lo", "y_hi", "dy", "dy_lo", "dy_hi", "ref_y", "ref_dy",
        ] {
            header.push(format!("{col}{i}"));
        }
    }
    w.write_record(&header)?;
    for (n, &t) in solution.mesh.iter().enumerate() {
        let mut rec = vec![fmt_float(t)];
        let y = solution.derivative(n, 0);
        let dy = solution.derivative(n, 1);
        let (y_lo, y_hi) = solution.credible_band(n, 0);
        let (dy_lo, dy_hi) = solution.credible_band(n, 1);
        for i in 0..solution.dim {
            rec.extend([y[i], y_lo[i], y_hi[i], dy[i], dy_lo[i], dy_hi[i]].map(fmt_float));
            match reference {
                Some(r) => {
                    rec.push(fmt_float(r.values[n][i]));
                    rec.push(fmt_float(r.derivatives[n][i]));
                }
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready dump of a solution with credible bands.
pub fn dump_solution(
    solution: &Solution,
    reference: Option<&ReferenceSamples>,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_solution(std::io::BufWriter::new(file), solution, reference)
}
