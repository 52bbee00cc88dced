use std::fmt;

use thiserror::Error;

/// Solver method tag, used in errors and outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Zeroth-order extended Kalman smoother.
    Eks0,
    /// First-order extended Kalman smoother.
    Eks1,
    /// Iterated extended Kalman smoother (Gauss-Newton on the MAP objective).
    Ieks,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Eks0, Method::Eks1, Method::Ieks];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Eks0 => "eks0",
            Method::Eks1 => "eks1",
            Method::Ieks => "ieks",
        }
    }

    pub fn needs_jacobian(self) -> bool {
        !matches!(self, Method::Eks0)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "eks0" => Ok(Method::Eks0),
            "eks1" => Ok(Method::Eks1),
            "ieks" => Ok(Method::Ieks),
            other => Err(Error::InvalidParameter(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("{0} is not symmetric positive semi-definite")]
    NotPositiveSemiDefinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("drift has an eigenvalue with real part {max_real_part:e}; no stationary distribution exists")]
    NoStationaryDistribution { max_real_part: f64 },

    #[error("matrix exponential overflowed")]
    Overflow,

    #[error("linear system is singular even after jitter {jitter:e}")]
    Singular { jitter: f64 },

    #[error("innovation covariance is numerically singular (condition {condition:e}){}", at_step(*.step))]
    SingularInnovation { step: Option<usize>, condition: f64 },

    #[error("predicted covariance is numerically singular{}", at_step(*.step))]
    SingularPrediction { step: Option<usize> },

    #[error("vector field returned a non-finite value at t = {t}")]
    NonFiniteField { t: f64 },

    #[error("method {0} requires a Jacobian of the vector field")]
    MissingJacobian(Method),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("{method} failed in iteration {iteration}: {source}")]
    Solver {
        method: Method,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("reference integrator not self-consistent: discrepancy {discrepancy:e} exceeds {tolerance:e}")]
    ReferenceFailure { discrepancy: f64, tolerance: f64 },

    #[error("rate fit needs at least 3 usable rows, found {0}")]
    InsufficientRows(usize),

    #[error("reference samples do not line up with the solution mesh: {0}")]
    MisalignedGrids(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("malformed CSV: {0}")]
    Parse(String),
}

fn at_step(step: Option<usize>) -> String {
    step.map(|n| format!(" at mesh index {n}"))
        .unwrap_or_default()
}

impl Error {
    /// Attach a mesh index to singularity errors raised by the inference primitives.
    pub fn at_step(self, n: usize) -> Self {
        match self {
            Error::SingularInnovation { condition, .. } => Error::SingularInnovation {
                step: Some(n),
                condition,
            },
            Error::SingularPrediction { .. } => Error::SingularPrediction { step: Some(n) },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
