//! Probabilistic ODE solvers that compute the maximum-a-posteriori solution
//! estimate under Gauss–Markov process priors.
//!
//! The pipeline is: build a prior ([`prior`]), discretize it exactly on a
//! mesh, run Gaussian filtering and smoothing ([`inference`]) with the ODE
//! enforced as noiseless affine observations, and relinearize as needed
//! ([`solver`]). [`problems`] holds benchmark ODEs and [`bench`] the
//! convergence harness behind the `odemap` command-line tool.

pub mod bench;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod prior;
pub mod problems;
pub mod solver;

pub use error::{Error, Method, Result};
pub use inference::{GaussianState, UpdateOptions};
pub use prior::{
    build_ioup, build_iwp, build_matern, discretize, StateSpaceModel, TransitionModel,
};
pub use solver::{solve, OdeProblem, Solution, SolverConfig};
