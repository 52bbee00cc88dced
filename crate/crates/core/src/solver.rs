//! EKS0 / EKS1 / IEKS drivers for `Dy = f(t, y)`, `y(0) = y0`, with the MAP
//! objective, constraint residuals and the quasi-maximum-likelihood scale.
//!
//! Every driver runs the same filter/smoother over the full mesh. Points
//! with `update_mask[n] == false` are prediction-only; the first point gets
//! the stacked initial-value update instead of an ODE update.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Method, Result};
use crate::inference::{
    init_update, pinv_or_solve, predict, smooth, update, AffineObservation, FilterPoint,
    GaussianState, SmoothedTrajectory, UpdateDiagnostics, UpdateOptions,
};
use crate::linalg::block;
use crate::prior::{discretize, StateSpaceModel, TransitionModel};

pub type VectorField = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type JacobianField = Arc<dyn Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Initial value problem on `[0, horizon]`.
#[derive(Clone)]
pub struct OdeProblem {
    dim: usize,
    vector_field: VectorField,
    jacobian: Option<JacobianField>,
    y0: DVector<f64>,
    horizon: f64,
}

impl fmt::Debug for OdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeProblem")
            .field("dim", &self.dim)
            .field("y0", &self.y0.as_slice())
            .field("horizon", &self.horizon)
            .field("jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl OdeProblem {
    pub fn new<F>(y0: DVector<f64>, horizon: f64, vector_field: F) -> Result<Self>
    where
        F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        if y0.is_empty() {
            return Err(Error::InvalidParameter(
                "initial value must be non-empty".into(),
            ));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self {
            dim: y0.len(),
            vector_field: Arc::new(vector_field),
            jacobian: None,
            y0,
            horizon,
        })
    }

    pub fn with_jacobian<J>(mut self, jacobian: J) -> Self
    where
        J: Fn(f64, &DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jacobian = Some(Arc::new(jacobian));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn y0(&self) -> &DVector<f64> {
        &self.y0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn has_jacobian(&self) -> bool {
        self.jacobian.is_some()
    }

    pub fn eval(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let v = (self.vector_field)(t, y);
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "vector field output",
                expected: self.dim,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteField { t });
        }
        Ok(v)
    }

    pub fn eval_jacobian(&self, t: f64, y: &DVector<f64>, method: Method) -> Result<DMatrix<f64>> {
        let jac = self
            .jacobian
            .as_ref()
            .ok_or(Error::MissingJacobian(method))?;
        let j = jac(t, y);
        if j.shape() != (self.dim, self.dim) {
            return Err(Error::DimensionMismatch {
                context: "jacobian output",
                expected: self.dim,
                found: j.nrows(),
            });
        }
        if j.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteField { t });
        }
        Ok(j)
    }
}

/// Observation matrix `E_1ᵀ - Λ E_0ᵀ` for a state of smoothness `nu`.
fn information_matrix(lambda: Option<&DMatrix<f64>>, dim: usize, nu: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(dim, dim * (nu + 1));
    for i in 0..dim {
        c[(i, dim + i)] = 1.0;
    }
    if let Some(l) = lambda {
        c.view_mut((0, 0), (dim, dim)).copy_from(&(-l));
    }
    c
}

/// Zeroth-order linearization at `mean`: `Λ = 0`, target `f(t, E_0ᵀ mean)`.
pub fn linearize_eks0(
    problem: &OdeProblem,
    nu: usize,
    t: f64,
    mean: &DVector<f64>,
) -> Result<AffineObservation> {
    let d = problem.dim();
    let y = block(mean, 0, d);
    Ok(AffineObservation {
        matrix: information_matrix(None, d, nu),
        target: problem.eval(t, &y)?,
    })
}

/// First-order linearization at `mean`: `Λ = J_f(t, y)`,
/// target `f(t, y) - J_f(t, y) y` with `y = E_0ᵀ mean`.
pub fn linearize_eks1(
    problem: &OdeProblem,
    nu: usize,
    t: f64,
    mean: &DVector<f64>,
) -> Result<AffineObservation> {
    let d = problem.dim();
    let y = block(mean, 0, d);
    let fy = problem.eval(t, &y)?;
    let jac = problem.eval_jacobian(t, &y, Method::Eks1)?;
    let target = fy - &jac * &y;
    Ok(AffineObservation {
        matrix: information_matrix(Some(&jac), d, nu),
        target,
    })
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub method: Method,
    pub prior: StateSpaceModel,
    pub mesh: Vec<f64>,
    /// ODE update at each mesh point; entry 0 is ignored (the initial point
    /// always receives the initial-value update).
    pub update_mask: Vec<bool>,
    pub ieks_max_iters: usize,
    pub ieks_tol: f64,
    pub joseph_form: bool,
    pub nugget: f64,
}

impl SolverConfig {
    pub const DEFAULT_MAX_ITERS: usize = 50;
    pub const DEFAULT_TOL: f64 = 1e-10;

    /// Every mesh point after the first is updated.
    pub fn new(method: Method, prior: StateSpaceModel, mesh: Vec<f64>) -> Self {
        let mut update_mask = vec![true; mesh.len()];
        if let Some(first) = update_mask.first_mut() {
            *first = false;
        }
        Self {
            method,
            prior,
            mesh,
            update_mask,
            ieks_max_iters: Self::DEFAULT_MAX_ITERS,
            ieks_tol: Self::DEFAULT_TOL,
            joseph_form: false,
            nugget: 0.0,
        }
    }

    /// Uniform mesh `0, h, ..., n h` with every point after the first updated.
    pub fn uniform(method: Method, prior: StateSpaceModel, horizon: f64, steps: usize) -> Self {
        Self::new(method, prior, uniform_mesh(horizon, steps))
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.update_mask = mask;
        self
    }

    fn validate(&self, problem: &OdeProblem) -> Result<()> {
        let mesh = &self.mesh;
        if mesh.is_empty() {
            return Err(Error::InvalidMesh("mesh is empty".into()));
        }
        if mesh[0] != 0.0 {
            return Err(Error::InvalidMesh(format!(
                "mesh must start at 0, starts at {}",
                mesh[0]
            )));
        }
        if mesh.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::InvalidMesh(
                "mesh must be strictly increasing".into(),
            ));
        }
        if self.update_mask.len() != mesh.len() {
            return Err(Error::DimensionMismatch {
                context: "update mask",
                expected: mesh.len(),
                found: self.update_mask.len(),
            });
        }
        if self.prior.dim() != problem.dim() {
            return Err(Error::DimensionMismatch {
                context: "prior dimension",
                expected: problem.dim(),
                found: self.prior.dim(),
            });
        }
        if self.method.needs_jacobian() && !problem.has_jacobian() {
            return Err(Error::MissingJacobian(self.method));
        }
        if self.ieks_max_iters == 0 {
            return Err(Error::InvalidParameter(
                "ieks_max_iters must be at least 1".into(),
            ));
        }
        if !(self.nugget >= 0.0) || !(self.ieks_tol >= 0.0) {
            return Err(Error::InvalidParameter(
                "nugget and tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }

    fn update_options(&self) -> UpdateOptions {
        UpdateOptions {
            joseph_form: self.joseph_form,
            nugget: self.nugget,
        }
    }
}

pub fn uniform_mesh(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|i| horizon * i as f64 / steps as f64)
        .collect()
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub method: Method,
    pub nu: usize,
    pub dim: usize,
    pub mesh: Vec<f64>,
    pub update_mask: Vec<bool>,
    /// Smoothed means, one per mesh point.
    pub means: Vec<DVector<f64>>,
    /// Smoothed covariances at unit scale; multiply by `sigma2_hat` for the
    /// calibrated posterior.
    pub covs: Vec<DMatrix<f64>>,
    pub sigma2_hat: f64,
    pub map_objective: f64,
    pub iterations: usize,
    /// False when IEKS hit the iteration cap before the objective settled.
    pub converged: bool,
    pub f_evals: usize,
    pub jf_evals: usize,
}

impl Solution {
    /// `E_mᵀ μ_S(t_n)`.
    pub fn derivative(&self, n: usize, m: usize) -> DVector<f64> {
        block(&self.means[n], m, self.dim)
    }

    /// Calibrated marginal standard deviations of derivative block `m` at `t_n`.
    pub fn std_dev(&self, n: usize, m: usize) -> DVector<f64> {
        let off = m * self.dim;
        DVector::from_fn(self.dim, |i, _| {
            (self.sigma2_hat * self.covs[n][(off + i, off + i)])
                .max(0.0)
                .sqrt()
        })
    }

    /// Mean ± 2 calibrated standard deviations of derivative block `m` at `t_n`.
    pub fn credible_band(&self, n: usize, m: usize) -> (DVector<f64>, DVector<f64>) {
        let mean = self.derivative(n, m);
        let half = self.std_dev(n, m) * 2.0;
        (&mean - &half, mean + half)
    }

    pub fn update_count(&self) -> usize {
        self.update_mask.iter().skip(1).filter(|&&u| u).count()
    }
}

/// Precomputed transitions for a mesh, sharing work between equal steps.
fn mesh_transitions(prior: &StateSpaceModel, mesh: &[f64]) -> Result<Vec<TransitionModel>> {
    let mut cache: HashMap<u64, TransitionModel> = HashMap::new();
    mesh.windows(2)
        .map(|w| {
            let h = w[1] - w[0];
            if let Some(t) = cache.get(&h.to_bits()) {
                return Ok(t.clone());
            }
            let t = discretize(prior, h)?;
            cache.insert(h.to_bits(), t.clone());
            Ok(t)
        })
        .collect()
}

/// `½‖x(t0)‖²_{Σ(t0-)} + ½ Σ_n ‖x(t_n) - A x(t_{n-1})‖²_{Q(h_n)}` with
/// `‖a‖²_Σ = aᵀ Σ⁻¹ a`.
pub fn map_objective(
    trajectory: &[DVector<f64>],
    transitions: &[TransitionModel],
    init_cov: &DMatrix<f64>,
) -> Result<f64> {
    let Some(first) = trajectory.first() else {
        return Ok(0.0);
    };
    if transitions.len() + 1 != trajectory.len() {
        return Err(Error::DimensionMismatch {
            context: "objective transitions",
            expected: trajectory.len() - 1,
            found: transitions.len(),
        });
    }
    let quad = |r: &DVector<f64>, cov: &DMatrix<f64>| -> Result<f64> {
        // diagonal scaling keeps short-step covariances well conditioned
        let scale = cov.diagonal().map(|c| if c > 0.0 { c.sqrt() } else { 1.0 });
        let scaled = DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
            cov[(i, j)] / (scale[i] * scale[j])
        });
        let rs = r.component_div(&scale);
        let rhs = DMatrix::from_column_slice(rs.len(), 1, rs.as_slice());
        Ok(rs.dot(&pinv_or_solve(&scaled, &rhs)?.column(0)))
    };
    let mut v = if first.iter().all(|&x| x == 0.0) {
        0.0
    } else {
        0.5 * quad(first, init_cov)?
    };
    for (n, (t, pair)) in transitions.iter().zip(trajectory.windows(2)).enumerate() {
        let r = &pair[1] - &t.a * &pair[0];
        if r.iter().all(|&x| x == 0.0) {
            continue;
        }
        v += 0.5 * quad(&r, &t.q).map_err(|e| e.at_step(n + 1))?;
    }
    Ok(v)
}

/// `z(t_n, μ_S(t_n)) = E_1ᵀμ - f(t_n, E_0ᵀμ)` at every updated mesh point.
pub fn constraint_residuals(
    solution: &Solution,
    problem: &OdeProblem,
) -> Result<Vec<DVector<f64>>> {
    solution
        .mesh
        .iter()
        .zip(&solution.update_mask)
        .enumerate()
        .skip(1)
        .filter(|(_, (_, &u))| u)
        .map(|(n, (&t, _))| {
            let y = solution.derivative(n, 0);
            Ok(solution.derivative(n, 1) - problem.eval(t, &y)?)
        })
        .collect()
}

/// Quasi-MLE of the common scale `σ²` from unit-scale filter innovations.
/// `diagnostics[0]` is the stacked initial-value update, followed by one
/// entry per ODE update.
pub fn calibrate_sigma2(
    diagnostics: &[UpdateDiagnostics],
    dim: usize,
    n_updates: usize,
) -> Result<f64> {
    if diagnostics.len() != n_updates + 1 {
        return Err(Error::DimensionMismatch {
            context: "calibration diagnostics",
            expected: n_updates + 1,
            found: diagnostics.len(),
        });
    }
    let total = diagnostics
        .iter()
        .map(UpdateDiagnostics::mahalanobis)
        .sum::<Result<f64>>()?;
    Ok(total / (dim * (n_updates + 2)) as f64)
}

/// Where the observation at each updated point is linearized.
enum Linearization<'a> {
    /// On the fly, at the predicted mean.
    Eks0,
    Eks1,
    /// At a fixed trajectory (the previous smoothed means).
    Around(&'a [DVector<f64>]),
}

struct Pass {
    smoothed: SmoothedTrajectory,
    /// Initial update first, then one per ODE update.
    diagnostics: Vec<UpdateDiagnostics>,
    objective: f64,
}

struct Driver<'a> {
    problem: &'a OdeProblem,
    config: &'a SolverConfig,
    transitions: Vec<TransitionModel>,
    /// Mesh indices carrying information (t0 and updated points) and the
    /// transitions between consecutive ones.
    conditioning: Vec<usize>,
    objective_transitions: Vec<TransitionModel>,
    initial: GaussianState,
    initial_diag: UpdateDiagnostics,
    opts: UpdateOptions,
    f_evals: usize,
    jf_evals: usize,
}

impl<'a> Driver<'a> {
    fn new(problem: &'a OdeProblem, config: &'a SolverConfig) -> Result<Self> {
        let prior = &config.prior;
        let transitions = mesh_transitions(prior, &config.mesh)?;
        let conditioning: Vec<usize> = (0..config.mesh.len())
            .filter(|&n| n == 0 || config.update_mask[n])
            .collect();
        let objective_transitions = if conditioning.len() == config.mesh.len() {
            transitions.clone()
        } else {
            let times: Vec<f64> = conditioning.iter().map(|&n| config.mesh[n]).collect();
            mesh_transitions(prior, &times)?
        };
        let opts = config.update_options();
        let n = prior.state_dim();
        let prior_state = GaussianState::new(DVector::zeros(n), prior.init_cov().clone())?;
        let y0 = problem.y0().clone();
        let dy0 = problem.eval(config.mesh[0], &y0)?;
        let (initial, initial_diag) =
            init_update(&prior_state, &y0, &dy0, &opts).map_err(|e| e.at_step(0))?;
        Ok(Self {
            problem,
            config,
            transitions,
            conditioning,
            objective_transitions,
            initial,
            initial_diag,
            opts,
            f_evals: 1,
            jf_evals: 0,
        })
    }

    fn linearize(
        &mut self,
        lin: &Linearization<'_>,
        n: usize,
        predicted: &DVector<f64>,
    ) -> Result<AffineObservation> {
        let nu = self.config.prior.nu();
        let t = self.config.mesh[n];
        let (obs, jac) = match lin {
            Linearization::Eks0 => (linearize_eks0(self.problem, nu, t, predicted)?, false),
            Linearization::Eks1 => (linearize_eks1(self.problem, nu, t, predicted)?, true),
            Linearization::Around(traj) => (linearize_eks1(self.problem, nu, t, &traj[n])?, true),
        };
        self.f_evals += 1;
        if jac {
            self.jf_evals += 1;
        }
        Ok(obs)
    }

    fn run(&mut self, lin: Linearization<'_>) -> Result<Pass> {
        let mesh_len = self.config.mesh.len();
        let mut points = Vec::with_capacity(mesh_len);
        points.push(FilterPoint {
            predicted: self.initial.clone(),
            updated: self.initial.clone(),
        });
        let mut diagnostics = vec![self.initial_diag.clone()];
        for n in 1..mesh_len {
            let predicted = predict(&points[n - 1].updated, &self.transitions[n - 1])?;
            let updated = if self.config.update_mask[n] {
                let obs = self.linearize(&lin, n, &predicted.mean)?;
                let (post, diag) =
                    update(&predicted, &obs, &self.opts).map_err(|e| e.at_step(n))?;
                diagnostics.push(diag);
                post
            } else {
                predicted.clone()
            };
            points.push(FilterPoint { predicted, updated });
        }
        let smoothed = smooth(&points, &self.transitions)?;
        // Prediction-only points sit at their conditional means, so they add
        // nothing beyond the objective over the conditioning points.
        let means: Vec<_> = self
            .conditioning
            .iter()
            .map(|&n| smoothed.states[n].mean.clone())
            .collect();
        let objective = map_objective(
            &means,
            &self.objective_transitions,
            self.config.prior.init_cov(),
        )?;
        Ok(Pass {
            smoothed,
            diagnostics,
            objective,
        })
    }
}

/// Runs the configured method and returns the smoothed MAP estimate.
pub fn solve(problem: &OdeProblem, config: &SolverConfig) -> Result<Solution> {
    config.validate(problem)?;
    let method = config.method;
    let annotate = |iteration: usize| {
        move |e: Error| Error::Solver {
            method,
            iteration,
            source: Box::new(e),
        }
    };
    let mut driver = Driver::new(problem, config).map_err(annotate(0))?;
    let first = match method {
        Method::Eks0 => driver.run(Linearization::Eks0),
        Method::Eks1 | Method::Ieks => driver.run(Linearization::Eks1),
    }
    .map_err(annotate(1))?;

    let mut iterations = 1;
    let mut converged = true;
    let result = if method == Method::Ieks {
        converged = false;
        let mut current = first;
        // lowest-objective iterate among those already superseded
        let mut best: Option<Pass> = None;
        while iterations < config.ieks_max_iters {
            let means: Vec<_> = current
                .smoothed
                .states
                .iter()
                .map(|s| s.mean.clone())
                .collect();
            let next = driver
                .run(Linearization::Around(&means))
                .map_err(annotate(iterations + 1))?;
            iterations += 1;
            let settled = (next.objective - current.objective).abs()
                <= config.ieks_tol * current.objective.abs().max(1.0);
            let previous = std::mem::replace(&mut current, next);
            if settled {
                converged = true;
                break;
            }
            if best
                .as_ref()
                .is_none_or(|b| previous.objective < b.objective)
            {
                best = Some(previous);
            }
        }
        match best {
            Some(b) if !converged && b.objective < current.objective => b,
            _ => current,
        }
    } else {
        first
    };

    let n_updates = config.update_mask.iter().skip(1).filter(|&&u| u).count();
    let sigma2_hat = calibrate_sigma2(&result.diagnostics, problem.dim(), n_updates)?;
    let (means, covs) = result
        .smoothed
        .states
        .into_iter()
        .map(|s| (s.mean, s.cov))
        .unzip();
    Ok(Solution {
        method,
        nu: config.prior.nu(),
        dim: problem.dim(),
        mesh: config.mesh.clone(),
        update_mask: config.update_mask.clone(),
        means,
        covs,
        sigma2_hat,
        map_objective: result.objective,
        iterations,
        converged,
        f_evals: driver.f_evals,
        jf_evals: driver.jf_evals,
    })
}

/// Transitions used by `solve` for a given prior and mesh.
pub fn transitions_for(prior: &StateSpaceModel, mesh: &[f64]) -> Result<Vec<TransitionModel>> {
    mesh_transitions(prior, mesh)
}
