//! Gauss–Markov priors for a `nu`-times differentiable process on `R^d` and
//! their exact discretization.
//!
//! The state is stacked derivative-major: `X = (Y, DY, ..., D^nu Y)` with
//! each block of size `d`, so state index `m * d + i` holds `D^m Y_i`.
//! The drift is block-companion: identity blocks on the super-diagonal for
//! block rows `0..nu`, and the last block row holds `F_0, ..., F_nu`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{ensure_square, expm, is_symmetric, min_eigenvalue, psd_sqrt, symmetrize};

/// Which sub-class a model was built as. Informational only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorFamily {
    IntegratedWiener,
    IntegratedOrnsteinUhlenbeck,
    Matern,
    General,
}

/// `E_m = e_m ⊗ I_d`, selecting derivative block `m` of the stacked state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSelector {
    pub m: usize,
    pub nu: usize,
    pub dim: usize,
}

impl BlockSelector {
    pub fn new(m: usize, nu: usize, dim: usize) -> Result<Self> {
        if m > nu {
            return Err(Error::InvalidParameter(format!(
                "derivative order {m} exceeds smoothness {nu}"
            )));
        }
        Ok(Self { m, nu, dim })
    }

    /// The `d(nu+1) x d` matrix `E_m`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.dim * (self.nu + 1);
        let mut e = DMatrix::zeros(n, self.dim);
        for i in 0..self.dim {
            e[(self.m * self.dim + i, i)] = 1.0;
        }
        e
    }

    /// `E_mᵀ x` without forming the matrix.
    pub fn extract(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(self.m * self.dim, self.dim).into_owned()
    }
}

/// Continuous-time prior `dX = F X dt + E_nu Γ^{1/2} dW`, `X(0) ~ N(0, Σ(t0-))`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    nu: usize,
    dim: usize,
    drift: DMatrix<f64>,
    diffusion_load: DMatrix<f64>,
    gamma: DMatrix<f64>,
    init_cov: DMatrix<f64>,
    family: PriorFamily,
}

impl StateSpaceModel {
    /// General constructor from the bottom block row `F_0, ..., F_nu`.
    pub fn from_bottom_row(
        nu: usize,
        dim: usize,
        bottom_row: &[DMatrix<f64>],
        gamma: DMatrix<f64>,
        init_cov: DMatrix<f64>,
    ) -> Result<Self> {
        Self::assemble(nu, dim, bottom_row, gamma, init_cov, PriorFamily::General)
    }

    fn assemble(
        nu: usize,
        dim: usize,
        bottom_row: &[DMatrix<f64>],
        gamma: DMatrix<f64>,
        init_cov: DMatrix<f64>,
        family: PriorFamily,
    ) -> Result<Self> {
        if nu == 0 {
            return Err(Error::InvalidParameter(
                "smoothness nu must be at least 1".into(),
            ));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "dimension must be at least 1".into(),
            ));
        }
        if bottom_row.len() != nu + 1 {
            return Err(Error::DimensionMismatch {
                context: "drift bottom row",
                expected: nu + 1,
                found: bottom_row.len(),
            });
        }
        for f in bottom_row {
            if f.shape() != (dim, dim) {
                return Err(Error::DimensionMismatch {
                    context: "drift block",
                    expected: dim,
                    found: f.nrows().max(f.ncols()),
                });
            }
        }
        if ensure_square(&gamma)? != dim {
            return Err(Error::DimensionMismatch {
                context: "gamma",
                expected: dim,
                found: gamma.nrows(),
            });
        }
        let n = dim * (nu + 1);
        if ensure_square(&init_cov)? != n {
            return Err(Error::DimensionMismatch {
                context: "initial covariance",
                expected: n,
                found: init_cov.nrows(),
            });
        }
        if !is_symmetric(&gamma, 1e-12) || gamma.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("gamma"));
        }
        if !is_symmetric(&init_cov, 1e-12)
            || min_eigenvalue(&init_cov) < -1e-12 * init_cov.trace().abs()
        {
            return Err(Error::NotPositiveSemiDefinite("initial covariance"));
        }

        let mut drift = DMatrix::zeros(n, n);
        for i in 0..nu {
            for k in 0..dim {
                drift[(i * dim + k, (i + 1) * dim + k)] = 1.0;
            }
        }
        for (j, f) in bottom_row.iter().enumerate() {
            drift.view_mut((nu * dim, j * dim), (dim, dim)).copy_from(f);
        }
        let gamma = symmetrize(&gamma);
        let diffusion_load = BlockSelector::new(nu, nu, dim)?.matrix() * psd_sqrt(&gamma, "gamma")?;

        Ok(Self {
            nu,
            dim,
            drift,
            diffusion_load,
            gamma,
            init_cov: symmetrize(&init_cov),
            family,
        })
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Side length `d(nu+1)` of the stacked state.
    pub fn state_dim(&self) -> usize {
        self.dim * (self.nu + 1)
    }

    pub fn drift(&self) -> &DMatrix<f64> {
        &self.drift
    }

    pub fn diffusion_load(&self) -> &DMatrix<f64> {
        &self.diffusion_load
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn init_cov(&self) -> &DMatrix<f64> {
        &self.init_cov
    }

    pub fn family(&self) -> PriorFamily {
        self.family
    }

    pub fn selector(&self, m: usize) -> Result<BlockSelector> {
        BlockSelector::new(m, self.nu, self.dim)
    }

    /// Forcing term `E_nu Γ E_nuᵀ` of the covariance dynamics.
    pub fn forcing(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        let mut b = DMatrix::zeros(n, n);
        let off = self.nu * self.dim;
        b.view_mut((off, off), (self.dim, self.dim))
            .copy_from(&self.gamma);
        b
    }

    /// Same drift, with `Σ(t0-)` and `Γ` both multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "scale must be positive, got {c}"
            )));
        }
        let bottom: Vec<_> = (0..=self.nu).map(|j| self.bottom_block(j)).collect();
        Self::assemble(
            self.nu,
            self.dim,
            &bottom,
            &self.gamma * c,
            &self.init_cov * c,
            self.family,
        )
    }

    /// Replace `Σ(t0-)`.
    pub fn with_init_cov(&self, init_cov: DMatrix<f64>) -> Result<Self> {
        let bottom: Vec<_> = (0..=self.nu).map(|j| self.bottom_block(j)).collect();
        Self::assemble(
            self.nu,
            self.dim,
            &bottom,
            self.gamma.clone(),
            init_cov,
            self.family,
        )
    }

    /// `F_j`, the `j`-th block of the last block row of the drift.
    pub fn bottom_block(&self, j: usize) -> DMatrix<f64> {
        self.drift
            .view((self.nu * self.dim, j * self.dim), (self.dim, self.dim))
            .into_owned()
    }
}

/// `nu`-times integrated Wiener process: all `F_m = 0`.
pub fn build_iwp(
    nu: usize,
    dim: usize,
    gamma: DMatrix<f64>,
    init_cov: DMatrix<f64>,
) -> Result<StateSpaceModel> {
    let zeros = vec![DMatrix::zeros(dim, dim); nu + 1];
    StateSpaceModel::assemble(
        nu,
        dim,
        &zeros,
        gamma,
        init_cov,
        PriorFamily::IntegratedWiener,
    )
}

/// `nu`-times integrated Ornstein–Uhlenbeck process: `F_m = 0` for `m < nu`,
/// `F_nu = f_nu`.
pub fn build_ioup(
    nu: usize,
    dim: usize,
    f_nu: DMatrix<f64>,
    gamma: DMatrix<f64>,
    init_cov: DMatrix<f64>,
) -> Result<StateSpaceModel> {
    if f_nu.shape() != (dim, dim) {
        return Err(Error::DimensionMismatch {
            context: "F_nu",
            expected: dim,
            found: f_nu.nrows().max(f_nu.ncols()),
        });
    }
    let mut row = vec![DMatrix::zeros(dim, dim); nu + 1];
    row[nu] = f_nu;
    StateSpaceModel::assemble(
        nu,
        dim,
        &row,
        gamma,
        init_cov,
        PriorFamily::IntegratedOrnsteinUhlenbeck,
    )
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Scalar Matérn process of smoothness `nu`:
/// `F_m = -C(nu+1, m) λ^(nu+1-m)`, `Γ = 2σ²λ^(2nu+1)`, started in stationarity.
pub fn build_matern(nu: usize, lambda: f64, sigma2: f64) -> Result<StateSpaceModel> {
    matern(nu, 1, lambda, sigma2)
}

/// `dim` independent scalar Matérn processes with common `(nu, λ, σ²)`,
/// interleaved into the derivative-major state layout.
pub fn build_matern_multivariate(
    nu: usize,
    dim: usize,
    lambda: f64,
    sigma2: f64,
) -> Result<StateSpaceModel> {
    matern(nu, dim, lambda, sigma2)
}

fn matern(nu: usize, dim: usize, lambda: f64, sigma2: f64) -> Result<StateSpaceModel> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "Matérn rate must be positive, got {lambda}"
        )));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "Matérn scale must be positive, got {sigma2}"
        )));
    }
    if nu == 0 {
        return Err(Error::InvalidParameter(
            "smoothness nu must be at least 1".into(),
        ));
    }
    let eye = DMatrix::<f64>::identity(dim, dim);
    let row: Vec<_> = (0..=nu)
        .map(|m| &eye * (-binomial(nu + 1, m) * lambda.powi((nu + 1 - m) as i32)))
        .collect();
    let gamma = &eye * (2.0 * sigma2 * lambda.powi(2 * nu as i32 + 1));
    let n = dim * (nu + 1);
    // Placeholder initial covariance, replaced by the stationary one below.
    let provisional = StateSpaceModel::assemble(
        nu,
        dim,
        &row,
        gamma.clone(),
        DMatrix::identity(n, n),
        PriorFamily::Matern,
    )?;
    let stationary = stationary_covariance(&provisional)?;
    StateSpaceModel::assemble(nu, dim, &row, gamma, stationary, PriorFamily::Matern)
}

/// Threshold on the largest real part of the drift spectrum below which the
/// drift counts as Hurwitz.
const HURWITZ_MARGIN: f64 = -1e-10;

/// Solves `F Σ + Σ Fᵀ + E_nu Γ E_nuᵀ = 0` for the stationary covariance.
pub fn stationary_covariance(model: &StateSpaceModel) -> Result<DMatrix<f64>> {
    let f = model.drift();
    let max_real_part = f
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_real_part >= HURWITZ_MARGIN {
        return Err(Error::NoStationaryDistribution { max_real_part });
    }
    let sol = solve_lyapunov(f, &model.forcing())?;
    Ok(symmetrize(&sol))
}

/// Solves `F X + X Fᵀ = -B` through the vectorized Kronecker system.
fn solve_lyapunov(f: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    // Column-major vec: vec(F X) = (I ⊗ F) vec X, vec(X Fᵀ) = (F ⊗ I) vec X.
    let system = eye.kronecker(f) + f.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, b.iter().map(|v| -v));
    let x = system
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular { jitter: 0.0 })?;
    Ok(DMatrix::from_column_slice(n, n, x.as_slice()))
}

/// Exact discrete-time parameters for one step of length `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pub step: f64,
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl TransitionModel {
    pub fn identity(n: usize) -> Self {
        Self {
            step: 0.0,
            a: DMatrix::identity(n, n),
            q: DMatrix::zeros(n, n),
        }
    }

    /// Same transition with `Q` multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            step: self.step,
            a: self.a.clone(),
            q: &self.q * c,
        }
    }
}

/// `A(h) = exp(F h)` and `Q(h) = ∫_0^h e^{Fτ} E_nu Γ E_nuᵀ e^{Fᵀτ} dτ` via
/// the matrix fraction decomposition.
///
/// The block matrix is exponentiated in balanced coordinates `x̃_m = h^m x_m`
/// (a diagonal similarity applied to both blocks) with the forcing
/// normalized to unit size. In those coordinates every entry of `Q̃` has the
/// same order `h^(2nu+1)`, so the tiny leading entries of `Q` keep full
/// relative accuracy once the scaling is undone.
///
/// When `ρ(F) h > 1` the decomposition is applied to `h / 2^s` with
/// `ρ(F) h / 2^s ≤ 1` and the result doubled `s` times
/// (`A ← A²`, `Q ← A Q Aᵀ + Q`), which avoids the cancellation between the
/// growing and decaying halves of the block exponential.
pub fn discretize(model: &StateSpaceModel, step: f64) -> Result<TransitionModel> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "step must be positive and finite, got {step}"
        )));
    }
    let rho = model
        .drift()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    let doublings = if rho * step > 1.0 {
        ((rho * step).log2().ceil() as i32).min(64)
    } else {
        0
    };
    let sub = step / 2f64.powi(doublings);
    let mut t = fraction_decomposition(model, sub)?;
    for _ in 0..doublings {
        let q = &t.a * &t.q * t.a.transpose() + &t.q;
        t.a = &t.a * &t.a;
        t.q = symmetrize(&q);
    }
    if t.a.iter().chain(t.q.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Overflow);
    }
    t.step = step;
    Ok(t)
}

fn fraction_decomposition(model: &StateSpaceModel, step: f64) -> Result<TransitionModel> {
    let n = model.state_dim();
    let d = model.dim();
    let scale: Vec<f64> = (0..n).map(|i| step.powi((i / d) as i32)).collect();

    // P F P⁻¹ h
    let f_bal = DMatrix::from_fn(n, n, |i, j| {
        model.drift()[(i, j)] * scale[i] / scale[j] * step
    });
    // P B P h
    let b = model.forcing();
    let b_bal = DMatrix::from_fn(n, n, |i, j| b[(i, j)] * scale[i] * scale[j] * step);
    let b_norm = b_bal.amax();
    if !(b_norm > 0.0 && b_norm.is_finite()) {
        return Err(Error::Overflow);
    }

    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&f_bal);
    block.view_mut((0, n), (n, n)).copy_from(&(b_bal / b_norm));
    block
        .view_mut((n, n), (n, n))
        .copy_from(&(-f_bal.transpose()));
    let xi = expm(&block)?;

    let xi11 = xi.view((0, 0), (n, n)).into_owned();
    let xi12 = xi.view((0, n), (n, n)).into_owned();
    let q_bal = (&xi12 * xi11.transpose()) * b_norm;

    let a = DMatrix::from_fn(n, n, |i, j| xi11[(i, j)] / scale[i] * scale[j]);
    let q = DMatrix::from_fn(n, n, |i, j| q_bal[(i, j)] / (scale[i] * scale[j]));
    if a.iter().chain(q.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Overflow);
    }
    Ok(TransitionModel {
        step,
        a,
        q: symmetrize(&q),
    })
}
