//! Gaussian filtering and Rauch–Tung–Striebel smoothing on a mesh with
//! noiseless affine observations `C x = target`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::prior::TransitionModel;

/// Condition number of the innovation covariance above which an update is
/// refused.
pub const MAX_INNOVATION_CONDITION: f64 = 1e14;

const JITTER_LADDER: [f64; 4] = [0.0, 1e-14, 1e-12, 1e-10];

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianState {
    /// Builds a state, symmetrizing `cov`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "gaussian state",
                expected: mean.len(),
                found: cov.nrows(),
            });
        }
        Ok(Self {
            mean,
            cov: symmetrize(&cov),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Linear functional `C x` that must equal `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineObservation {
    pub matrix: DMatrix<f64>,
    pub target: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDiagnostics {
    /// `target - C μ⁻`
    pub residual: DVector<f64>,
    /// `S = C Σ⁻ Cᵀ (+ nugget I)`
    pub innovation_cov: DMatrix<f64>,
    pub log_det_s: f64,
}

impl UpdateDiagnostics {
    /// `rᵀ S⁻¹ r`.
    pub fn mahalanobis(&self) -> Result<f64> {
        if self.residual.iter().all(|&v| v == 0.0) {
            return Ok(0.0);
        }
        let x = pinv_or_solve(
            &self.innovation_cov,
            &DMatrix::from_column_slice(self.residual.len(), 1, self.residual.as_slice()),
        )?;
        Ok(self.residual.dot(&x.column(0)))
    }
}

/// Options for the measurement update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOptions {
    /// Use `(I-KC) Σ (I-KC)ᵀ + K R Kᵀ` instead of `Σ - K S Kᵀ`.
    pub joseph_form: bool,
    /// Observation noise variance `R = nugget · I`; zero for exact conditioning.
    pub nugget: f64,
}

impl Default for UpdateOptions {
    fn default() -> Self {
        Self {
            joseph_form: false,
            nugget: 0.0,
        }
    }
}

/// A filtered mesh point: the prediction and the (possibly skipped) update.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPoint {
    pub predicted: GaussianState,
    pub updated: GaussianState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTrajectory {
    pub states: Vec<GaussianState>,
    /// `gains[n]` maps mesh point `n + 1` back to `n`.
    pub gains: Vec<DMatrix<f64>>,
}

/// Solves `s x = rhs` for symmetric `s` by Cholesky, adding `k · trace(s) · I`
/// for `k` in `0, 1e-14, 1e-12, 1e-10` until the factorization succeeds.
pub fn pinv_or_solve(s: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s.nrows() != s.ncols() {
        return Err(Error::NonSquare {
            rows: s.nrows(),
            cols: s.ncols(),
        });
    }
    if rhs.nrows() != s.nrows() {
        return Err(Error::DimensionMismatch {
            context: "solve right-hand side",
            expected: s.nrows(),
            found: rhs.nrows(),
        });
    }
    let trace = s.trace().abs();
    let n = s.nrows();
    let mut last = 0.0;
    for k in JITTER_LADDER {
        last = k * trace;
        let mut m = symmetrize(s);
        if last > 0.0 {
            for i in 0..n {
                m[(i, i)] += last;
            }
        }
        if let Some(chol) = m.cholesky() {
            let x = chol.solve(rhs);
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
    }
    Err(Error::Singular { jitter: last })
}

/// `μ' = A μ`, `Σ' = A Σ Aᵀ + Q`.
pub fn predict(state: &GaussianState, trans: &TransitionModel) -> Result<GaussianState> {
    let n = state.dim();
    if trans.a.shape() != (n, n) || trans.q.shape() != (n, n) {
        return Err(Error::DimensionMismatch {
            context: "prediction",
            expected: n,
            found: trans.a.nrows(),
        });
    }
    let mean = &trans.a * &state.mean;
    let cov = &trans.a * &state.cov * trans.a.transpose() + &trans.q;
    GaussianState::new(mean, cov)
}

/// Conditions `state` on `obs.matrix · x = obs.target`.
pub fn update(
    state: &GaussianState,
    obs: &AffineObservation,
    opts: &UpdateOptions,
) -> Result<(GaussianState, UpdateDiagnostics)> {
    let n = state.dim();
    let c = &obs.matrix;
    if c.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "observation matrix columns",
            expected: n,
            found: c.ncols(),
        });
    }
    if obs.target.len() != c.nrows() {
        return Err(Error::DimensionMismatch {
            context: "observation target",
            expected: c.nrows(),
            found: obs.target.len(),
        });
    }
    let k = c.nrows();
    let residual = &obs.target - c * &state.mean;
    let c_sigma = c * &state.cov;
    let mut s = &c_sigma * c.transpose();
    if opts.nugget > 0.0 {
        for i in 0..k {
            s[(i, i)] += opts.nugget;
        }
    }
    let s = symmetrize(&s);

    let eig = SymmetricEigen::new(s.clone());
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let chol = if condition <= MAX_INNOVATION_CONDITION {
        s.clone().cholesky()
    } else {
        None
    };
    let Some(chol) = chol else {
        if opts.nugget == 0.0 && already_satisfied(state, obs, &residual, &s) {
            return Ok((
                state.clone(),
                UpdateDiagnostics {
                    residual: DVector::zeros(k),
                    innovation_cov: DMatrix::zeros(k, k),
                    log_det_s: 0.0,
                },
            ));
        }
        return Err(Error::SingularInnovation {
            step: None,
            condition,
        });
    };
    let log_det_s = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    // Kᵀ = S⁻¹ C Σ
    let gain_t = chol.solve(&c_sigma);
    let gain = gain_t.transpose();
    let mean = &state.mean + &gain * &residual;
    let cov = if opts.joseph_form {
        let i_kc = DMatrix::identity(n, n) - &gain * c;
        let mut cov = &i_kc * &state.cov * i_kc.transpose();
        if opts.nugget > 0.0 {
            cov += &gain * gain_t.clone() * opts.nugget;
        }
        cov
    } else {
        &state.cov - c_sigma.transpose() * &gain_t
    };

    Ok((
        GaussianState::new(mean, cov)?,
        UpdateDiagnostics {
            residual,
            innovation_cov: s,
            log_det_s,
        },
    ))
}

/// True when both `S` and the residual are at rounding level, i.e. the state
/// already satisfies the observation exactly.
fn already_satisfied(
    state: &GaussianState,
    obs: &AffineObservation,
    residual: &DVector<f64>,
    s: &DMatrix<f64>,
) -> bool {
    const ROUNDING: f64 = 64.0 * f64::EPSILON;
    let c_abs = obs.matrix.abs();
    let s_ref = &c_abs * state.cov.abs() * c_abs.transpose();
    let r_ref = obs.target.abs() + &c_abs * state.mean.abs();
    s.iter()
        .zip(s_ref.iter())
        .all(|(v, r)| v.abs() <= ROUNDING * r)
        && residual
            .iter()
            .zip(r_ref.iter())
            .all(|(v, r)| v.abs() <= ROUNDING * r)
}

/// Conditions the prior at `t0` on `E_0ᵀ x = y0` and `E_1ᵀ x = dy0` in one
/// stacked update.
pub fn init_update(
    state: &GaussianState,
    y0: &DVector<f64>,
    dy0: &DVector<f64>,
    opts: &UpdateOptions,
) -> Result<(GaussianState, UpdateDiagnostics)> {
    let d = y0.len();
    if dy0.len() != d {
        return Err(Error::DimensionMismatch {
            context: "initial derivative",
            expected: d,
            found: dy0.len(),
        });
    }
    let n = state.dim();
    if d == 0 || !n.is_multiple_of(d) || n / d < 2 {
        return Err(Error::DimensionMismatch {
            context: "initial state",
            expected: 2 * d,
            found: n,
        });
    }
    let mut c = DMatrix::zeros(2 * d, n);
    for i in 0..d {
        c[(i, i)] = 1.0;
        c[(d + i, d + i)] = 1.0;
    }
    let mut target = DVector::zeros(2 * d);
    target.rows_mut(0, d).copy_from(y0);
    target.rows_mut(d, d).copy_from(dy0);
    update(state, &AffineObservation { matrix: c, target }, opts)
}

/// Backward Rauch–Tung–Striebel pass. `transitions[n]` carries point `n` to
/// `n + 1`, so `points[n + 1].predicted` came from `points[n].updated`.
pub fn smooth(
    points: &[FilterPoint],
    transitions: &[TransitionModel],
) -> Result<SmoothedTrajectory> {
    let Some(last) = points.last() else {
        return Ok(SmoothedTrajectory {
            states: Vec::new(),
            gains: Vec::new(),
        });
    };
    if transitions.len() + 1 != points.len() {
        return Err(Error::DimensionMismatch {
            context: "smoother transitions",
            expected: points.len() - 1,
            found: transitions.len(),
        });
    }
    let n_points = points.len();
    let mut states = vec![last.updated.clone(); n_points];
    let mut gains = vec![DMatrix::zeros(0, 0); n_points - 1];

    for n in (0..n_points - 1).rev() {
        let filt = &points[n].updated;
        let pred_next = &points[n + 1].predicted;
        let a = &transitions[n].a;
        // Gᵀ = Σ⁻(n+1)⁻¹ A Σ(n)
        let gain_t = pinv_or_solve(&pred_next.cov, &(a * &filt.cov))
            .map_err(|_| Error::SingularPrediction { step: Some(n + 1) })?;
        let gain = gain_t.transpose();
        let next = &states[n + 1];
        let mean = &filt.mean + &gain * (&next.mean - &pred_next.mean);
        let cov = &gain * (&next.cov - &pred_next.cov) * &gain_t + &filt.cov;
        states[n] = GaussianState::new(mean, cov)?;
        gains[n] = gain;
    }
    Ok(SmoothedTrajectory { states, gains })
}
