//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use odemap_core::inference::{
    init_update, predict, smooth, update, AffineObservation, FilterPoint,
};
use odemap_core::{GaussianState, TransitionModel, UpdateOptions};

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

pub fn kron_identity(m: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    m.kronecker(&DMatrix::identity(d, d))
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Closed-form IWP transition, blocks `h^(j-i)/(j-i)!`.
pub fn iwp_transition(nu: usize, d: usize, h: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(nu + 1, nu + 1, |i, j| {
        if j >= i {
            h.powi((j - i) as i32) / factorial(j - i)
        } else {
            0.0
        }
    });
    kron_identity(&a, d)
}

/// Closed-form IWP process noise, blocks
/// `h^(2nu+1-i-j) / ((2nu+1-i-j) (nu-i)! (nu-j)!) Γ`.
pub fn iwp_noise(nu: usize, h: f64, gamma: &DMatrix<f64>) -> DMatrix<f64> {
    let q = DMatrix::from_fn(nu + 1, nu + 1, |i, j| {
        let p = 2 * nu + 1 - i - j;
        h.powi(p as i32) / (p as f64 * factorial(nu - i) * factorial(nu - j))
    });
    kron(&q, gamma)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for k in 0..n {
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for m in 2..=n {
                let p2 = ((2 * m - 1) as f64 * x * p1 - (m - 1) as f64 * p0) / m as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes.push(x);
        weights.push(2.0 / ((1.0 - x * x) * dp * dp));
    }
    (nodes, weights)
}

/// `∫_0^h g(u) g(u)ᵀ du ⊗ Γ` with `g_i(u) = u^(nu-i)/(nu-i)!`, the
/// Green's-function integral for the IWP noise, by Gauss–Legendre quadrature.
pub fn iwp_noise_quadrature(nu: usize, h: f64, gamma: &DMatrix<f64>) -> DMatrix<f64> {
    let (nodes, weights) = gauss_legendre(nu + 4);
    let mut q = DMatrix::zeros(nu + 1, nu + 1);
    for (x, w) in nodes.iter().zip(&weights) {
        let u = 0.5 * h * (x + 1.0);
        let g = DVector::from_fn(nu + 1, |i, _| u.powi((nu - i) as i32) / factorial(nu - i));
        q += &g * g.transpose() * (0.5 * h * w);
    }
    kron(&q, gamma)
}

/// Max entrywise relative error `|a - b| / |b|`, with entries of `b` that
/// are exactly zero compared absolutely.
pub fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            if *y == 0.0 {
                x.abs()
            } else {
                ((x - y) / y).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Posterior of `x ~ N(0, cov)` given the exact linear constraints `H x = b`.
pub fn condition_joint(
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    b: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let s = h * cov * h.transpose();
    let s_inv = s
        .clone()
        .try_inverse()
        .expect("joint innovation is invertible");
    let k = cov * h.transpose() * s_inv;
    let mean = &k * b;
    let post = cov - &k * h * cov;
    (mean, post)
}

/// Covariance of the stacked chain `(x_0, ..., x_N)` started at
/// `x_0 ~ N(0, init_cov)` and driven by the given transitions.
pub fn joint_prior(init_cov: &DMatrix<f64>, trans: &[TransitionModel]) -> DMatrix<f64> {
    let n = init_cov.nrows();
    let len = trans.len() + 1;
    let mut marg = vec![init_cov.clone()];
    for t in trans {
        let last = marg.last().unwrap();
        marg.push(&t.a * last * t.a.transpose() + &t.q);
    }
    let mut joint = DMatrix::zeros(n * len, n * len);
    for i in 0..len {
        let mut phi = DMatrix::identity(n, n);
        for j in i..len {
            if j > i {
                phi = &trans[j - 1].a * phi;
            }
            let block = &phi * &marg[i];
            joint.view_mut((j * n, i * n), (n, n)).copy_from(&block);
            joint
                .view_mut((i * n, j * n), (n, n))
                .copy_from(&block.transpose());
        }
    }
    joint
}

/// Filter and smoother on a chain with the initial-value update at point 0
/// and the given observations at the remaining points.
pub fn filter_smooth(
    init_cov: &DMatrix<f64>,
    y0: &DVector<f64>,
    dy0: &DVector<f64>,
    trans: &[TransitionModel],
    observations: &[Option<AffineObservation>],
    opts: &UpdateOptions,
) -> Vec<GaussianState> {
    let n = init_cov.nrows();
    let prior = GaussianState::new(DVector::zeros(n), init_cov.clone()).unwrap();
    let (first, _) = init_update(&prior, y0, dy0, opts).unwrap();
    let mut points = vec![FilterPoint {
        predicted: prior,
        updated: first,
    }];
    for (t, obs) in trans.iter().zip(observations) {
        let predicted = predict(&points.last().unwrap().updated, t).unwrap();
        let updated = match obs {
            Some(o) => update(&predicted, o, opts).unwrap().0,
            None => predicted.clone(),
        };
        points.push(FilterPoint { predicted, updated });
    }
    smooth(&points, trans).unwrap().states
}
