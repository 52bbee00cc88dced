//! Dense linear-algebra helpers shared by the prior and inference code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Returns `(m + mᵀ) / 2`. The result is bitwise symmetric because IEEE
/// addition commutes.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

pub fn ensure_square(m: &DMatrix<f64>) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::NonSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    m.nrows() == m.ncols()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= rel_tol * scale))
}

/// Symmetric square root of a positive semi-definite matrix via its
/// eigendecomposition. Eigenvalues down to `-1e-12 * trace` are clamped to 0.
pub fn psd_sqrt(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    ensure_square(m)?;
    if !is_symmetric(m, 1e-12) {
        return Err(Error::NotPositiveSemiDefinite(what));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let floor = -1e-12 * m.trace().abs().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&l| l < floor) {
        return Err(Error::NotPositiveSemiDefinite(what));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(symmetrize(
        &(v * DMatrix::from_diagonal(&roots) * v.transpose()),
    ))
}

/// Block `m` (of size `d`) of a derivative-major stacked vector.
pub fn block(x: &DVector<f64>, m: usize, d: usize) -> DVector<f64> {
    x.rows(m * d, d).into_owned()
}

/// Matrix exponential by scaling and squaring with Padé approximants of
/// degree 3, 5, 7, 9 or 13 chosen from the 1-norm (Higham 2005).
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = ensure_square(a)?;
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow);
    }
    let norm = one_norm(a);
    let eye = DMatrix::<f64>::identity(n, n);

    let (u, v, squarings) = if norm < THETA[0] {
        let (u, v) = pade_low(a, &PADE3);
        (u, v, 0)
    } else if norm < THETA[1] {
        let (u, v) = pade_low(a, &PADE5);
        (u, v, 0)
    } else if norm < THETA[2] {
        let (u, v) = pade_low(a, &PADE7);
        (u, v, 0)
    } else if norm < THETA[3] {
        let (u, v) = pade_low(a, &PADE9);
        (u, v, 0)
    } else {
        let s = (norm / THETA[4]).log2().ceil().max(0.0) as i32;
        let scaled = a * 2f64.powi(-s);
        let (u, v) = pade13(&scaled, &eye);
        (u, v, s as u32)
    };

    let numer = &v + &u;
    let denom = v - u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .ok_or(Error::Singular { jitter: 0.0 })?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Overflow);
    }
    Ok(r)
}

const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.539_398_330_063_23e-1,
    9.504178996162932e-1,
    2.097847961257068e0,
    5.371920351148152e0,
];

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// U (odd part) and V (even part) for degrees up to 9, built from even powers.
fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let mut odd = &eye * b[1];
    let mut even = &eye * b[0];
    let mut power = eye.clone();
    let mut k = 2;
    while k < b.len() {
        power = &power * &a2;
        even += &power * b[k];
        if k + 1 < b.len() {
            odd += &power * b[k + 1];
        }
        k += 2;
    }
    (a * odd, even)
}

fn pade13(a: &DMatrix<f64>, eye: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = &PADE13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + eye * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + eye * b[0];
    (u, v)
}
