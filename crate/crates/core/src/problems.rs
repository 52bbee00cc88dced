//! Benchmark initial value problems with reference solutions.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::solver::OdeProblem;

pub type ReferenceFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub struct NamedProblem {
    pub label: String,
    pub problem: OdeProblem,
    pub reference: Option<ReferenceFn>,
    pub reference_derivative: Option<ReferenceFn>,
}

impl fmt::Debug for NamedProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NamedProblem")
            .field("label", &self.label)
            .field("problem", &self.problem)
            .field("closed_form", &self.reference.is_some())
            .finish()
    }
}

fn scalar(v: f64) -> DVector<f64> {
    DVector::from_element(1, v)
}

fn with_closed_form<R, D>(
    label: &str,
    problem: OdeProblem,
    reference: R,
    derivative: D,
) -> NamedProblem
where
    R: Fn(f64) -> f64 + Send + Sync + 'static,
    D: Fn(f64) -> f64 + Send + Sync + 'static,
{
    NamedProblem {
        label: label.to_string(),
        problem,
        reference: Some(Arc::new(move |t| scalar(reference(t)))),
        reference_derivative: Some(Arc::new(move |t| scalar(derivative(t)))),
    }
}

/// `y' = 10 y (1 - y)`, `y(0) = 0.15` on `[0, 1]`.
pub fn logistic() -> NamedProblem {
    let y0 = 0.15;
    let problem = OdeProblem::new(scalar(y0), 1.0, |_, y| scalar(10.0 * y[0] * (1.0 - y[0])))
        .expect("valid logistic problem")
        .with_jacobian(|_, y| DMatrix::from_element(1, 1, 10.0 * (1.0 - 2.0 * y[0])));
    let shift = 1.0 / y0 - 1.0;
    with_closed_form(
        "logistic",
        problem,
        move |t| {
            let e = (10.0 * t).exp();
            e / (e + shift)
        },
        move |t| {
            let e = (10.0 * t).exp();
            10.0 * e * shift / ((e + shift) * (e + shift))
        },
    )
}

/// `y' = -c y³ / 2`, `y(0) = 1` on `[0, 1]`.
pub fn riccati(c: f64) -> Result<NamedProblem> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "Riccati coefficient must be positive, got {c}"
        )));
    }
    let y0 = 1.0f64;
    let problem = OdeProblem::new(scalar(y0), 1.0, move |_, y| scalar(-c * y[0].powi(3) / 2.0))?
        .with_jacobian(move |_, y| DMatrix::from_element(1, 1, -1.5 * c * y[0] * y[0]));
    let inv_sq = 1.0 / (y0 * y0);
    Ok(with_closed_form(
        "riccati",
        problem,
        move |t| 1.0 / (c * t + inv_sq).sqrt(),
        move |t| -0.5 * c * (c * t + inv_sq).powf(-1.5),
    ))
}

/// FitzHugh–Nagumo, `y(0) = (-1, 1)` on `[0, 2.5]`. No closed form.
pub fn fitzhugh_nagumo(a: f64, b: f64, c: f64) -> Result<NamedProblem> {
    if c == 0.0 || !c.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "FitzHugh–Nagumo c must be non-zero, got {c}"
        )));
    }
    let problem = OdeProblem::new(DVector::from_vec(vec![-1.0, 1.0]), 2.5, move |_, y| {
        DVector::from_vec(vec![
            c * (y[0] - y[0].powi(3) / 3.0 + y[1]),
            -(y[0] - a + b * y[1]) / c,
        ])
    })?
    .with_jacobian(move |_, y| {
        DMatrix::from_row_slice(2, 2, &[c * (1.0 - y[0] * y[0]), c, -1.0 / c, -b / c])
    });
    Ok(NamedProblem {
        label: "fhn".into(),
        problem,
        reference: None,
        reference_derivative: None,
    })
}

pub const FHN_DEFAULTS: (f64, f64, f64) = (0.2, 0.2, 2.0);

/// Piecewise field `κ` for `y ≤ b`, `κ + λ (y - b)` above, on `[0, 1]`.
/// The solution has a kink in its second derivative at `τ* = (b - y0)/κ`.
pub fn nonsmooth(kappa: f64, b: f64, lambda: f64, y0: f64) -> Result<NamedProblem> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "κ must be positive, got {kappa}"
        )));
    }
    if y0 > b {
        return Err(Error::InvalidParameter(format!(
            "y0 = {y0} must not exceed b = {b}"
        )));
    }
    if lambda == 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "λ must be non-zero, got {lambda}"
        )));
    }
    let field = move |y: f64| {
        if y <= b {
            kappa
        } else {
            kappa + lambda * (y - b)
        }
    };
    let problem = OdeProblem::new(scalar(y0), 1.0, move |_, y| scalar(field(y[0])))?.with_jacobian(
        move |_, y| DMatrix::from_element(1, 1, if y[0] <= b { 0.0 } else { lambda }),
    );
    let tau = (b - y0) / kappa;
    Ok(with_closed_form(
        "nonsmooth",
        problem,
        move |t| {
            if t <= tau {
                y0 + kappa * t
            } else {
                b + ((lambda * (t - tau)).exp() - 1.0) * kappa / lambda
            }
        },
        move |t| {
            if t <= tau {
                kappa
            } else {
                kappa * (lambda * (t - tau)).exp()
            }
        },
    ))
}

/// Defaults `y0 = 0`, `b = 1`, `κ = 2 (b - y0)`, `λ = -5`.
pub fn nonsmooth_default() -> NamedProblem {
    nonsmooth(2.0, 1.0, -5.0, 0.0).expect("valid defaults")
}

/// Solution and derivative samples on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSamples {
    pub grid: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    pub derivatives: Vec<DVector<f64>>,
}

/// Refinement of the reference integrator relative to the requested grid.
pub const REFERENCE_REFINEMENT: usize = 64;
/// Largest reference integrator step, as a fraction of the horizon.
pub const REFERENCE_MAX_STEP: f64 = 1.0 / 16384.0;
/// Maximum disagreement allowed between the reference and its 2× refinement.
pub const REFERENCE_TOLERANCE: f64 = 1e-10;

/// Reference values on `grid`: the closed form if there is one, otherwise
/// classical RK4 with at least `REFERENCE_REFINEMENT` substeps per grid
/// interval (more if needed to keep substeps below
/// `REFERENCE_MAX_STEP · T`), checked against a run with twice as many.
pub fn reference_on_grid(named: &NamedProblem, grid: &[f64]) -> Result<ReferenceSamples> {
    let horizon = named.problem.horizon();
    if let Some(&bad) = grid.iter().find(|&&t| !(0.0..=horizon).contains(&t)) {
        return Err(Error::InvalidMesh(format!(
            "grid point {bad} outside [0, {horizon}]"
        )));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidMesh("grid must be sorted".into()));
    }
    let values = match &named.reference {
        Some(r) => grid.iter().map(|&t| r(t)).collect(),
        None => {
            let widest = grid
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(grid.first().copied().unwrap_or(0.0), f64::max);
            let substeps =
                REFERENCE_REFINEMENT.max((widest / (horizon * REFERENCE_MAX_STEP)).ceil() as usize);
            let coarse = rk4_on_grid(&named.problem, grid, substeps)?;
            let fine = rk4_on_grid(&named.problem, grid, 2 * substeps)?;
            let discrepancy = coarse
                .iter()
                .zip(&fine)
                .map(|(a, b)| (a - b).amax())
                .fold(0.0, f64::max);
            if !(discrepancy <= REFERENCE_TOLERANCE) {
                return Err(Error::ReferenceFailure {
                    discrepancy,
                    tolerance: REFERENCE_TOLERANCE,
                });
            }
            coarse
        }
    };
    let derivatives = match &named.reference_derivative {
        Some(dr) => grid.iter().map(|&t| dr(t)).collect(),
        None => grid
            .iter()
            .zip(&values)
            .map(|(&t, y)| named.problem.eval(t, y))
            .collect::<Result<_>>()?,
    };
    Ok(ReferenceSamples {
        grid: grid.to_vec(),
        values,
        derivatives,
    })
}

/// Classical fourth-order Runge–Kutta from `t = 0`, taking `substeps` equal
/// steps inside every grid interval.
pub fn rk4_on_grid(
    problem: &OdeProblem,
    grid: &[f64],
    substeps: usize,
) -> Result<Vec<DVector<f64>>> {
    let mut t = 0.0;
    let mut y = problem.y0().clone();
    let mut out = Vec::with_capacity(grid.len());
    for &target in grid {
        let h = (target - t) / substeps as f64;
        if h > 0.0 {
            for k in 0..substeps {
                let tk = t + k as f64 * h;
                let k1 = problem.eval(tk, &y)?;
                let k2 = problem.eval(tk + 0.5 * h, &(&y + &k1 * (0.5 * h)))?;
                let k3 = problem.eval(tk + 0.5 * h, &(&y + &k2 * (0.5 * h)))?;
                let k4 = problem.eval(tk + h, &(&y + &k3 * h))?;
                y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
        }
        t = target;
        out.push(y.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn central_difference(r: &ReferenceFn, t: f64) -> f64 {
        let h = 1e-5;
        (r(t + h)[0] - r(t - h)[0]) / (2.0 * h)
    }

    fn closed_form_problems() -> Vec<NamedProblem> {
        vec![
            logistic(),
            riccati(1.0).unwrap(),
            riccati(3.5).unwrap(),
            nonsmooth_default(),
        ]
    }

    #[test]
    fn logistic_values() {
        let p = logistic();
        let r = p.reference.as_ref().unwrap();
        assert_eq!(r(0.0)[0], 0.15);
        let end = r(1.0)[0];
        assert!(end > 0.99 && end < 1.0);
        assert_relative_eq!(r(40.0)[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(
            p.problem.eval(0.0, &scalar(0.15)).unwrap()[0],
            1.275,
            epsilon = 1e-15
        );
    }

    #[test]
    fn riccati_values() {
        let p = riccati(1.0).unwrap();
        let r = p.reference.as_ref().unwrap();
        assert_eq!(r(0.0)[0], 1.0);
        assert_relative_eq!(r(3.0)[0], 0.5, epsilon = 1e-15);
        assert_eq!(p.problem.eval(0.0, &scalar(1.0)).unwrap()[0], -0.5);
        assert_eq!(p.reference_derivative.as_ref().unwrap()(0.0)[0], -0.5);
        assert!(riccati(0.0).is_err());
    }

    #[test]
    fn fitzhugh_nagumo_defaults() {
        let (a, b, c) = FHN_DEFAULTS;
        assert_eq!((a, b, c), (0.2, 0.2, 2.0));
        let p = fitzhugh_nagumo(a, b, c).unwrap();
        let y0 = p.problem.y0().clone();
        assert_eq!(y0.as_slice(), &[-1.0, 1.0]);
        assert_eq!(p.problem.horizon(), 2.5);
        let f = p.problem.eval(0.0, &y0).unwrap();
        assert_relative_eq!(f[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(f[1], 0.5, epsilon = 1e-15);
        let j = p
            .problem
            .eval_jacobian(0.0, &y0, crate::Method::Eks1)
            .unwrap();
        assert_relative_eq!(
            j,
            DMatrix::from_row_slice(2, 2, &[0.0, 2.0, -0.5, -0.1]),
            epsilon = 1e-15
        );
        assert!(fitzhugh_nagumo(a, b, 0.0).is_err());
    }

    #[test]
    fn nonsmooth_values() {
        let p = nonsmooth_default();
        let r = p.reference.as_ref().unwrap();
        assert_eq!(r(0.5)[0], 1.0);
        assert_eq!(r(0.25)[0], 0.5);
        let expected = 1.0 + (1.0 / -5.0) * ((-5.0f64 * 0.5).exp() - 1.0) * 2.0;
        assert_relative_eq!(r(1.0)[0], expected, epsilon = 1e-15);
        assert_relative_eq!(r(1.0)[0], 1.36716, epsilon = 1e-5);
        assert!(nonsmooth(0.0, 1.0, -5.0, 0.0).is_err());
        assert!(nonsmooth(1.0, 1.0, -5.0, 2.0).is_err());
    }

    #[test]
    fn nonsmooth_reference_is_c1_at_kink() {
        let p = nonsmooth_default();
        let (r, dr) = (p.reference.unwrap(), p.reference_derivative.unwrap());
        let tau = 0.5;
        let eps = 1e-13;
        assert!((r(tau - eps)[0] - r(tau + eps)[0]).abs() <= 1e-12);
        assert!((dr(tau)[0] - dr(tau + eps)[0]).abs() <= 1e-11);
    }

    #[test]
    fn jacobian_piecewise_takes_left_value_at_kink() {
        let p = nonsmooth_default();
        let at_b = p
            .problem
            .eval_jacobian(0.0, &scalar(1.0), crate::Method::Eks1)
            .unwrap();
        assert_eq!(at_b[(0, 0)], 0.0);
        let above = p
            .problem
            .eval_jacobian(0.0, &scalar(1.1), crate::Method::Eks1)
            .unwrap();
        assert_eq!(above[(0, 0)], -5.0);
    }

    #[test]
    fn references_satisfy_their_ode() {
        for p in closed_form_problems() {
            let r = p.reference.as_ref().unwrap();
            let dr = p.reference_derivative.as_ref().unwrap();
            assert_eq!(r(0.0), p.problem.y0().clone(), "{}", p.label);
            for i in 0..100 {
                let t = p.problem.horizon() * i as f64 / 99.0;
                let y = r(t);
                let f = p.problem.eval(t, &y).unwrap();
                assert!((dr(t)[0] - f[0]).abs() <= 1e-9, "{} at {t}", p.label);
            }
        }
    }

    #[test]
    fn reference_derivatives_match_finite_differences() {
        for p in closed_form_problems() {
            let r = p.reference.as_ref().unwrap();
            let dr = p.reference_derivative.as_ref().unwrap();
            for &t in &[0.1, 0.33, 0.7, 0.9] {
                let fd = central_difference(r, t);
                assert!(
                    (fd - dr(t)[0]).abs() <= 1e-6 * dr(t)[0].abs().max(1.0),
                    "{} at {t}",
                    p.label
                );
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let (a, b, c) = FHN_DEFAULTS;
        let mut all = closed_form_problems();
        all.push(fitzhugh_nagumo(a, b, c).unwrap());
        for p in all {
            let d = p.problem.dim();
            for probe in [0.13, -0.4, 0.77] {
                let y = DVector::from_fn(d, |i, _| probe + 0.31 * i as f64);
                let j = p
                    .problem
                    .eval_jacobian(0.2, &y, crate::Method::Eks1)
                    .unwrap();
                for k in 0..d {
                    let eps = 1e-6;
                    let mut yp = y.clone();
                    let mut ym = y.clone();
                    yp[k] += eps;
                    ym[k] -= eps;
                    let col = (p.problem.eval(0.2, &yp).unwrap()
                        - p.problem.eval(0.2, &ym).unwrap())
                        / (2.0 * eps);
                    for i in 0..d {
                        assert!(
                            (col[i] - j[(i, k)]).abs() <= 1e-5 * j[(i, k)].abs().max(1.0),
                            "{}",
                            p.label
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn closed_form_reference_is_delegated() {
        let p = logistic();
        let s = reference_on_grid(&p, &[0.0, 0.5, 1.0]).unwrap();
        let r = p.reference.as_ref().unwrap();
        for (t, v) in s.grid.iter().zip(&s.values) {
            assert_eq!(v, &r(*t));
        }
    }

    #[test]
    fn fhn_reference_starts_at_initial_value_and_is_self_consistent() {
        let (a, b, c) = FHN_DEFAULTS;
        let p = fitzhugh_nagumo(a, b, c).unwrap();
        let grid: Vec<f64> = (0..=256).map(|i| 2.5 * i as f64 / 256.0).collect();
        let s = reference_on_grid(&p, &grid).unwrap();
        assert_eq!(s.values[0].as_slice(), &[-1.0, 1.0]);
        assert_eq!(s.derivatives[0], p.problem.eval(0.0, &s.values[0]).unwrap());
    }

    #[test]
    fn coarse_grid_gets_extra_substeps() {
        let (a, b, c) = FHN_DEFAULTS;
        let p = fitzhugh_nagumo(a, b, c).unwrap();
        let coarse = reference_on_grid(&p, &[0.0, 1.25, 2.5]).unwrap();
        let fine = reference_on_grid(&p, &crate::solver::uniform_mesh(2.5, 64)).unwrap();
        assert!((&coarse.values[2] - &fine.values[64]).amax() <= 1e-10);
    }

    #[test]
    fn unresolved_dynamics_fail_self_consistency() {
        let fast = NamedProblem {
            label: "fast".into(),
            problem: OdeProblem::new(DVector::from_vec(vec![1.0, 0.0]), 1.0, |_, y| {
                DVector::from_vec(vec![2000.0 * y[1], -2000.0 * y[0]])
            })
            .unwrap(),
            reference: None,
            reference_derivative: None,
        };
        assert!(matches!(
            reference_on_grid(&fast, &[0.0, 1.0]),
            Err(Error::ReferenceFailure { .. })
        ));
    }

    #[test]
    fn rk4_is_fourth_order() {
        let p = logistic();
        let exact = p.reference.as_ref().unwrap()(1.0)[0];
        let e1 = (rk4_on_grid(&p.problem, &[1.0], 40).unwrap()[0][0] - exact).abs();
        let e2 = (rk4_on_grid(&p.problem, &[1.0], 80).unwrap()[0][0] - exact).abs();
        let order = (e1 / e2).log2();
        assert!((order - 4.0).abs() < 0.3, "observed order {order}");
    }
}
