//! Reference solutions that share no code with the proximal solver: a
//! direct linear solve for ridge and exact coordinate descent for the
//! elastic-net LASSO on Θ = ℝ^p.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::LossFamily;

/// argmin ½‖y − Xβ‖² + ridge·‖β‖², i.e. (XᵀX + 2·ridge·I)⁻¹Xᵀy.
pub fn ridge_closed_form(x: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let p = x.ncols();
    let mut a = x.tr_mul(x);
    for j in 0..p {
        a[(j, j)] += 2.0 * ridge;
    }
    let rhs = x.tr_mul(y);
    a.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::InvalidParameter("ridge system is not positive definite".into()))
}

/// argmin Σℓ(y_i, x_iᵀβ) + l1·‖β‖₁ + ridge·‖β‖² by cyclic coordinate
/// descent with exact one-dimensional minimization.
pub fn coordinate_descent(
    loss: LossFamily,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    l1: f64,
    ridge: f64,
    tol: f64,
    max_sweeps: usize,
) -> Result<DVector<f64>> {
    let (n, p) = (x.nrows(), x.ncols());
    let mut beta = DVector::zeros(p);
    let mut eta = DVector::<f64>::zeros(n);
    for _ in 0..max_sweeps {
        let mut biggest = 0.0f64;
        for j in 0..p {
            let col = x.column(j);
            let old = beta[j];
            // smooth part of the coordinate objective as a function of b = β_j
            let slope = |b: f64| -> f64 {
                let mut s = 2.0 * ridge * b;
                for i in 0..n {
                    s += col[i] * loss.grad(y[i], eta[i] + col[i] * (b - old));
                }
                s
            };
            let curv = |b: f64| -> f64 {
                let mut h = 2.0 * ridge;
                for i in 0..n {
                    h += col[i] * col[i] * loss.hess(y[i], eta[i] + col[i] * (b - old));
                }
                h
            };
            let s0 = slope(0.0);
            let new = if s0.abs() <= l1 {
                0.0
            } else if s0 < -l1 {
                increasing_root(|b| slope(b) + l1, &curv, 0.0)
            } else {
                increasing_root(|b| slope(b) - l1, &curv, 0.0)
            };
            if new != old {
                for i in 0..n {
                    eta[i] += col[i] * (new - old);
                }
                beta[j] = new;
            }
            biggest = biggest.max((new - old).abs());
        }
        if !beta.iter().all(|b| b.is_finite()) {
            return Err(Error::NonFinite("coordinate descent iterate"));
        }
        if biggest <= tol {
            return Ok(beta);
        }
    }
    Err(Error::NonConvergence {
        iters: max_sweeps,
        residual: f64::NAN,
        iterate: beta.as_slice().to_vec(),
    })
}

/// Root of an increasing function, Newton with bisection fallback.
fn increasing_root(f: impl Fn(f64) -> f64, df: &impl Fn(f64) -> f64, start: f64) -> f64 {
    let f0 = f(start);
    if f0 == 0.0 {
        return start;
    }
    // bracket
    let dir = if f0 < 0.0 { 1.0 } else { -1.0 };
    let mut step = 1.0;
    let mut far = start + dir * step;
    while f(far) * f0 > 0.0 {
        step *= 2.0;
        far = start + dir * step;
        if step > 1e12 {
            break;
        }
    }
    let (mut lo, mut hi) = if dir > 0.0 { (start, far) } else { (far, start) };
    let mut b = 0.5 * (lo + hi);
    for _ in 0..300 {
        let fb = f(b);
        if fb == 0.0 {
            return b;
        }
        if fb > 0.0 {
            hi = b;
        } else {
            lo = b;
        }
        let mut next = b - fb / df(b);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - b).abs() <= 1e-15 * (1.0 + b.abs()) {
            return next;
        }
        b = next;
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_matches_normal_equations() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = DVector::from_column_slice(&[1.0, 2.0, 3.0]);
        let b = ridge_closed_form(&x, &y, 0.5).unwrap();
        // (XᵀX + I) b = Xᵀy with XᵀX = [[2,1],[1,2]], Xᵀy = (4,5)
        let r = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 3.0]) * &b - DVector::from_column_slice(&[4.0, 5.0]);
        assert!(r.norm() < 1e-12);
    }

    #[test]
    fn orthonormal_lasso_is_soft_thresholding() {
        // X = I: coordinate problems decouple, β_j = S(y_j, l1)/(1 + 2·ridge).
        let x = DMatrix::identity(3, 3);
        let y = DVector::from_column_slice(&[3.0, -0.2, -2.0]);
        let b = coordinate_descent(LossFamily::SquaredError, &x, &y, 0.5, 0.25, 1e-14, 100).unwrap();
        let want = [2.5 / 1.5, 0.0, -1.5 / 1.5];
        for j in 0..3 {
            assert!((b[j] - want[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn logistic_kkt_holds() {
        let x = DMatrix::from_fn(8, 3, |i, j| ((i * 3 + j) as f64 * 0.7).sin());
        let y = DVector::from_fn(8, |i, _| (i % 2) as f64);
        let (l1, ridge) = (0.2, 0.1);
        let b = coordinate_descent(LossFamily::LogisticNll, &x, &y, l1, ridge, 1e-14, 10_000).unwrap();
        let eta = &x * &b;
        for j in 0..3 {
            let g: f64 = (0..8).map(|i| x[(i, j)] * LossFamily::LogisticNll.grad(y[i], eta[i])).sum::<f64>()
                + 2.0 * ridge * b[j];
            if b[j] == 0.0 {
                assert!(g.abs() <= l1 + 1e-10);
            } else {
                assert!((g + l1 * b[j].signum()).abs() < 1e-10);
            }
        }
    }
}
