use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use super::composite::{CompositeProx, NonsmoothPart};
use super::constraint::ConstraintSet;
use crate::error::{Error, Result};

/// One block of a group-LASSO partition with its positive-definite kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub indices: Vec<usize>,
    pub kernel: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    identity: bool,
}

impl Group {
    pub fn new(indices: Vec<usize>, kernel: Option<DMatrix<f64>>) -> Result<Self> {
        let k = indices.len();
        if k == 0 {
            return Err(Error::InvalidParameter("empty group".into()));
        }
        let kernel = kernel.unwrap_or_else(|| DMatrix::identity(k, k));
        if kernel.nrows() != k || kernel.ncols() != k {
            return Err(Error::Shape {
                expected: k,
                got: kernel.nrows(),
            });
        }
        if (&kernel - kernel.transpose()).amax() > 1e-12 * (1.0 + kernel.amax()) {
            return Err(Error::InvalidParameter("group kernel must be symmetric".into()));
        }
        let eig = SymmetricEigen::new(kernel.clone());
        if eig.eigenvalues.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidParameter(
                "group kernel must be positive definite".into(),
            ));
        }
        let identity = kernel == DMatrix::identity(k, k);
        Ok(Group {
            indices,
            kernel,
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
            identity,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    fn gather(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| x[i]))
    }

    fn k_norm(&self, b: &DVector<f64>) -> f64 {
        b.dot(&(&self.kernel * b)).max(0.0).sqrt()
    }

    fn sigma_max(&self) -> f64 {
        self.eigenvalues.max()
    }

    /// argmin_x t·‖x‖_K + ½‖x − u‖².
    fn prox(&self, u: &DVector<f64>, t: f64) -> DVector<f64> {
        if self.identity {
            let norm = u.norm();
            return if norm <= t {
                DVector::zeros(u.len())
            } else {
                u * (1.0 - t / norm)
            };
        }
        // In the eigenbasis of K the solution is x = Q (I + (t/s)Λ)^{-1} c with
        // c = Qᵀu and s = ‖x‖_K solving Σ λ_k c_k² / (s + tλ_k)² = 1.
        let c = self.eigenvectors.transpose() * u;
        let lam = &self.eigenvalues;
        let dual_norm2: f64 = c.iter().zip(lam.iter()).map(|(ci, li)| ci * ci / li).sum();
        if dual_norm2 <= t * t {
            return DVector::zeros(u.len());
        }
        let omega = |s: f64| -> (f64, f64) {
            let mut f = -1.0;
            let mut df = 0.0;
            for (ci, li) in c.iter().zip(lam.iter()) {
                let d = s + t * li;
                f += li * ci * ci / (d * d);
                df -= 2.0 * li * ci * ci / (d * d * d);
            }
            (f, df)
        };
        // ω is convex and decreasing on s ≥ 0, so Newton from 0 increases monotonically to the root.
        let mut s = 0.0;
        for _ in 0..200 {
            let (f, df) = omega(s);
            let step = f / df;
            s -= step;
            if step.abs() <= 1e-15 * s.max(1e-300) {
                break;
            }
        }
        let scaled = DVector::from_iterator(
            c.len(),
            c.iter().zip(lam.iter()).map(|(ci, li)| ci * s / (s + t * li)),
        );
        &self.eigenvectors * scaled
    }
}

/// Non-smooth part r₀ of the elastic penalty r = (1−η)r₀ + η‖β‖².
#[derive(Debug, Clone, PartialEq)]
pub enum R0Variant {
    /// r₀ ≡ 0 (pure ridge).
    Zero,
    Lasso,
    /// ‖Dβ‖₁ for an m×p matrix D.
    GeneralizedLasso { d: DMatrix<f64> },
    /// Σ_j (β_Jjᵀ K_j β_Jj)^{1/2} over a partition of the coordinates.
    GroupLasso { groups: Vec<Group> },
    /// Schatten-q norm of β reshaped row-major into rows × cols; q ∈ {1, 2}.
    SchattenNorm { rows: usize, cols: usize, q: u32 },
}

impl R0Variant {
    /// First-difference matrix of size (p−1)×p: (Dβ)_i = β_i − β_{i+1}.
    pub fn fused(p: usize) -> Self {
        let d = DMatrix::from_fn(p.saturating_sub(1), p, |i, j| {
            if j == i {
                1.0
            } else if j == i + 1 {
                -1.0
            } else {
                0.0
            }
        });
        R0Variant::GeneralizedLasso { d }
    }

    /// Contiguous groups of equal size with identity kernels.
    pub fn contiguous_groups(p: usize, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidParameter("group size must be positive".into()));
        }
        let groups = (0..p)
            .step_by(size)
            .map(|start| Group::new((start..(start + size).min(p)).collect(), None))
            .collect::<Result<Vec<_>>>()?;
        Ok(R0Variant::GroupLasso { groups })
    }

    pub fn nuclear(rows: usize, cols: usize) -> Self {
        R0Variant::SchattenNorm { rows, cols, q: 1 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            R0Variant::Zero => "none",
            R0Variant::Lasso => "lasso",
            R0Variant::GeneralizedLasso { .. } => "generalized_lasso",
            R0Variant::GroupLasso { .. } => "group_lasso",
            R0Variant::SchattenNorm { q: 1, .. } => "nuclear",
            R0Variant::SchattenNorm { .. } => "schatten",
        }
    }

    /// Check that the variant is well formed for dimension `p`.
    pub fn validate(&self, p: usize) -> Result<()> {
        match self {
            R0Variant::GeneralizedLasso { d } if d.ncols() != p => Err(Error::Shape {
                expected: p,
                got: d.ncols(),
            }),
            R0Variant::GroupLasso { groups } => {
                let mut seen = vec![false; p];
                for g in groups {
                    for &i in &g.indices {
                        if i >= p || seen[i] {
                            return Err(Error::InvalidParameter(format!(
                                "groups must partition 0..{p}; index {i} is out of range or repeated"
                            )));
                        }
                        seen[i] = true;
                    }
                }
                if seen.iter().any(|s| !s) {
                    return Err(Error::InvalidParameter(format!(
                        "groups must cover every coordinate of 0..{p}"
                    )));
                }
                Ok(())
            }
            R0Variant::SchattenNorm { rows, cols, q } => {
                if rows * cols != p {
                    Err(Error::InvalidParameter(format!(
                        "schatten shape {rows}x{cols} does not match p = {p}"
                    )))
                } else if !matches!(q, 1 | 2) {
                    Err(Error::Unsupported(format!("schatten order {q}; only 1 and 2")))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Lipschitz constant of r₀ with respect to the Euclidean norm.
    pub fn lipschitz(&self, p: usize) -> f64 {
        match self {
            R0Variant::Zero => 0.0,
            R0Variant::Lasso => (p as f64).sqrt(),
            R0Variant::GeneralizedLasso { d } => {
                let rows = d.nrows();
                if rows == 0 {
                    return 0.0;
                }
                let op = operator_norm(d);
                let row_sum: f64 = d.row_iter().map(|r| r.norm()).sum();
                (op * (rows as f64).sqrt()).min(row_sum)
            }
            R0Variant::GroupLasso { groups } => {
                groups.iter().map(Group::sigma_max).sum::<f64>().sqrt()
            }
            R0Variant::SchattenNorm { rows, cols, q } => {
                let k = (*rows).min(*cols) as f64;
                k.powf(1.0 / *q as f64 - 0.5)
            }
        }
    }
}

/// σ_max(D).
pub fn operator_norm(d: &DMatrix<f64>) -> f64 {
    if d.is_empty() {
        return 0.0;
    }
    SVD::new(d.clone(), false, false).singular_values.max()
}

fn check_len(beta: &DVector<f64>, p: usize) -> Result<()> {
    if beta.len() != p {
        Err(Error::Shape {
            expected: p,
            got: beta.len(),
        })
    } else {
        Ok(())
    }
}

fn as_matrix(beta: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, beta.as_slice())
}

fn as_vector(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.len(), m.transpose().iter().cloned())
}

/// Σ_k f(σ_k) u_k v_kᵀ over singular triplets with σ_k > floor.
///
/// Triplets come from the symmetric eigenproblem of [[0, A], [Aᵀ, 0]], whose
/// positive eigenvalues are the σ_k with eigenvectors (u_k; v_k)/√2. The
/// bidiagonal SVD loses up to ~1e-5 on nearly rank-deficient inputs; this
/// stays at rounding level and the sum does not depend on the basis chosen
/// inside a repeated σ.
fn spectral_map(a: &DMatrix<f64>, floor: f64, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let mut j = DMatrix::zeros(m + n, m + n);
    j.view_mut((0, m), (m, n)).copy_from(a);
    j.view_mut((m, 0), (n, m)).copy_from(&a.transpose());
    let eig = SymmetricEigen::new(j);
    let mut out = DMatrix::zeros(m, n);
    for (k, &s) in eig.eigenvalues.iter().enumerate() {
        if s > floor {
            let e = eig.eigenvectors.column(k);
            out += (e.rows(0, m) * e.rows(m, n).transpose()) * (2.0 * f(s));
        }
    }
    out
}

pub fn eval_r0(r0: &R0Variant, beta: &DVector<f64>) -> Result<f64> {
    match r0 {
        R0Variant::GeneralizedLasso { d } => check_len(beta, d.ncols())?,
        R0Variant::SchattenNorm { rows, cols, .. } => check_len(beta, rows * cols)?,
        R0Variant::GroupLasso { groups } => {
            let p: usize = groups.iter().map(|g| g.indices.len()).sum();
            check_len(beta, p)?
        }
        _ => {}
    }
    Ok(eval_unchecked(r0, beta))
}

pub(crate) fn eval_unchecked(r0: &R0Variant, beta: &DVector<f64>) -> f64 {
    match r0 {
        R0Variant::Zero => 0.0,
        R0Variant::Lasso => beta.lp_norm(1),
        R0Variant::GeneralizedLasso { d } => (d * beta).lp_norm(1),
        R0Variant::GroupLasso { groups } => {
            groups.iter().map(|g| g.k_norm(&g.gather(beta))).sum()
        }
        R0Variant::SchattenNorm { rows, cols, q } => {
            if *q == 2 {
                beta.norm()
            } else {
                SVD::new(as_matrix(beta, *rows, *cols), false, false)
                    .singular_values
                    .sum()
            }
        }
    }
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// argmin_x { t·r₀(x) + ½‖u − x‖² }.
pub fn prox_r0(r0: &R0Variant, u: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("prox step must be positive, got {t}")));
    }
    match r0 {
        R0Variant::GeneralizedLasso { d } => {
            check_len(u, d.ncols())?;
            let theta = ConstraintSet::FullSpace;
            CompositeProx::new(NonsmoothPart::Exact(r0), 1.0, &theta).apply(u, t)
        }
        _ => {
            r0.validate(u.len())?;
            Ok(prox_direct(r0, u, t).expect("direct prox available"))
        }
    }
}

/// Closed-form (or scalar-root) prox for every variant except the generalized LASSO.
pub(crate) fn prox_direct(r0: &R0Variant, u: &DVector<f64>, t: f64) -> Option<DVector<f64>> {
    Some(match r0 {
        R0Variant::Zero => u.clone(),
        R0Variant::Lasso => u.map(|v| soft(v, t)),
        R0Variant::GeneralizedLasso { .. } => return None,
        R0Variant::GroupLasso { groups } => {
            let mut out = DVector::zeros(u.len());
            for g in groups {
                let x = g.prox(&g.gather(u), t);
                for (k, &i) in g.indices.iter().enumerate() {
                    out[i] = x[k];
                }
            }
            out
        }
        R0Variant::SchattenNorm { rows, cols, q } => {
            if *q == 2 {
                let norm = u.norm();
                if norm <= t {
                    DVector::zeros(u.len())
                } else {
                    u * (1.0 - t / norm)
                }
            } else {
                as_vector(&spectral_map(&as_matrix(u, *rows, *cols), t, |s| s - t))
            }
        }
    })
}

/// An element of ∂r₀(β); the minimal-norm one where that is cheap to identify.
pub fn subgrad_r0(r0: &R0Variant, beta: &DVector<f64>) -> DVector<f64> {
    match r0 {
        R0Variant::Zero => DVector::zeros(beta.len()),
        R0Variant::Lasso => beta.map(sign0),
        R0Variant::GeneralizedLasso { d } => d.transpose() * (d * beta).map(sign0),
        R0Variant::GroupLasso { groups } => {
            let mut out = DVector::zeros(beta.len());
            for g in groups {
                let b = g.gather(beta);
                let norm = g.k_norm(&b);
                if norm > 0.0 {
                    let kb = &g.kernel * &b / norm;
                    for (k, &i) in g.indices.iter().enumerate() {
                        out[i] = kb[k];
                    }
                }
            }
            out
        }
        R0Variant::SchattenNorm { rows, cols, q } => {
            if *q == 2 {
                let norm = beta.norm();
                if norm > 0.0 {
                    beta / norm
                } else {
                    DVector::zeros(beta.len())
                }
            } else {
                let a = as_matrix(beta, *rows, *cols);
                let smax = a.norm();
                as_vector(&spectral_map(&a, 1e-12 * smax.max(1e-300), |_| 1.0))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn randn(p: usize, seed: u64) -> DVector<f64> {
        let mut rng = stream(seed, Purpose::Init);
        DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn eval_examples() {
        assert_eq!(eval_r0(&R0Variant::Lasso, &v(&[1.0, -2.0, 0.0])).unwrap(), 3.0);
        assert_eq!(eval_r0(&R0Variant::fused(3), &v(&[1.0, 2.0, 4.0])).unwrap(), 3.0);
        let nuc = eval_r0(&R0Variant::nuclear(2, 2), &v(&[3.0, 0.0, 0.0, 4.0])).unwrap();
        assert!((nuc - 7.0).abs() < 1e-12);
        assert!(eval_r0(&R0Variant::fused(3), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn prox_examples() {
        let x = prox_r0(&R0Variant::Lasso, &v(&[2.0, -0.5]), 1.0).unwrap();
        assert_eq!(x, v(&[1.0, 0.0]));
        let u = v(&[0.3, -1.7, 2.2]);
        let x = prox_r0(&R0Variant::Lasso, &u, 1e-12).unwrap();
        assert!((x - &u).amax() <= 1.001e-12);
        assert!(prox_r0(&R0Variant::Lasso, &u, 0.0).is_err());
    }

    fn prox_objective(r0: &R0Variant, u: &DVector<f64>, t: f64, x: &DVector<f64>) -> f64 {
        t * eval_unchecked(r0, x) + 0.5 * (u - x).norm_squared()
    }

    #[test]
    fn fused_prox_matches_lattice_search() {
        let r0 = R0Variant::fused(3);
        let u = v(&[0.0, 1.0, 10.0]);
        let x = prox_r0(&r0, &u, 1.0).unwrap();
        // Coarse lattice over a wide box, then refine around the best lattice point.
        let mut center = u.clone();
        let mut half = 12.0;
        for _ in 0..12 {
            let steps = 24;
            let mut best = (f64::INFINITY, center.clone());
            for a in 0..=steps {
                for b in 0..=steps {
                    for c in 0..=steps {
                        let cand = v(&[
                            center[0] - half + 2.0 * half * a as f64 / steps as f64,
                            center[1] - half + 2.0 * half * b as f64 / steps as f64,
                            center[2] - half + 2.0 * half * c as f64 / steps as f64,
                        ]);
                        let f = prox_objective(&r0, &u, 1.0, &cand);
                        if f < best.0 {
                            best = (f, cand);
                        }
                    }
                }
            }
            center = best.1;
            half /= 4.0;
        }
        assert!((&x - &center).amax() < 1e-3, "{x} vs {center}");
        assert!((x - v(&[1.0, 1.0, 9.0])).amax() < 1e-8);
    }

    #[test]
    fn subgradient_examples() {
        assert_eq!(subgrad_r0(&R0Variant::Lasso, &v(&[2.0, -3.0, 0.0])), v(&[1.0, -1.0, 0.0]));
        let d = R0Variant::fused(4);
        let beta = v(&[1.0, 3.0, 2.0, 5.0]);
        if let R0Variant::GeneralizedLasso { d: mat } = &d {
            let want = mat.transpose() * (mat * &beta).map(f64::signum);
            assert_eq!(subgrad_r0(&d, &beta), want);
        }
        let nuc = R0Variant::nuclear(3, 3);
        let b = randn(9, 4);
        let g = subgrad_r0(&nuc, &b);
        assert!((g.dot(&b) - eval_r0(&nuc, &b).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn group_prox_with_general_kernel_is_optimal() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.0, 0.2, 0.0, 0.2, 0.5]);
        let g = Group::new(vec![0, 1, 2], Some(a.clone())).unwrap();
        let r0 = R0Variant::GroupLasso { groups: vec![g] };
        for seed in 0..20 {
            let u = randn(3, seed) * 2.0;
            let t = 0.7;
            let x = prox_r0(&r0, &u, t).unwrap();
            let base = prox_objective(&r0, &u, t, &x);
            for k in 0..200 {
                let d = randn(3, 1000 + k) * 1e-4;
                assert!(prox_objective(&r0, &u, t, &(&x + d)) >= base - 1e-13);
            }
        }
        // below the dual threshold the prox is exactly zero
        let small = v(&[0.01, 0.0, 0.0]);
        assert_eq!(prox_r0(&r0, &small, 1.0).unwrap(), DVector::zeros(3));
    }

    #[test]
    fn rejects_bad_groups_and_shapes() {
        assert!(Group::new(vec![0, 1], Some(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]))).is_err());
        let r0 = R0Variant::GroupLasso {
            groups: vec![Group::new(vec![0, 1], None).unwrap()],
        };
        assert!(r0.validate(3).is_err());
        assert!(R0Variant::nuclear(2, 3).validate(7).is_err());
        assert!(R0Variant::SchattenNorm { rows: 2, cols: 2, q: 3 }.validate(4).is_err());
    }

    #[test]
    fn declared_lipschitz_constants() {
        let a = DMatrix::from_diagonal(&v(&[3.0, 1.0]));
        let r0 = R0Variant::GroupLasso {
            groups: vec![Group::new(vec![0, 1], Some(a)).unwrap(), Group::new(vec![2], None).unwrap()],
        };
        assert!((r0.lipschitz(3) - 2.0).abs() < 1e-12);
        assert!((R0Variant::nuclear(6, 6).lipschitz(36) - 6f64.sqrt()).abs() < 1e-12);
        assert!((R0Variant::Lasso.lipschitz(9) - 3.0).abs() < 1e-12);
    }
}
