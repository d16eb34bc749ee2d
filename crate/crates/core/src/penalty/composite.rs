//! Proximal map of w·R + I_Θ, where R is r₀ or its closed-form smoothing.
//!
//! Closed forms cover the common cases; everything else goes through a
//! consensus ADMM that splits x into a copy for R (through D for the
//! generalized LASSO) and a copy for Θ. The ADMM state is kept between calls
//! so that successive prox evaluations inside a first-order loop warm start.
//! When ADMM stalls (degenerate solutions, e.g. nuclear norm on the orthant)
//! and R has a direct prox, an Anderson-accelerated projected gradient on the
//! dual takes over.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::constraint::{project, ConstraintSet};
use super::r0::{eval_unchecked, prox_direct, R0Variant};
use super::smoothing::{prox_smoothed_abs, prox_smoothed_abs_from, smoothed_abs, smoothed_abs_grad};
use crate::error::{Error, Result};

pub const ADMM_TOL: f64 = 1e-10;
const ADMM_ADAPT_ITERS: usize = 200;
pub const ADMM_MAX_ITERS: usize = 10_000;
const DUAL_MAX_ITERS: usize = 50_000;
const ANDERSON_MEMORY: usize = 5;

#[derive(Debug, Clone, Copy)]
pub enum NonsmoothPart<'a> {
    /// r₀ itself.
    Exact(&'a R0Variant),
    /// Closed-form Gaussian smoothing of the ℓ₁ norm.
    SmoothedLasso { alpha: f64 },
}

impl NonsmoothPart<'_> {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self {
            NonsmoothPart::Exact(r0) => eval_unchecked(r0, x),
            NonsmoothPart::SmoothedLasso { alpha } => x.iter().map(|&b| smoothed_abs(b, *alpha)).sum(),
        }
    }

    /// Gradient when the part is differentiable everywhere.
    pub fn gradient(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            NonsmoothPart::Exact(R0Variant::Zero) => Some(DVector::zeros(x.len())),
            NonsmoothPart::Exact(_) => None,
            NonsmoothPart::SmoothedLasso { alpha } => Some(x.map(|b| smoothed_abs_grad(b, *alpha))),
        }
    }

    fn is_separable(&self) -> bool {
        matches!(
            self,
            NonsmoothPart::SmoothedLasso { .. }
                | NonsmoothPart::Exact(R0Variant::Lasso)
                | NonsmoothPart::Exact(R0Variant::Zero)
        )
    }

    fn scalar_prox(&self, u: f64, tau: f64) -> f64 {
        match self {
            NonsmoothPart::SmoothedLasso { alpha } => prox_smoothed_abs(u, tau, *alpha),
            NonsmoothPart::Exact(R0Variant::Zero) => u,
            _ => u.signum() * (u.abs() - tau).max(0.0),
        }
    }

    /// Norms that only see |x_j| and are monotone in it: their prox
    /// restricted to the orthant is the prox of the positive part.
    fn is_absolute_norm(&self) -> bool {
        match self {
            NonsmoothPart::Exact(R0Variant::GroupLasso { groups }) => {
                groups.iter().all(|g| g.is_identity())
            }
            NonsmoothPart::Exact(R0Variant::SchattenNorm { q: 2, .. }) => true,
            _ => self.is_separable(),
        }
    }

    fn linear_operator(&self) -> Option<&DMatrix<f64>> {
        match self {
            NonsmoothPart::Exact(R0Variant::GeneralizedLasso { d }) => Some(d),
            _ => None,
        }
    }

    /// Prox of τ·R applied to the split variable (after D for the generalized LASSO).
    fn split_prox(&self, v: &DVector<f64>, tau: f64) -> DVector<f64> {
        match self {
            NonsmoothPart::Exact(R0Variant::GeneralizedLasso { .. }) => {
                v.map(|s| s.signum() * (s.abs() - tau).max(0.0))
            }
            NonsmoothPart::Exact(r0) => prox_direct(r0, v, tau).expect("direct prox"),
            _ => v.map(|s| self.scalar_prox(s, tau)),
        }
    }
}

#[derive(Debug, Clone)]
struct AdmmState {
    z: DVector<f64>,
    a: DVector<f64>,
    w: DVector<f64>,
    b: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct CompositeProx<'a> {
    pub part: NonsmoothPart<'a>,
    pub weight: f64,
    pub theta: &'a ConstraintSet,
    pub rho: f64,
    state: Option<AdmmState>,
    factor: Option<Cholesky<f64, Dyn>>,
    /// Total inner ADMM iterations spent so far.
    pub inner_iters: usize,
}

impl<'a> CompositeProx<'a> {
    pub fn new(part: NonsmoothPart<'a>, weight: f64, theta: &'a ConstraintSet) -> Self {
        CompositeProx {
            part,
            weight,
            theta,
            rho: 1.0,
            state: None,
            factor: None,
            inner_iters: 0,
        }
    }

    /// w·R(x), ignoring the indicator.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        if self.weight == 0.0 {
            0.0
        } else {
            self.weight * self.part.value(x)
        }
    }

    /// argmin_x t·w·R(x) + I_Θ(x) + ½‖x − u‖².
    pub fn apply(&mut self, u: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let tau = t * self.weight;
        if tau == 0.0 || matches!(self.part, NonsmoothPart::Exact(R0Variant::Zero)) {
            return Ok(project(self.theta, u));
        }
        let full = matches!(self.theta, ConstraintSet::FullSpace);
        if self.part.is_separable() && self.theta.is_separable() {
            return Ok(DVector::from_fn(u.len(), |j, _| {
                let (lo, hi) = self.theta.interval(j).expect("separable set");
                self.part.scalar_prox(u[j], tau).clamp(lo, hi)
            }));
        }
        if full && self.part.linear_operator().is_none() {
            return Ok(self.part.split_prox(u, tau));
        }
        if matches!(self.theta, ConstraintSet::NonnegativeOrthant) && self.part.is_absolute_norm() {
            return Ok(self.part.split_prox(&u.map(|v| v.max(0.0)), tau));
        }
        let (x, residual) = self.admm(u, tau);
        if residual <= ADMM_TOL {
            return Ok(x);
        }
        if self.part.linear_operator().is_none() {
            self.dual_anderson(u, tau)
        } else {
            self.admm_restarts(u, tau, residual)
        }
    }

    /// Cold restarts over a ρ ladder for the generalized LASSO, where R has
    /// no direct prox.
    fn admm_restarts(&mut self, u: &DVector<f64>, tau: f64, residual: f64) -> Result<DVector<f64>> {
        let base = self.rho;
        let mut best = residual;
        for scale in [10.0, 0.1, 100.0] {
            self.rho = (base * scale).clamp(1e-4, 1e4);
            self.factor = None;
            self.state = None;
            let (x, residual) = self.admm(u, tau);
            if residual <= ADMM_TOL {
                return Ok(x);
            }
            best = best.min(residual);
        }
        Err(Error::InnerNonConvergence {
            what: "composite prox ADMM",
            iters: 4 * ADMM_MAX_ITERS,
            residual: best,
        })
    }

    /// Projected gradient on the dual of min ½‖x − u‖² + τR(x) + I_Θ(x),
    ///   λ ← z − Π_Θ(z),  z = λ + prox_{τR}(u − λ),
    /// iterated in z with safeguarded Anderson extrapolation. Stops when the
    /// step is below ADMM_TOL; the answer is then Π_Θ(z).
    fn dual_anderson(&mut self, u: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
        let p = u.len();
        let part = &self.part;
        let theta = self.theta;
        let map = |z: &DVector<f64>| {
            let lam = z - project(theta, z);
            part.split_prox(&(u - &lam), tau) + lam
        };
        let mut z = project(theta, u);
        let mut g = map(&z);
        let mut hist: Vec<(DVector<f64>, DVector<f64>)> = vec![];
        let mut residual = f64::INFINITY;
        for it in 1..=DUAL_MAX_ITERS {
            let f = &g - &z;
            residual = f.norm();
            if residual <= ADMM_TOL {
                self.inner_iters += it;
                return Ok(project(theta, &g));
            }
            hist.push((f.clone(), g.clone()));
            if hist.len() > ANDERSON_MEMORY + 1 {
                hist.remove(0);
            }
            let k = hist.len() - 1;
            let mut cand = None;
            if k > 0 {
                let df = DMatrix::from_fn(p, k, |i, j| hist[j + 1].0[i] - hist[j].0[i]);
                let dg = DMatrix::from_fn(p, k, |i, j| hist[j + 1].1[i] - hist[j].1[i]);
                if let Ok(gamma) = df.svd(true, true).solve(&f, 1e-12) {
                    cand = Some(&g - dg * gamma);
                }
            }
            // keep the extrapolated point only if it lowers the fixed-point residual
            if let Some(c) = cand {
                let gc = map(&c);
                if (&gc - &c).norm() < residual {
                    z = c;
                    g = gc;
                    continue;
                }
                hist.clear();
            }
            z = g;
            g = map(&z);
        }
        self.inner_iters += DUAL_MAX_ITERS;
        Err(Error::InnerNonConvergence {
            what: "composite prox dual iteration",
            iters: DUAL_MAX_ITERS,
            residual,
        })
    }

    /// The same prox evaluated at u = x0 + v. For the smoothed LASSO the
    /// scalar problems are solved in increment form, which stays accurate
    /// at large α; other parts simply form u.
    pub fn apply_step(&mut self, x0: &DVector<f64>, v: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let tau = t * self.weight;
        if let NonsmoothPart::SmoothedLasso { alpha } = self.part {
            if tau > 0.0 && self.theta.is_separable() {
                return Ok(DVector::from_fn(x0.len(), |j, _| {
                    let (lo, hi) = self.theta.interval(j).expect("separable set");
                    prox_smoothed_abs_from(x0[j], v[j], tau, alpha).clamp(lo, hi)
                }));
            }
        }
        self.apply(&(x0 + v), t)
    }

    /// Runs to ADMM_TOL or the iteration budget; returns the iterate and its residual.
    fn admm(&mut self, u: &DVector<f64>, tau: f64) -> (DVector<f64>, f64) {
        let p = u.len();
        let with_set = !matches!(self.theta, ConstraintSet::FullSpace);
        let d = self.part.linear_operator();
        let m = d.map_or(p, |d| d.nrows());
        let apply_a = |x: &DVector<f64>| -> DVector<f64> {
            match d {
                Some(d) => d * x,
                None => x.clone(),
            }
        };
        let apply_at = |z: &DVector<f64>| -> DVector<f64> {
            match d {
                Some(d) => d.tr_mul(z),
                None => z.clone(),
            }
        };

        let mut st = match self.state.take() {
            Some(s) if s.z.len() == m && s.w.len() == p => s,
            _ => {
                let z = apply_a(u);
                let w = project(self.theta, u);
                AdmmState {
                    z,
                    a: DVector::zeros(m),
                    w,
                    b: DVector::zeros(p),
                }
            }
        };
        let mut residual = f64::INFINITY;
        let mut last_x = u.clone();
        for it in 1..=ADMM_MAX_ITERS {
            let rho = self.rho;
            let diag = 1.0 + if with_set { rho } else { 0.0 };
            if let Some(d) = d {
                if self.factor.is_none() {
                    let mut mat = d.tr_mul(d) * rho;
                    for i in 0..p {
                        mat[(i, i)] += diag;
                    }
                    self.factor = Some(Cholesky::new(mat).expect("I + rho DᵀD is positive definite"));
                }
            }
            let mut rhs = u + apply_at(&(&st.z - &st.a)) * rho;
            if with_set {
                rhs += (&st.w - &st.b) * rho;
            }
            let x = match &self.factor {
                Some(f) => f.solve(&rhs),
                None => rhs / (diag + rho),
            };
            let ax = apply_a(&x);
            let z_prev = std::mem::replace(&mut st.z, self.part.split_prox(&(&ax + &st.a), tau / rho));
            st.a += &ax - &st.z;
            let mut primal2 = (&ax - &st.z).norm_squared();
            let mut dual_vec = apply_at(&(&st.z - &z_prev));
            if with_set {
                let w_prev = std::mem::replace(&mut st.w, project(self.theta, &(&x + &st.b)));
                st.b += &x - &st.w;
                primal2 += (&x - &st.w).norm_squared();
                dual_vec += &st.w - w_prev;
            }
            let primal = primal2.sqrt();
            let dual = rho * dual_vec.norm();
            residual = primal.max(dual);
            if residual <= ADMM_TOL {
                self.inner_iters += it;
                let out = if with_set { st.w.clone() } else { x };
                self.state = Some(st);
                return (out, residual);
            }
            // residual balancing during the first iterations only; scaled duals follow ρ
            if it % 20 == 0 && it <= ADMM_ADAPT_ITERS && (primal > 10.0 * dual || dual > 10.0 * primal) {
                let factor = if primal > dual { 2.0 } else { 0.5 };
                let new_rho = (rho * factor).clamp(1e-4, 1e4);
                if new_rho != rho {
                    st.a *= rho / new_rho;
                    st.b *= rho / new_rho;
                    self.rho = new_rho;
                    self.factor = None;
                }
            }
            last_x = x;
        }
        self.inner_iters += ADMM_MAX_ITERS;
        let out = if with_set { st.w.clone() } else { last_x };
        self.state = Some(st);
        (out, residual)
    }
}
