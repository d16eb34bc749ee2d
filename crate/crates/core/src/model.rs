//! Loss families, synthetic GLM data and signal-to-noise diagnostics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::stats::{ln_factorial, log_softplus, mean_se, sigmoid, softplus};

/// GLM negative log-likelihoods used as the training loss ℓ(y, z), where
/// `z` is the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossFamily {
    /// ½(y − z)², Gaussian linear model.
    SquaredError,
    /// log(1 + e^z) − yz for y ∈ {0, 1}.
    LogisticNll,
    /// μ − y log μ + log y! with μ = log(1 + e^z), y ∈ ℕ.
    PoissonNll,
}

/// Declared polynomial growth: |ℓ|, |ℓ̇| ≤ C (1 + |y|^s + |z|^s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Growth {
    pub c: f64,
    pub s: f64,
}

impl LossFamily {
    pub const ALL: [LossFamily; 3] = [
        LossFamily::SquaredError,
        LossFamily::LogisticNll,
        LossFamily::PoissonNll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossFamily::SquaredError => "squared",
            LossFamily::LogisticNll => "logistic",
            LossFamily::PoissonNll => "poisson",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "squared" | "linear" | "gaussian" => Some(LossFamily::SquaredError),
            "logistic" => Some(LossFamily::LogisticNll),
            "poisson" => Some(LossFamily::PoissonNll),
            _ => None,
        }
    }

    pub fn check_response(self, y: f64) -> Result<()> {
        let ok = match self {
            LossFamily::SquaredError => y.is_finite(),
            LossFamily::LogisticNll => y == 0.0 || y == 1.0,
            LossFamily::PoissonNll => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain {
                family: self.name(),
                y,
            })
        }
    }

    /// ℓ(y, z) without the domain check.
    #[inline]
    pub fn loss(self, y: f64, z: f64) -> f64 {
        match self {
            LossFamily::SquaredError => 0.5 * (y - z) * (y - z),
            LossFamily::LogisticNll => {
                if y == 1.0 {
                    softplus(-z)
                } else {
                    softplus(z) - y * z
                }
            }
            LossFamily::PoissonNll => {
                let mu = softplus(z);
                if y == 0.0 {
                    mu
                } else {
                    mu - y * log_softplus(z) + ln_factorial(y)
                }
            }
        }
    }

    /// ∂ℓ/∂z.
    #[inline]
    pub fn grad(self, y: f64, z: f64) -> f64 {
        match self {
            LossFamily::SquaredError => z - y,
            LossFamily::LogisticNll => sigmoid(z) - y,
            LossFamily::PoissonNll => {
                let s = sigmoid(z);
                if y == 0.0 {
                    s
                } else {
                    s - y * sigma_over_mu(z)
                }
            }
        }
    }

    /// ∂²ℓ/∂z².
    #[inline]
    pub fn hess(self, y: f64, z: f64) -> f64 {
        match self {
            LossFamily::SquaredError => 1.0,
            LossFamily::LogisticNll => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
            LossFamily::PoissonNll => {
                let s = sigmoid(z);
                let r = sigma_over_mu(z);
                s * (1.0 - s) - y * ((1.0 - s) * r - r * r)
            }
        }
    }

    pub fn growth(self) -> Growth {
        match self {
            LossFamily::SquaredError => Growth { c: 1.0, s: 2.0 },
            LossFamily::LogisticNll => Growth { c: 2.0, s: 1.0 },
            LossFamily::PoissonNll => Growth { c: 3.0, s: 2.0 },
        }
    }

    /// Upper bound on ℓ̈ over the responses present in the data.
    pub fn curvature_bound<'a>(self, ys: impl IntoIterator<Item = &'a f64>) -> f64 {
        match self {
            LossFamily::SquaredError => 1.0,
            LossFamily::LogisticNll => 0.25,
            LossFamily::PoissonNll => ys.into_iter().fold(1.0f64, |m, &y| m.max(1.0 + y)),
        }
    }

    /// var(y | xᵀβ* = eta).
    pub fn conditional_variance(self, eta: f64, noise_sigma: f64) -> f64 {
        match self {
            LossFamily::SquaredError => noise_sigma * noise_sigma,
            LossFamily::LogisticNll => {
                let s = sigmoid(eta);
                s * (1.0 - s)
            }
            LossFamily::PoissonNll => softplus(eta),
        }
    }

    /// Draw y | xᵀβ* = eta.
    pub fn sample_response<R: Rng + ?Sized>(self, rng: &mut R, eta: f64, noise_sigma: f64) -> f64 {
        match self {
            LossFamily::SquaredError => {
                let e: f64 = rng.sample(StandardNormal);
                eta + noise_sigma * e
            }
            LossFamily::LogisticNll => {
                let b = Bernoulli::new(sigmoid(eta)).expect("probability in [0,1]");
                if b.sample(rng) {
                    1.0
                } else {
                    0.0
                }
            }
            LossFamily::PoissonNll => {
                let mu = softplus(eta);
                if mu < 1e-300 {
                    0.0
                } else {
                    Poisson::new(mu).expect("positive mean").sample(rng)
                }
            }
        }
    }
}

/// σ(z) / log(1 + e^z), computed in log space.
#[inline]
fn sigma_over_mu(z: f64) -> f64 {
    (-softplus(-z) - log_softplus(z)).exp()
}

pub fn eval_loss(family: LossFamily, y: f64, z: f64) -> Result<f64> {
    family.check_response(y)?;
    Ok(family.loss(y, z))
}

pub fn eval_loss_grad(family: LossFamily, y: f64, z: f64) -> Result<f64> {
    family.check_response(y)?;
    Ok(family.grad(y, z))
}

/// The error function φ used to score predictions. Defaults to the training
/// loss but can be any family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorMetric(pub LossFamily);

impl ErrorMetric {
    #[inline]
    pub fn eval(self, y: f64, z: f64) -> f64 {
        self.0.loss(y, z)
    }

    #[inline]
    pub fn grad(self, y: f64, z: f64) -> f64 {
        self.0.grad(y, z)
    }

    pub fn name(self) -> &'static str {
        self.0.name()
    }
}

/// Feature covariance Σ = M / p, described through the unscaled matrix M.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceSpec {
    ScaledIdentity(f64),
    ScaledDiagonal(Vec<f64>),
    /// M_ij = ρ^|i−j|.
    ScaledAr1(f64),
}

impl CovarianceSpec {
    pub fn validate(&self, p: usize) -> Result<()> {
        match self {
            CovarianceSpec::ScaledIdentity(c) if !(*c > 0.0 && c.is_finite()) => Err(
                Error::InvalidParameter(format!("identity scale must be positive, got {c}")),
            ),
            CovarianceSpec::ScaledDiagonal(d) if d.len() != p => Err(Error::Shape {
                expected: p,
                got: d.len(),
            }),
            CovarianceSpec::ScaledDiagonal(d) if d.iter().any(|v| !(*v > 0.0)) => Err(
                Error::InvalidParameter("diagonal covariance entries must be positive".into()),
            ),
            CovarianceSpec::ScaledAr1(rho) if !(rho.abs() < 1.0) => Err(Error::InvalidParameter(
                format!("AR(1) correlation must lie in (-1, 1), got {rho}"),
            )),
            _ => Ok(()),
        }
    }

    /// Declared (c_X, C_X): the eigenvalues of Σ lie in [c_X/p, C_X/p].
    pub fn bracket(&self) -> (f64, f64) {
        match self {
            CovarianceSpec::ScaledIdentity(c) => (*c, *c),
            CovarianceSpec::ScaledDiagonal(d) => (
                d.iter().cloned().fold(f64::INFINITY, f64::min),
                d.iter().cloned().fold(0.0, f64::max),
            ),
            CovarianceSpec::ScaledAr1(rho) => {
                let r = rho.abs();
                ((1.0 - r) / (1.0 + r), (1.0 + r) / (1.0 - r))
            }
        }
    }

    /// Σ as a dense p×p matrix.
    pub fn dense(&self, p: usize) -> DMatrix<f64> {
        let scale = 1.0 / p as f64;
        match self {
            CovarianceSpec::ScaledIdentity(c) => DMatrix::identity(p, p) * (c * scale),
            CovarianceSpec::ScaledDiagonal(d) => {
                DMatrix::from_diagonal(&DVector::from_iterator(p, d.iter().map(|v| v * scale)))
            }
            CovarianceSpec::ScaledAr1(rho) => DMatrix::from_fn(p, p, |i, j| {
                rho.powi((i as i64 - j as i64).unsigned_abs() as i32) * scale
            }),
        }
    }

    /// Eigenvalues of the realized Σ, ascending.
    pub fn eigenvalues(&self, p: usize) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.dense(p)).eigenvalues.iter().cloned().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// aᵀ Σ b.
    pub fn quad_form(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let p = a.len();
        let scale = 1.0 / p as f64;
        match self {
            CovarianceSpec::ScaledIdentity(c) => c * scale * a.dot(b),
            CovarianceSpec::ScaledDiagonal(d) => {
                scale * a.iter().zip(b.iter()).zip(d).map(|((x, y), w)| x * y * w).sum::<f64>()
            }
            CovarianceSpec::ScaledAr1(rho) => {
                // M b for the AR(1) Toeplitz matrix via two linear recursions.
                let mut fwd = vec![0.0; p];
                let mut acc = 0.0;
                for j in 0..p {
                    acc = rho * acc + b[j];
                    fwd[j] = acc;
                }
                let mut bwd = 0.0;
                let mut total = 0.0;
                for j in (0..p).rev() {
                    let mb = fwd[j] + bwd * rho;
                    total += a[j] * mb;
                    bwd = rho * bwd + b[j];
                }
                scale * total
            }
        }
    }

    /// Fill `row` with one draw from N(0, Σ).
    pub fn sample_row<R: Rng + ?Sized>(&self, rng: &mut R, row: &mut [f64]) {
        let p = row.len();
        let scale = (1.0 / p as f64).sqrt();
        match self {
            CovarianceSpec::ScaledIdentity(c) => {
                let s = c.sqrt() * scale;
                for v in row.iter_mut() {
                    let g: f64 = rng.sample(StandardNormal);
                    *v = s * g;
                }
            }
            CovarianceSpec::ScaledDiagonal(d) => {
                for (v, w) in row.iter_mut().zip(d) {
                    let g: f64 = rng.sample(StandardNormal);
                    *v = w.sqrt() * scale * g;
                }
            }
            CovarianceSpec::ScaledAr1(rho) => {
                let innov = (1.0 - rho * rho).sqrt();
                let mut prev = 0.0;
                for (j, v) in row.iter_mut().enumerate() {
                    let g: f64 = rng.sample(StandardNormal);
                    prev = if j == 0 { g } else { rho * prev + innov * g };
                    *v = scale * prev;
                }
            }
        }
    }
}

/// How the true coefficient vector is generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaStarMode {
    /// Independent ±xi entries.
    Rademacher { xi: f64 },
    /// All entries equal to xi.
    Constant { xi: f64 },
    /// Sorted Gaussian entries rescaled so p⁻¹‖β*‖² = xi² (lies in the isotone cone).
    SortedGaussian { xi: f64 },
    Zero,
}

impl BetaStarMode {
    pub fn generate(self, p: usize, seed: u64) -> DVector<f64> {
        let mut rng = rng::stream(seed, Purpose::Init);
        match self {
            BetaStarMode::Rademacher { xi } => DVector::from_fn(p, |_, _| {
                if rng.random::<bool>() {
                    xi
                } else {
                    -xi
                }
            }),
            BetaStarMode::Constant { xi } => DVector::from_element(p, xi),
            BetaStarMode::SortedGaussian { xi } => {
                let mut v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                v.sort_by(f64::total_cmp);
                let norm = (v.iter().map(|x| x * x).sum::<f64>() / p as f64).sqrt();
                DVector::from_iterator(p, v.into_iter().map(|x| x * xi / norm))
            }
            BetaStarMode::Zero => DVector::zeros(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub n: usize,
    pub p: usize,
    pub gamma0: f64,
    pub beta_star: DVector<f64>,
    pub covariance: CovarianceSpec,
    pub loss: LossFamily,
    pub metric: ErrorMetric,
    pub noise_sigma: f64,
    /// Allowed range [ξ_lo, ξ_hi] for p^{-1/2}‖β*‖.
    pub xi_bounds: (f64, f64),
}

impl ModelSpec {
    /// Build a spec with n = round(gamma0 · p).
    pub fn new(
        p: usize,
        gamma0: f64,
        beta_star: DVector<f64>,
        covariance: CovarianceSpec,
        loss: LossFamily,
        noise_sigma: f64,
    ) -> Result<Self> {
        if !(gamma0 > 0.0 && gamma0.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma0 must be positive (n/p held fixed), got {gamma0}"
            )));
        }
        if p < 1 {
            return Err(Error::InvalidParameter("p must be at least 1".into()));
        }
        let n = (gamma0 * p as f64).round() as usize;
        let spec = ModelSpec {
            n,
            p,
            gamma0,
            beta_star,
            covariance,
            loss,
            metric: ErrorMetric(loss),
            noise_sigma,
            xi_bounds: (0.0, 10.0),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_metric(mut self, metric: ErrorMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma0 must be positive, got {}",
                self.gamma0
            )));
        }
        if self.p < 1 || self.n < 1 {
            return Err(Error::InvalidParameter("n and p must be at least 1".into()));
        }
        if self.n != (self.gamma0 * self.p as f64).round() as usize {
            return Err(Error::InvalidParameter(format!(
                "n = {} is not round(gamma0 * p) = round({} * {})",
                self.n, self.gamma0, self.p
            )));
        }
        if self.beta_star.len() != self.p {
            return Err(Error::Shape {
                expected: self.p,
                got: self.beta_star.len(),
            });
        }
        self.covariance.validate(self.p)?;
        if self.loss == LossFamily::SquaredError && !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter("noise_sigma must be nonnegative".into()));
        }
        let scale = self.beta_star.norm_squared() / self.p as f64;
        let (lo, hi) = self.xi_bounds;
        if scale < lo * lo || scale > hi * hi {
            return Err(Error::InvalidParameter(format!(
                "p^-1 |beta*|^2 = {scale} outside [{}, {}]",
                lo * lo,
                hi * hi
            )));
        }
        Ok(())
    }

    /// Same model at a different dimension, keeping gamma0 and regenerating β*.
    pub fn resized(&self, p: usize, mode: BetaStarMode, beta_seed: u64) -> Result<Self> {
        let covariance = match &self.covariance {
            CovarianceSpec::ScaledDiagonal(_) => {
                return Err(Error::Unsupported(
                    "resizing a diagonal covariance with explicit entries".into(),
                ))
            }
            c => c.clone(),
        };
        let mut spec = ModelSpec::new(
            p,
            self.gamma0,
            mode.generate(p, beta_seed),
            covariance,
            self.loss,
            self.noise_sigma,
        )?;
        spec.metric = self.metric;
        spec.xi_bounds = self.xi_bounds;
        Ok(spec)
    }

    /// β*ᵀΣβ*, the variance of the true linear predictor.
    pub fn signal_variance(&self) -> f64 {
        self.covariance.quad_form(&self.beta_star, &self.beta_star)
    }

    /// Draw one response given the true linear predictor.
    pub fn sample_response<R: Rng + ?Sized>(&self, rng: &mut R, eta: f64) -> f64 {
        self.loss.sample_response(rng, eta, self.noise_sigma)
    }

    /// Rescale the model to hit a target SNR: through the noise level for
    /// the linear model, through the magnitude of β* otherwise.
    pub fn calibrate_snr(&mut self, target: f64, mc_samples: usize, seed: u64) -> Result<()> {
        if !(target > 0.0) {
            return Err(Error::InvalidParameter("snr_target must be positive".into()));
        }
        let signal = self.signal_variance();
        if signal <= 0.0 {
            return Err(Error::InvalidParameter(
                "snr_target needs a nonzero beta*".into(),
            ));
        }
        if self.loss == LossFamily::SquaredError {
            self.noise_sigma = (signal / target).sqrt();
            return Ok(());
        }
        let base = self.beta_star.clone();
        let snr_at = |spec: &mut ModelSpec, s: f64| -> Result<f64> {
            spec.beta_star = &base * s;
            Ok(compute_snr(spec, mc_samples, seed)?.snr)
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        while snr_at(self, hi)? < target {
            hi *= 2.0;
            if hi > 1e6 {
                return Err(Error::InvalidParameter(format!(
                    "snr_target {target} is not reachable"
                )));
            }
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if snr_at(self, mid)? < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.beta_star = &base * (0.5 * (lo + hi));
        Ok(())
    }
}

/// A model family indexed by dimension: everything in [`ModelSpec`] except
/// n, p and the realized β*.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTemplate {
    pub loss: LossFamily,
    pub metric: ErrorMetric,
    pub gamma0: f64,
    pub covariance: CovarianceSpec,
    pub beta_star: BetaStarMode,
    pub noise_sigma: f64,
    /// Allowed range for p^{-1/2}‖β*‖.
    pub xi_bounds: (f64, f64),
}

impl ModelTemplate {
    /// n = round(γ₀p).
    pub fn at_p(&self, p: usize, beta_seed: u64) -> Result<ModelSpec> {
        let n = (self.gamma0 * p as f64).round() as usize;
        self.with_np(n, p, beta_seed)
    }

    /// p = round(n/γ₀); n is kept exactly.
    pub fn at_n(&self, n: usize, beta_seed: u64) -> Result<ModelSpec> {
        let p = (n as f64 / self.gamma0).round() as usize;
        if p < 2 {
            return Err(Error::InvalidParameter(format!(
                "n = {n} with gamma0 = {} gives p = {p} < 2",
                self.gamma0
            )));
        }
        self.with_np(n, p, beta_seed)
    }

    /// Arbitrary n and p; γ₀ of the result is n/p.
    pub fn with_np(&self, n: usize, p: usize, beta_seed: u64) -> Result<ModelSpec> {
        if n < 1 || p < 1 {
            return Err(Error::InvalidParameter("n and p must be at least 1".into()));
        }
        let mut spec = ModelSpec::new(
            p,
            n as f64 / p as f64,
            self.beta_star.generate(p, beta_seed),
            self.covariance.clone(),
            self.loss,
            self.noise_sigma,
        )?;
        spec.metric = self.metric;
        spec.n = n;
        spec.xi_bounds = self.xi_bounds;
        spec.validate()?;
        Ok(spec)
    }
}

/// Design matrix and responses. Rows are i.i.d. draws of (x_i, y_i).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub seed: u64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Copy with observation order permuted: row k of the result is row perm[k].
    pub fn permuted(&self, perm: &[usize]) -> Dataset {
        let x = DMatrix::from_fn(self.n(), self.p(), |k, j| self.x[(perm[k], j)]);
        let y = DVector::from_fn(self.n(), |k, _| self.y[perm[k]]);
        Dataset { x, y, seed: self.seed }
    }
}

pub fn generate_dataset(spec: &ModelSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let (n, p) = (spec.n, spec.p);
    let mut xrng = rng::stream(seed, Purpose::Design);
    let mut yrng = rng::stream(seed, Purpose::Response);
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut row = vec![0.0; p];
    for i in 0..n {
        spec.covariance.sample_row(&mut xrng, &mut row);
        let mut eta = 0.0;
        for (j, v) in row.iter().enumerate() {
            x[(i, j)] = *v;
            eta += v * spec.beta_star[j];
        }
        y[i] = spec.sample_response(&mut yrng, eta);
    }
    Ok(Dataset { x, y, seed })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrReport {
    pub signal_var: f64,
    pub mean_noise_var: f64,
    pub mean_noise_var_se: f64,
    pub snr: f64,
    /// Delta-method standard error of `snr`.
    pub snr_se: f64,
}

/// SNR = var(xᵀβ*) / E var(y | xᵀβ*). The signal variance is exact; the
/// noise variance is averaged over draws of xᵀβ* ~ N(0, β*ᵀΣβ*).
pub fn compute_snr(spec: &ModelSpec, mc_samples: usize, seed: u64) -> Result<SnrReport> {
    if mc_samples < 1000 {
        return Err(Error::InvalidParameter(format!(
            "compute_snr needs at least 1000 samples, got {mc_samples}"
        )));
    }
    let signal_var = spec.signal_variance();
    let sd = signal_var.max(0.0).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = rng::stream(seed, Purpose::Snr);
    let vars: Vec<f64> = (0..mc_samples)
        .map(|_| {
            let eta = sd * normal.sample(&mut rng);
            spec.loss.conditional_variance(eta, spec.noise_sigma)
        })
        .collect();
    let (mean_noise_var, se) = mean_se(&vars);
    let (snr, snr_se) = if mean_noise_var < 1e-12 {
        (f64::INFINITY, f64::NAN)
    } else {
        (
            signal_var / mean_noise_var,
            signal_var * se / (mean_noise_var * mean_noise_var),
        )
    };
    Ok(SnrReport {
        signal_var,
        mean_noise_var,
        mean_noise_var_se: se,
        snr,
        snr_se,
    })
}
