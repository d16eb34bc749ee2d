//! Non-smooth regularizers r₀, the elastic penalty, feasible sets and
//! Gaussian smoothing.

mod composite;
mod constraint;
mod r0;
mod smoothing;

pub use composite::{CompositeProx, NonsmoothPart, ADMM_MAX_ITERS, ADMM_TOL};
pub use constraint::{pava, project, ConstraintSet};
pub use r0::{eval_r0, operator_norm, prox_r0, subgrad_r0, Group, R0Variant};
pub use smoothing::{
    eval_smoothed, eval_smoothed_with_se, grad_smoothed, prox_smoothed_abs, prox_smoothed_abs_from, smoothed_abs,
    smoothed_abs_grad, smoothed_abs_hess, sup_gap_bound, SmoothedPenalty, SmoothingMode,
};

use crate::error::{Error, Result};

/// How the solver treats r₀.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    /// Fit the exact non-smooth problem.
    None,
    /// Replace r₀ by its closed-form Gaussian smoothing (LASSO only), with α
    /// taken from the solver's schedule.
    ClosedForm,
    /// Monte Carlo smoothing; an evaluation tool, not accepted by the solver.
    MonteCarlo { samples: usize, seed: u64 },
}

impl Smoothing {
    pub fn name(&self) -> &'static str {
        match self {
            Smoothing::None => "none",
            Smoothing::ClosedForm => "closed_form",
            Smoothing::MonteCarlo { .. } => "monte_carlo",
        }
    }
}

/// λ, η, r₀ and Θ for the penalized problem
/// Σ ℓ(y_i, x_iᵀβ) + λ(1−η) r₀(β) + λη‖β‖² over β ∈ Θ.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    pub r0: R0Variant,
    pub eta: f64,
    pub lambda: f64,
    pub theta: ConstraintSet,
    pub smoothing: Smoothing,
}

impl PenaltySpec {
    pub fn new(r0: R0Variant, eta: f64, lambda: f64, theta: ConstraintSet) -> Result<Self> {
        let spec = PenaltySpec {
            r0,
            eta,
            lambda,
            theta,
            smoothing: Smoothing::None,
        };
        spec.check_scalars()?;
        Ok(spec)
    }

    pub fn with_smoothing(mut self, smoothing: Smoothing) -> Self {
        self.smoothing = smoothing;
        self
    }

    fn check_scalars(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "eta must lie strictly inside (0,1), got {}",
                self.eta
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        self.check_scalars()?;
        self.r0.validate(p)?;
        self.theta.validate(p)?;
        match self.smoothing {
            Smoothing::ClosedForm if !matches!(self.r0, R0Variant::Lasso | R0Variant::Zero) => {
                return Err(Error::Unsupported(format!(
                    "closed-form smoothing of {}",
                    self.r0.name()
                )));
            }
            Smoothing::MonteCarlo { samples, .. } if samples < 100 => {
                return Err(Error::InvalidParameter(format!(
                    "Monte Carlo smoothing needs >= 100 samples, got {samples}"
                )));
            }
            _ => {}
        }
        Ok(())
    }

    /// Weight λ(1−η) on r₀.
    pub fn r0_weight(&self) -> f64 {
        self.lambda * (1.0 - self.eta)
    }

    /// Weight λη on ‖β‖².
    pub fn ridge_weight(&self) -> f64 {
        self.lambda * self.eta
    }

    /// Strong convexity modulus 2λη of the penalized objective.
    pub fn strong_convexity(&self) -> f64 {
        2.0 * self.lambda * self.eta
    }
}

/// r₀ described independently of p.
#[derive(Debug, Clone, PartialEq)]
pub enum R0Kind {
    Zero,
    Lasso,
    /// First differences.
    Fused,
    /// Contiguous groups of `size`, identity kernels.
    Group { size: usize },
    /// Schatten-q norm of β reshaped row-major to rows × (p/rows).
    Schatten { rows: usize, q: u32 },
}

impl R0Kind {
    pub fn build(&self, p: usize) -> Result<R0Variant> {
        let r0 = match self {
            R0Kind::Zero => R0Variant::Zero,
            R0Kind::Lasso => R0Variant::Lasso,
            R0Kind::Fused => R0Variant::fused(p),
            R0Kind::Group { size } => R0Variant::contiguous_groups(p, *size)?,
            R0Kind::Schatten { rows, q } => {
                if *rows == 0 || !p.is_multiple_of(*rows) {
                    return Err(Error::InvalidParameter(format!(
                        "schatten shape: p = {p} is not divisible by rows = {rows}"
                    )));
                }
                R0Variant::SchattenNorm {
                    rows: *rows,
                    cols: p / rows,
                    q: *q,
                }
            }
        };
        r0.validate(p)?;
        Ok(r0)
    }
}

/// Θ described independently of p.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaKind {
    Full,
    Nonnegative,
    Box { lo: f64, hi: f64 },
    Ball { radius: f64 },
    Isotone,
}

impl ThetaKind {
    pub fn build(&self, p: usize) -> ConstraintSet {
        match self {
            ThetaKind::Full => ConstraintSet::FullSpace,
            ThetaKind::Nonnegative => ConstraintSet::NonnegativeOrthant,
            ThetaKind::Box { lo, hi } => ConstraintSet::Box {
                lo: vec![*lo; p],
                hi: vec![*hi; p],
            },
            ThetaKind::Ball { radius } => ConstraintSet::EuclideanBall { radius: *radius },
            ThetaKind::Isotone => ConstraintSet::IsotoneCone,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyTemplate {
    pub r0: R0Kind,
    pub theta: ThetaKind,
    pub eta: f64,
    pub lambda: f64,
    pub smoothing: Smoothing,
}

impl PenaltyTemplate {
    pub fn build(&self, p: usize) -> Result<PenaltySpec> {
        let spec = PenaltySpec::new(self.r0.build(p)?, self.eta, self.lambda, self.theta.build(p))?
            .with_smoothing(self.smoothing);
        spec.validate(p)?;
        Ok(spec)
    }
}
