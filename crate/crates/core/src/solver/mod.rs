//! Accelerated forward-backward splitting for
//! h(β) = Σℓ(y_i, x_iᵀβ) + λ(1−η)R(β) + λη‖β‖² over β ∈ Θ,
//! where R is r₀ or its Gaussian smoothing, plus leave-one-out refits.
//!
//! The smooth part (loss + ridge) takes the gradient step; R and Θ are
//! handled together by [`CompositeProx`]. At convergence the iterate is a
//! fixed point of the projected-gradient map of the smoothed objective.

pub mod reference;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Dataset, LossFamily, ModelSpec};
use crate::penalty::{
    eval_r0, eval_smoothed, project, sup_gap_bound, CompositeProx, ConstraintSet, NonsmoothPart, PenaltySpec,
    R0Variant, SmoothedPenalty, Smoothing, SmoothingMode,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Step 1/L from the curvature bound, never adjusted.
    FixedInverseLipschitz,
    /// Start from the curvature bound and divide the step by `1/shrink`
    /// until the quadratic upper model holds.
    Backtracking { shrink: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSchedule {
    Fixed(f64),
    /// α₀, α₀g, α₀g², … capped at α_max.
    Continuation { alpha0: f64, alpha_max: f64, growth: f64 },
}

impl AlphaSchedule {
    pub fn levels(&self) -> Vec<f64> {
        match *self {
            AlphaSchedule::Fixed(a) => vec![a],
            AlphaSchedule::Continuation { alpha0, alpha_max, growth } => {
                let mut out = vec![];
                let mut a = alpha0;
                while a < alpha_max {
                    out.push(a);
                    a *= growth;
                }
                out.push(alpha_max);
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Threshold on the fixed-point residual.
    pub tol: f64,
    pub step_rule: StepRule,
    /// Nesterov momentum with function-value restart.
    pub acceleration: bool,
    pub alpha_schedule: AlphaSchedule,
    /// Return unconverged fits (flagged) instead of failing.
    pub allow_unconverged: bool,
    /// Keep the objective value after every iteration.
    pub record_history: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 50_000,
            tol: 1e-8,
            step_rule: StepRule::Backtracking { shrink: 0.5 },
            acceleration: true,
            alpha_schedule: AlphaSchedule::Continuation {
                alpha0: 1.0,
                alpha_max: 1e8,
                growth: 2.0,
            },
            allow_unconverged: false,
            record_history: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if let StepRule::Backtracking { shrink } = self.step_rule {
            if !(shrink > 0.0 && shrink < 1.0) {
                return Err(Error::InvalidParameter(format!("shrink must lie in (0,1), got {shrink}")));
            }
        }
        match self.alpha_schedule {
            AlphaSchedule::Fixed(a) if !(a > 0.0) => {
                Err(Error::InvalidParameter(format!("alpha must be positive, got {a}")))
            }
            AlphaSchedule::Continuation { alpha0, alpha_max, growth }
                if !(alpha0 > 0.0 && alpha_max >= alpha0 && growth > 1.0) =>
            {
                Err(Error::InvalidParameter(
                    "continuation needs 0 < alpha0 <= alpha_max and growth > 1".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// The loss family and penalty of one fitting problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub loss: LossFamily,
    pub penalty: PenaltySpec,
}

impl Problem {
    pub fn new(loss: LossFamily, penalty: PenaltySpec) -> Self {
        Problem { loss, penalty }
    }

    pub fn from_spec(spec: &ModelSpec, penalty: PenaltySpec) -> Self {
        Problem { loss: spec.loss, penalty }
    }

    fn check(&self, data: &Dataset) -> Result<()> {
        self.penalty.validate(data.p())?;
        if data.y.len() != data.n() {
            return Err(Error::Shape {
                expected: data.n(),
                got: data.y.len(),
            });
        }
        for &y in data.y.iter() {
            self.loss.check_response(y)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    /// h(β̂), or h^α(β̂) when fitted with smoothing.
    pub objective: f64,
    pub fp_residual: f64,
    pub iters: usize,
    pub converged: bool,
    /// Smoothing level of the final stage; infinite for the exact problem.
    pub alpha_used: f64,
    /// Final curvature estimate L (inverse step size).
    pub lipschitz: f64,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooFits {
    pub full: FitResult,
    pub per_i: Vec<FitResult>,
    pub warm_start_used: bool,
}

impl LooFits {
    pub fn all_converged(&self) -> bool {
        self.full.converged && self.per_i.iter().all(|f| f.converged)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingPath {
    pub alphas: Vec<f64>,
    pub fits: Vec<FitResult>,
    /// Bound on sup|r₀^α − r₀| at each α.
    pub gap_bounds: Vec<f64>,
}

/// Rows of the design with at most one observation left out.
#[derive(Clone, Copy)]
struct View<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    skip: Option<usize>,
}

impl View<'_> {
    fn loss_sum(&self, loss: LossFamily, eta: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..eta.len() {
            if Some(i) != self.skip {
                s += loss.loss(self.y[i], eta[i]);
            }
        }
        s
    }

    /// Xᵀℓ̇ over the kept rows.
    fn loss_grad(&self, loss: LossFamily, eta: &DVector<f64>, out: &mut DVector<f64>) {
        let mut d = DVector::from_fn(eta.len(), |i, _| loss.grad(self.y[i], eta[i]));
        if let Some(i) = self.skip {
            d[i] = 0.0;
        }
        out.gemv_tr(1.0, self.x, &d, 0.0);
    }
}

/// Upper bound on the curvature of the smooth part: λ_max(XᵀX)·sup ℓ̈ + 2λη.
fn curvature_estimate(problem: &Problem, data: &Dataset) -> f64 {
    let x = &data.x;
    let p = x.ncols();
    let mut v = DVector::from_fn(p, |j, _| 1.0 + (j as f64 + 1.0).sqrt().fract());
    v /= v.norm();
    let mut lam = 0.0;
    for _ in 0..30 {
        let w = x.tr_mul(&(x * &v));
        lam = w.norm();
        if lam == 0.0 {
            break;
        }
        v = w / lam;
    }
    let curv = problem.loss.curvature_bound(data.y.iter());
    1.05 * lam * curv + 2.0 * problem.penalty.ridge_weight()
}

fn nonsmooth_part<'a>(penalty: &'a PenaltySpec, alpha: f64) -> NonsmoothPart<'a> {
    if alpha.is_finite() && penalty.r0 == R0Variant::Lasso {
        NonsmoothPart::SmoothedLasso { alpha }
    } else {
        NonsmoothPart::Exact(&penalty.r0)
    }
}

struct StageOut {
    fit: FitResult,
    lipschitz: f64,
}

/// One forward-backward solve at a fixed smoothing level.
fn solve_stage(
    problem: &Problem,
    view: View,
    config: &SolverConfig,
    init: &DVector<f64>,
    alpha: f64,
    lipschitz: f64,
    tol: f64,
) -> Result<StageOut> {
    let pen = &problem.penalty;
    let loss = problem.loss;
    let ridge = pen.ridge_weight();
    let mu = pen.strong_convexity();
    let part = nonsmooth_part(pen, alpha);
    let mut prox = CompositeProx::new(part, pen.r0_weight(), &pen.theta);
    let mut check = CompositeProx::new(part, pen.r0_weight(), &pen.theta);
    let x = view.x;
    let p = x.ncols();

    let smooth = |eta: &DVector<f64>, b: &DVector<f64>| view.loss_sum(loss, eta) + ridge * b.norm_squared();
    let grad_at = |eta: &DVector<f64>, b: &DVector<f64>, out: &mut DVector<f64>| -> Result<()> {
        view.loss_grad(loss, eta, out);
        out.axpy(2.0 * ridge, b, 1.0);
        if out.iter().all(|g| g.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("gradient"))
        }
    };

    let residual = |b: &DVector<f64>, g: &DVector<f64>, check: &mut CompositeProx| -> Result<f64> {
        match part.gradient(b) {
            Some(gr) => {
                let full = g + gr * pen.r0_weight();
                Ok((b - project(&pen.theta, &(b - full))).norm())
            }
            None => Ok((b - check.apply(&(b - g), 1.0)?).norm()),
        }
    };

    let mut cur = project(&pen.theta, init);
    let mut eta_cur = x * &cur;
    let mut f_cur = smooth(&eta_cur, &cur);
    let mut obj_cur = f_cur + prox.value(&cur);
    let mut prev = cur.clone();
    let mut eta_prev = eta_cur.clone();
    let mut y = cur.clone();
    let mut eta_y = eta_cur.clone();
    let mut t_k = 1.0f64;
    let mut lip = lipschitz;
    let mut gy = DVector::zeros(p);
    let mut eta_z = DVector::zeros(x.nrows());
    let mut history = vec![];
    let mut fp = f64::INFINITY;

    let record = |history: &mut Vec<f64>, v: f64| {
        if config.record_history {
            history.push(v);
        }
    };
    record(&mut history, obj_cur);

    for it in 1..=config.max_iters {
        grad_at(&eta_y, &y, &mut gy)?;
        let f_y = smooth(&eta_y, &y);
        let (z, f_z) = loop {
            let step = -&gy / lip;
            let z = prox.apply_step(&y, &step, 1.0 / lip)?;
            eta_z.gemv(1.0, x, &z, 0.0);
            let f_z = smooth(&eta_z, &z);
            let d = &z - &y;
            let model = f_y + gy.dot(&d) + 0.5 * lip * d.norm_squared();
            match config.step_rule {
                StepRule::Backtracking { shrink } if f_z > model + 1e-12 * model.abs().max(1.0) => {
                    lip /= shrink;
                }
                _ => break (z, f_z),
            }
        };
        let obj_z = f_z + prox.value(&z);
        if !obj_z.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        let moved = (&z - &y).norm();
        // Differences below the rounding level of the sum are not evidence of overshoot.
        let noise = 1e-13 * obj_cur.abs().max(1.0);
        if config.acceleration && obj_z > obj_cur + noise && t_k > 1.0 {
            // Momentum overshot: restart from the current iterate.
            t_k = 1.0;
            y.copy_from(&cur);
            eta_y.copy_from(&eta_cur);
            record(&mut history, obj_cur);
            continue;
        }
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut eta_prev, &mut eta_cur);
        cur = z;
        eta_cur.copy_from(&eta_z);
        f_cur = f_z;
        obj_cur = obj_z;
        record(&mut history, obj_cur);

        if lip.max(1.0) * moved <= 3.0 * tol || it == config.max_iters {
            let mut g = DVector::zeros(p);
            grad_at(&eta_cur, &cur, &mut g)?;
            fp = residual(&cur, &g, &mut check)?;
            if fp <= tol {
                return Ok(StageOut {
                    fit: FitResult {
                        beta_hat: cur,
                        objective: obj_cur,
                        fp_residual: fp,
                        iters: it,
                        converged: true,
                        alpha_used: alpha,
                        lipschitz: lip,
                        history,
                    },
                    lipschitz: lip,
                });
            }
        }

        if config.acceleration {
            // Nesterov's schedule, capped by the constant momentum that is
            // optimal for a μ-strongly convex objective.
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
            let (sl, sm) = (lip.sqrt(), mu.sqrt());
            let mom = ((t_k - 1.0) / t_next).min((sl - sm) / (sl + sm));
            t_k = t_next;
            y = &cur + (&cur - &prev) * mom;
            eta_y = &eta_cur + (&eta_cur - &eta_prev) * mom;
        } else {
            y.copy_from(&cur);
            eta_y.copy_from(&eta_cur);
        }
    }
    let _ = f_cur;
    if config.allow_unconverged {
        Ok(StageOut {
            fit: FitResult {
                beta_hat: cur,
                objective: obj_cur,
                fp_residual: fp,
                iters: config.max_iters,
                converged: false,
                alpha_used: alpha,
                lipschitz: lip,
                history,
            },
            lipschitz: lip,
        })
    } else {
        Err(Error::NonConvergence {
            iters: config.max_iters,
            residual: fp,
            iterate: cur.as_slice().to_vec(),
        })
    }
}

/// Smoothing levels the solver will visit for this penalty.
fn stage_alphas(problem: &Problem, config: &SolverConfig) -> Result<Vec<f64>> {
    match problem.penalty.smoothing {
        Smoothing::None => Ok(vec![f64::INFINITY]),
        Smoothing::ClosedForm if problem.penalty.r0 == R0Variant::Zero => Ok(vec![f64::INFINITY]),
        Smoothing::ClosedForm => Ok(config.alpha_schedule.levels()),
        Smoothing::MonteCarlo { .. } => Err(Error::Unsupported(
            "Monte Carlo smoothing is for evaluation only; fit with closed-form smoothing or none".into(),
        )),
    }
}

fn fit_view(
    problem: &Problem,
    view: View,
    config: &SolverConfig,
    init: &DVector<f64>,
    alphas: &[f64],
    lipschitz: f64,
) -> Result<FitResult> {
    let mut start = init.clone();
    let mut lip = lipschitz;
    let mut iters = 0;
    let mut history = vec![];
    let last = alphas.len() - 1;
    for (k, &alpha) in alphas.iter().enumerate() {
        let tol = if k == last { config.tol } else { config.tol.max(1e-6) };
        let out = solve_stage(problem, view, config, &start, alpha, lip, tol)?;
        iters += out.fit.iters;
        lip = out.lipschitz;
        history.extend_from_slice(&out.fit.history);
        if k == last {
            return Ok(FitResult {
                iters,
                history,
                ..out.fit
            });
        }
        start = out.fit.beta_hat;
    }
    unreachable!("at least one smoothing level")
}

/// h(β) (alpha = None) or h^α(β). The indicator of Θ is not included.
pub fn objective(problem: &Problem, data: &Dataset, beta: &DVector<f64>, alpha: Option<f64>) -> Result<f64> {
    if beta.len() != data.p() {
        return Err(Error::Shape {
            expected: data.p(),
            got: beta.len(),
        });
    }
    let pen = &problem.penalty;
    let eta = &data.x * beta;
    let view = View {
        x: &data.x,
        y: &data.y,
        skip: None,
    };
    let r = match alpha {
        None => eval_r0(&pen.r0, beta)?,
        Some(alpha) => {
            let mode = match (pen.smoothing, &pen.r0) {
                (_, R0Variant::Lasso) => SmoothingMode::ClosedForm,
                (Smoothing::MonteCarlo { samples, seed }, _) => SmoothingMode::MonteCarlo { samples, seed },
                _ => SmoothingMode::MonteCarlo { samples: 1000, seed: 0 },
            };
            if pen.r0 == R0Variant::Zero {
                0.0
            } else {
                eval_smoothed(
                    &SmoothedPenalty {
                        base: pen.r0.clone(),
                        alpha,
                        mode,
                    },
                    beta,
                )?
            }
        }
    };
    Ok(view.loss_sum(problem.loss, &eta) + pen.r0_weight() * r + pen.ridge_weight() * beta.norm_squared())
}

/// Fit on the full data. `init` is projected onto Θ before use.
pub fn fit(problem: &Problem, data: &Dataset, config: &SolverConfig, init: Option<&DVector<f64>>) -> Result<FitResult> {
    config.validate()?;
    problem.check(data)?;
    let p = data.p();
    let init = match init {
        Some(b) if b.len() != p => {
            return Err(Error::Shape {
                expected: p,
                got: b.len(),
            })
        }
        Some(b) => b.clone(),
        None => DVector::zeros(p),
    };
    let alphas = stage_alphas(problem, config)?;
    let view = View {
        x: &data.x,
        y: &data.y,
        skip: None,
    };
    fit_view(problem, view, config, &init, &alphas, curvature_estimate(problem, data))
}

/// One Newton step from β̂ towards β̂_{/i} on the active coordinates,
/// using the Sherman–Morrison downdate of the restricted Hessian. Only for
/// the (unsmoothed) LASSO or no r₀ on ℝ^p, where the active set is a
/// coordinate subspace; the refit itself still runs to tolerance.
struct NewtonStart {
    active: Vec<usize>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl NewtonStart {
    fn new(problem: &Problem, data: &Dataset, full: &FitResult) -> Option<Self> {
        let pen = &problem.penalty;
        let eligible = matches!(pen.r0, R0Variant::Lasso | R0Variant::Zero)
            && pen.theta == ConstraintSet::FullSpace
            && !full.alpha_used.is_finite();
        if !eligible {
            return None;
        }
        let active: Vec<usize> = (0..data.p()).filter(|&j| full.beta_hat[j] != 0.0).collect();
        if active.is_empty() {
            return None;
        }
        let xs = data.x.select_columns(&active);
        let eta = &data.x * &full.beta_hat;
        let w = DVector::from_fn(data.n(), |i, _| problem.loss.hess(data.y[i], eta[i]));
        let mut h = xs.tr_mul(&DMatrix::from_fn(xs.nrows(), xs.ncols(), |i, j| w[i] * xs[(i, j)]));
        for k in 0..active.len() {
            h[(k, k)] += 2.0 * pen.ridge_weight();
        }
        Some(NewtonStart {
            active,
            chol: h.cholesky()?,
        })
    }

    fn start(&self, problem: &Problem, data: &Dataset, beta: &DVector<f64>, i: usize) -> DVector<f64> {
        let xi = DVector::from_fn(self.active.len(), |k, _| data.x[(i, self.active[k])]);
        let z = (0..data.p()).map(|j| data.x[(i, j)] * beta[j]).sum::<f64>();
        let (g, c) = (problem.loss.grad(data.y[i], z), problem.loss.hess(data.y[i], z));
        let v = self.chol.solve(&xi);
        let denom = 1.0 - c * xi.dot(&v);
        let mut out = beta.clone();
        if denom > 1e-8 {
            for (k, &j) in self.active.iter().enumerate() {
                out[j] += v[k] * g / denom;
            }
        }
        out
    }
}

/// Full fit plus the n leave-one-out refits, each warm-started at the
/// full-data solution and run at its final smoothing level.
pub fn fit_loo(problem: &Problem, data: &Dataset, config: &SolverConfig, exec: Execution) -> Result<LooFits> {
    let n = data.n();
    if n < 2 {
        return Err(Error::InvalidParameter("leave-one-out needs n >= 2".into()));
    }
    let full = fit(problem, data, config, None)?;
    let alpha = [full.alpha_used];
    let lip = full.lipschitz;
    let newton = NewtonStart::new(problem, data, &full);
    let results = exec.map(n, |i| {
        let view = View {
            x: &data.x,
            y: &data.y,
            skip: Some(i),
        };
        let init = match &newton {
            Some(ns) => ns.start(problem, data, &full.beta_hat, i),
            None => full.beta_hat.clone(),
        };
        fit_view(problem, view, config, &init, &alpha, lip).map_err(|e| Error::LooRefit {
            index: i,
            source: Box::new(e),
        })
    });
    let per_i = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(LooFits {
        full,
        per_i,
        warm_start_used: true,
    })
}

/// One fit per smoothing level (closed-form LASSO smoothing), each warm
/// started at the previous level.
pub fn fit_smoothing_path(
    problem: &Problem,
    data: &Dataset,
    config: &SolverConfig,
    alphas: &[f64],
) -> Result<SmoothingPath> {
    config.validate()?;
    problem.check(data)?;
    if problem.penalty.r0 != R0Variant::Lasso {
        return Err(Error::Unsupported(format!(
            "smoothing path for {} (closed form exists for the LASSO only)",
            problem.penalty.r0.name()
        )));
    }
    if alphas.is_empty() || alphas[0] < 1.0 || alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "alphas must be strictly increasing and at least 1".into(),
        ));
    }
    let view = View {
        x: &data.x,
        y: &data.y,
        skip: None,
    };
    let mut lip = curvature_estimate(problem, data);
    let mut start = DVector::zeros(data.p());
    let mut fits = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let fit = fit_view(problem, view, config, &start, &[alpha], lip).map_err(|e| Error::PathStep {
            alpha,
            source: Box::new(e),
        })?;
        lip = fit.lipschitz;
        start = fit.beta_hat.clone();
        fits.push(fit);
    }
    let gap_bounds = alphas
        .iter()
        .map(|&a| sup_gap_bound(&problem.penalty.r0, data.p(), a))
        .collect();
    Ok(SmoothingPath {
        alphas: alphas.to_vec(),
        fits,
        gap_bounds,
    })
}
