//! Experiment manifests: a TOML document with `[model]`, `[penalty]`,
//! `[solver]`, `[experiment]` and `[audit]` tables, plus `key=value`
//! overrides from the command line or `LO_RISK_*` environment variables.
//!
//! Parsing collects every problem it finds instead of stopping at the
//! first one; each message starts with the dotted key it refers to.

use std::collections::BTreeSet;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::model::{BetaStarMode, CovarianceSpec, ErrorMetric, LossFamily, ModelSpec, ModelTemplate};
use crate::penalty::{PenaltyTemplate, R0Kind, Smoothing, ThetaKind};
use crate::risk::MIN_MC_DRAWS;
use crate::rng::derive_seed;
use crate::solver::{AlphaSchedule, SolverConfig, StepRule};
use crate::verify::{MomentAudit, RateExperiment};

pub const ENV_PREFIX: &str = "LO_RISK_";
/// Environment variables with this prefix that are not config overrides.
const ENV_RESERVED: [&str; 1] = ["LO_RISK_THREADS"];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSection {
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub m_oo: usize,
    pub m_oo_max: usize,
    /// 0 skips the V₁/V₂ decomposition.
    pub m_cond: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            n_grid: vec![100, 200, 400, 800],
            replicates: 50,
            m_oo: 100_000,
            m_oo_max: 1_600_000,
            m_cond: 0,
            bootstrap: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditSection {
    pub seeds: Vec<u64>,
    /// Multiplier on the right-hand side of every audited inequality. Values
    /// below 1 tighten the bounds (useful to exercise the failure path).
    pub rhs_scale: f64,
    pub alphas: Vec<f64>,
    pub n_draws: usize,
    pub m_phi: usize,
    pub moment_replicates: usize,
    /// Loss families swept by the audits; empty means the model's own loss.
    pub losses: Vec<LossFamily>,
}

impl Default for AuditSection {
    fn default() -> Self {
        AuditSection {
            seeds: vec![0, 1, 2, 3, 4],
            rhs_scale: 1.0,
            alphas: vec![10.0, 100.0, 1000.0, 10000.0],
            n_draws: 10_000,
            m_phi: 2000,
            moment_replicates: 20,
            losses: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub model: ModelTemplate,
    /// Fixed sample size for single-instance commands.
    pub n: Option<usize>,
    /// Fixed dimension for single-instance commands.
    pub p: Option<usize>,
    /// Rescale β* until the SNR hits this value (single-instance commands).
    pub snr_target: Option<f64>,
    pub snr_samples: usize,
    pub penalty: PenaltyTemplate,
    pub solver: SolverConfig,
    pub experiment: ExperimentSection,
    pub audit: AuditSection,
}

/// Parse and validate a manifest, then apply `overrides` (later entries win).
pub fn load_config(doc: &str, overrides: &[(String, String)]) -> Result<Config> {
    let mut table: Table = doc.parse().map_err(|e: toml::de::Error| Error::Config(vec![format!("{e}")]))?;
    let mut errs = vec![];
    for (k, v) in overrides {
        if let Err(e) = apply_override(&mut table, k, v) {
            errs.push(e);
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    from_table(&table)
}

/// Parse and validate without overrides.
pub fn validate_config(doc: &str) -> Result<Config> {
    load_config(doc, &[])
}

/// `KEY=VALUE` split at the first `=`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(vec![format!("override `{s}` is not of the form key=value")])),
    }
}

/// `LO_RISK_PENALTY__R0__KIND=lasso` becomes `penalty.r0.kind = lasso`.
/// Sorted by key so the result does not depend on environment order.
pub fn env_overrides<I: IntoIterator<Item = (String, String)>>(vars: I) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && !ENV_RESERVED.contains(&k.as_str()))
        .map(|(k, v)| (k[ENV_PREFIX.len()..].to_lowercase().replace("__", "."), v))
        .collect();
    out.sort();
    out
}

fn apply_override(table: &mut Table, key: &str, raw: &str) -> std::result::Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("{key}: malformed override key"));
    }
    // TOML literal if it parses, bare string otherwise
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => Value::String(raw.to_string()),
    };
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(format!("{key}: `{part}` is not a table")),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Typed reader that remembers which keys were consumed and what went wrong.
struct Reader<'a> {
    root: &'a Table,
    used: BTreeSet<String>,
    errors: Vec<String>,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, path: &str) -> Option<&'a Value> {
        self.used.insert(path.to_string());
        let mut parts = path.split('.').peekable();
        let mut cur = self.root;
        while let Some(part) = parts.next() {
            let v = cur.get(part)?;
            if parts.peek().is_none() {
                return Some(v);
            }
            cur = v.as_table()?;
        }
        None
    }

    fn missing(&mut self, path: &str) {
        self.errors.push(format!("{path}: missing required key"));
    }

    fn wrong(&mut self, path: &str, want: &str, v: &Value) {
        self.errors.push(format!("{path}: expected {want}, got `{v}`"));
    }

    fn float(&mut self, path: &str, default: Option<f64>) -> f64 {
        match self.raw(path) {
            Some(Value::Float(f)) => *f,
            Some(Value::Integer(i)) => *i as f64,
            Some(v) => {
                self.wrong(path, "a number", v);
                f64::NAN
            }
            None => default.unwrap_or_else(|| {
                self.missing(path);
                f64::NAN
            }),
        }
    }

    fn opt_float(&mut self, path: &str) -> Option<f64> {
        self.raw(path)?;
        Some(self.float(path, None))
    }

    fn uint(&mut self, path: &str, default: Option<u64>) -> u64 {
        match self.raw(path) {
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(v) => {
                self.wrong(path, "a nonnegative integer", v);
                0
            }
            None => default.unwrap_or_else(|| {
                self.missing(path);
                0
            }),
        }
    }

    fn usize(&mut self, path: &str, default: usize) -> usize {
        self.uint(path, Some(default as u64)) as usize
    }

    fn opt_usize(&mut self, path: &str) -> Option<usize> {
        self.raw(path)?;
        Some(self.uint(path, None) as usize)
    }

    fn boolean(&mut self, path: &str, default: bool) -> bool {
        match self.raw(path) {
            Some(Value::Boolean(b)) => *b,
            Some(v) => {
                self.wrong(path, "true or false", v);
                default
            }
            None => default,
        }
    }

    fn string(&mut self, path: &str, default: Option<&str>) -> String {
        match self.raw(path) {
            Some(Value::String(s)) => s.clone(),
            Some(v) => {
                self.wrong(path, "a string", v);
                String::new()
            }
            None => match default {
                Some(d) => d.to_string(),
                None => {
                    self.missing(path);
                    String::new()
                }
            },
        }
    }

    fn array(&mut self, path: &str) -> Option<&'a Vec<Value>> {
        match self.raw(path) {
            Some(Value::Array(a)) => Some(a),
            Some(v) => {
                self.wrong(path, "an array", v);
                None
            }
            None => None,
        }
    }

    fn floats(&mut self, path: &str, default: Vec<f64>) -> Vec<f64> {
        let Some(a) = self.array(path) else { return default };
        let mut out = vec![];
        for v in a {
            match v {
                Value::Float(f) => out.push(*f),
                Value::Integer(i) => out.push(*i as f64),
                _ => self.wrong(path, "an array of numbers", v),
            }
        }
        out
    }

    fn uints(&mut self, path: &str, default: Vec<u64>) -> Vec<u64> {
        let Some(a) = self.array(path) else { return default };
        let mut out = vec![];
        for v in a {
            match v {
                Value::Integer(i) if *i >= 0 => out.push(*i as u64),
                _ => self.wrong(path, "an array of nonnegative integers", v),
            }
        }
        out
    }

    fn strings(&mut self, path: &str) -> Vec<String> {
        let Some(a) = self.array(path) else { return vec![] };
        let mut out = vec![];
        for v in a {
            match v {
                Value::String(s) => out.push(s.clone()),
                _ => self.wrong(path, "an array of strings", v),
            }
        }
        out
    }

    fn loss(&mut self, path: &str, name: &str) -> LossFamily {
        LossFamily::from_name(name).unwrap_or_else(|| {
            self.errors.push(format!(
                "{path}: unknown loss `{name}` (expected squared, logistic or poisson)"
            ));
            LossFamily::SquaredError
        })
    }

    /// Every key present in the document that nobody asked for.
    fn unknown_keys(&self) -> Vec<String> {
        let mut out = vec![];
        collect_leaves(self.root, "", &mut out);
        out.retain(|k| !self.used.contains(k));
        out
    }
}

fn collect_leaves(t: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(sub) => collect_leaves(sub, &path, out),
            _ => out.push(path),
        }
    }
}

fn from_table(table: &Table) -> Result<Config> {
    let mut r = Reader {
        root: table,
        used: BTreeSet::new(),
        errors: vec![],
    };

    let loss_name = r.string("model.loss", None);
    let loss = r.loss("model.loss", &loss_name);
    let metric_name = r.string("model.metric", Some(&loss_name));
    let metric = ErrorMetric(r.loss("model.metric", &metric_name));
    let gamma0 = r.float("model.gamma0", None);
    let n = r.opt_usize("model.n");
    let p = r.opt_usize("model.p");
    let covariance = match r.string("model.covariance.kind", Some("identity")).as_str() {
        "identity" => CovarianceSpec::ScaledIdentity(r.float("model.covariance.scale", Some(1.0))),
        "diagonal" => CovarianceSpec::ScaledDiagonal(r.floats("model.covariance.diag", vec![])),
        "ar1" => CovarianceSpec::ScaledAr1(r.float("model.covariance.rho", None)),
        other => {
            r.errors.push(format!(
                "model.covariance.kind: unknown covariance `{other}` (expected identity, diagonal or ar1)"
            ));
            CovarianceSpec::ScaledIdentity(1.0)
        }
    };
    let xi = r.float("model.xi", Some(1.0));
    let beta_star = match r.string("model.beta_star_mode", Some("rademacher")).as_str() {
        "rademacher" => BetaStarMode::Rademacher { xi },
        "constant" => BetaStarMode::Constant { xi },
        "sorted_gaussian" => BetaStarMode::SortedGaussian { xi },
        "zero" => BetaStarMode::Zero,
        other => {
            r.errors.push(format!(
                "model.beta_star_mode: unknown mode `{other}` (expected rademacher, constant, sorted_gaussian or zero)"
            ));
            BetaStarMode::Zero
        }
    };
    let noise_sigma = r.float("model.noise_sigma", Some(1.0));
    let xi_bounds = match r.floats("model.xi_bounds", vec![0.0, 10.0]).as_slice() {
        [lo, hi] => (*lo, *hi),
        _ => {
            r.errors.push("model.xi_bounds: expected [lo, hi]".into());
            (0.0, 10.0)
        }
    };
    let snr_target = r.opt_float("model.snr_target");
    let snr_samples = r.usize("model.snr_samples", 20_000);

    let lambda = r.float("penalty.lambda", None);
    let eta = r.float("penalty.eta", None);
    let r0 = match r.string("penalty.r0.kind", None).as_str() {
        "zero" | "ridge" => R0Kind::Zero,
        "lasso" => R0Kind::Lasso,
        "fused" => R0Kind::Fused,
        "group" => R0Kind::Group {
            size: r.usize("penalty.r0.group_size", 5),
        },
        "nuclear" => R0Kind::Schatten {
            rows: r.usize("penalty.r0.rows", 0),
            q: 1,
        },
        "schatten" => R0Kind::Schatten {
            rows: r.usize("penalty.r0.rows", 0),
            q: r.usize("penalty.r0.q", 1) as u32,
        },
        "" => R0Kind::Zero,
        other => {
            r.errors.push(format!(
                "penalty.r0.kind: unknown penalty `{other}` (expected zero, lasso, fused, group, nuclear or schatten)"
            ));
            R0Kind::Zero
        }
    };
    let theta = match r.string("penalty.theta.kind", Some("full")).as_str() {
        "full" => ThetaKind::Full,
        "nonnegative" => ThetaKind::Nonnegative,
        "box" => ThetaKind::Box {
            lo: r.float("penalty.theta.lo", None),
            hi: r.float("penalty.theta.hi", None),
        },
        "ball" => ThetaKind::Ball {
            radius: r.float("penalty.theta.radius", None),
        },
        "isotone" => ThetaKind::Isotone,
        other => {
            r.errors.push(format!(
                "penalty.theta.kind: unknown constraint `{other}` (expected full, nonnegative, box, ball or isotone)"
            ));
            ThetaKind::Full
        }
    };
    let smoothing = match r.string("penalty.smoothing.mode", Some("none")).as_str() {
        "none" => Smoothing::None,
        "closed_form" => Smoothing::ClosedForm,
        "monte_carlo" => Smoothing::MonteCarlo {
            samples: r.usize("penalty.smoothing.samples", 1000),
            seed: r.uint("penalty.smoothing.seed", Some(0)),
        },
        other => {
            r.errors.push(format!(
                "penalty.smoothing.mode: unknown mode `{other}` (expected none, closed_form or monte_carlo)"
            ));
            Smoothing::None
        }
    };
    let fixed_alpha = r.opt_float("penalty.alpha");

    let d = SolverConfig::default();
    let step_rule = match r.string("solver.step_rule", Some("backtracking")).as_str() {
        "backtracking" => StepRule::Backtracking {
            shrink: r.float("solver.shrink", Some(0.5)),
        },
        "fixed" => StepRule::FixedInverseLipschitz,
        other => {
            r.errors.push(format!(
                "solver.step_rule: unknown rule `{other}` (expected backtracking or fixed)"
            ));
            d.step_rule
        }
    };
    let (a0, amax, g) = match d.alpha_schedule {
        AlphaSchedule::Continuation { alpha0, alpha_max, growth } => (alpha0, alpha_max, growth),
        AlphaSchedule::Fixed(_) => unreachable!("default schedule is a continuation"),
    };
    let continuation = AlphaSchedule::Continuation {
        alpha0: r.float("solver.alpha0", Some(a0)),
        alpha_max: r.float("solver.alpha_max", Some(amax)),
        growth: r.float("solver.alpha_growth", Some(g)),
    };
    let solver = SolverConfig {
        max_iters: r.usize("solver.max_iters", d.max_iters),
        tol: r.float("solver.tol", Some(d.tol)),
        step_rule,
        acceleration: r.boolean("solver.acceleration", d.acceleration),
        alpha_schedule: match fixed_alpha {
            Some(a) => AlphaSchedule::Fixed(a),
            None => continuation,
        },
        allow_unconverged: r.boolean("solver.allow_unconverged", d.allow_unconverged),
        record_history: false,
    };

    let de = ExperimentSection::default();
    let experiment = ExperimentSection {
        n_grid: r
            .uints("experiment.n_grid", de.n_grid.iter().map(|&v| v as u64).collect())
            .into_iter()
            .map(|v| v as usize)
            .collect(),
        replicates: r.usize("experiment.replicates", de.replicates),
        m_oo: r.usize("experiment.m_oo", de.m_oo),
        m_oo_max: r.usize("experiment.m_oo_max", de.m_oo_max),
        m_cond: r.usize("experiment.m_cond", de.m_cond),
        bootstrap: r.usize("experiment.bootstrap", de.bootstrap),
        seed: r.uint("experiment.seed", Some(de.seed)),
    };

    let da = AuditSection::default();
    let loss_names = r.strings("audit.losses");
    let audit = AuditSection {
        seeds: r.uints("audit.seeds", da.seeds),
        rhs_scale: r.float("audit.rhs_scale", Some(da.rhs_scale)),
        alphas: r.floats("audit.alphas", da.alphas),
        n_draws: r.usize("audit.n_draws", da.n_draws),
        m_phi: r.usize("audit.m_phi", da.m_phi),
        moment_replicates: r.usize("audit.moment_replicates", da.moment_replicates),
        losses: loss_names.iter().map(|s| r.loss("audit.losses", s)).collect(),
    };

    for k in r.unknown_keys() {
        r.errors.push(format!("{k}: unknown key"));
    }

    let cfg = Config {
        model: ModelTemplate {
            loss,
            metric,
            gamma0,
            covariance,
            beta_star,
            noise_sigma,
            xi_bounds,
        },
        n,
        p,
        snr_target,
        snr_samples,
        penalty: PenaltyTemplate {
            r0,
            theta,
            eta,
            lambda,
            smoothing,
        },
        solver,
        experiment,
        audit,
    };
    // semantic checks still run after read errors; keys that failed to read
    // hold placeholders, so their messages are dropped
    let mut errs = r.errors;
    let bad: Vec<String> = errs.iter().filter_map(|e| e.split_once(':').map(|(k, _)| k.to_string())).collect();
    errs.extend(
        cfg.check()
            .into_iter()
            .filter(|e| !e.split_once(':').is_some_and(|(k, _)| bad.iter().any(|b| b == k))),
    );
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errs))
    }
}

fn f(v: f64) -> Value {
    Value::Float(v)
}

fn int(v: impl TryInto<i64>) -> Value {
    Value::Integer(v.try_into().unwrap_or(i64::MAX))
}

fn s(v: &str) -> Value {
    Value::String(v.to_string())
}

fn table<const N: usize>(entries: [(&str, Value); N]) -> Value {
    Value::Table(entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

impl Config {
    /// Semantic checks that need more than one key. Empty means valid.
    pub fn check(&self) -> Vec<String> {
        let mut errs = vec![];
        let m = &self.model;
        if !(m.gamma0 > 0.0 && m.gamma0.is_finite()) {
            errs.push(format!(
                "model.gamma0: gamma0 must be positive, got {}; n and p must grow together at a fixed ratio n/p = gamma0 > 0",
                m.gamma0
            ));
        }
        if !(m.noise_sigma >= 0.0) {
            errs.push(format!("model.noise_sigma: must be nonnegative, got {}", m.noise_sigma));
        }
        if !(m.xi_bounds.0 >= 0.0 && m.xi_bounds.1 >= m.xi_bounds.0) {
            errs.push("model.xi_bounds: need 0 <= lo <= hi".into());
        }
        if let Some(t) = self.snr_target {
            if !(t > 0.0) {
                errs.push(format!("model.snr_target: must be positive, got {t}"));
            }
        }
        if self.n == Some(0) || self.p == Some(0) {
            errs.push("model.n / model.p: must be at least 1".into());
        }
        let pen = &self.penalty;
        if !(pen.eta > 0.0 && pen.eta < 1.0) {
            errs.push(format!(
                "penalty.eta: eta must lie strictly inside (0,1), got {}; the ridge share is what makes the objective strongly convex",
                pen.eta
            ));
        }
        if !(pen.lambda > 0.0 && pen.lambda.is_finite()) {
            errs.push(format!("penalty.lambda: lambda must be positive, got {}", pen.lambda));
        }
        if let R0Kind::Schatten { q, .. } = pen.r0 {
            if q != 1 && q != 2 {
                errs.push(format!("penalty.r0.q: only q = 1 and q = 2 are supported, got {q}"));
            }
        }
        if let R0Kind::Group { size: 0 } = pen.r0 {
            errs.push("penalty.r0.group_size: must be at least 1".into());
        }
        match pen.smoothing {
            Smoothing::ClosedForm if !matches!(pen.r0, R0Kind::Lasso | R0Kind::Zero) => errs.push(
                "penalty.smoothing.mode: closed_form smoothing is only available for lasso".into(),
            ),
            Smoothing::MonteCarlo { .. } => errs.push(
                "penalty.smoothing.mode: monte_carlo smoothing is evaluation-only and cannot be used for fitting"
                    .into(),
            ),
            _ => {}
        }
        if let Err(e) = self.solver.validate() {
            errs.push(format!("solver: {e}"));
        }
        let e = &self.experiment;
        if e.n_grid.is_empty() || e.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            errs.push("experiment.n_grid: must be a nonempty strictly increasing list".into());
        }
        if e.m_oo < MIN_MC_DRAWS {
            errs.push(format!("experiment.m_oo: needs at least {MIN_MC_DRAWS} draws, got {}", e.m_oo));
        }
        if e.m_cond != 0 && e.m_cond < MIN_MC_DRAWS {
            errs.push(format!(
                "experiment.m_cond: must be 0 (off) or at least {MIN_MC_DRAWS}, got {}",
                e.m_cond
            ));
        }
        if e.m_oo_max < e.m_oo {
            errs.push("experiment.m_oo_max: must be at least experiment.m_oo".into());
        }
        let a = &self.audit;
        if a.m_phi < MIN_MC_DRAWS {
            errs.push(format!("audit.m_phi: needs at least {MIN_MC_DRAWS} draws, got {}", a.m_phi));
        }
        if a.seeds.is_empty() {
            errs.push("audit.seeds: must not be empty".into());
        }
        if !(a.rhs_scale > 0.0) {
            errs.push(format!("audit.rhs_scale: must be positive, got {}", a.rhs_scale));
        }
        if a.alphas.is_empty() || a.alphas.windows(2).any(|w| w[1] <= w[0]) || a.alphas[0] <= 0.0 {
            errs.push("audit.alphas: must be a nonempty increasing list of positive values".into());
        }
        // shape checks at every dimension this manifest can produce
        let gamma_ok = m.gamma0 > 0.0 && m.gamma0.is_finite();
        let p_of = |n: usize| ((n as f64 / m.gamma0).round() as usize).max(1);
        let mut ps = BTreeSet::new();
        match (self.n, self.p) {
            (_, Some(p)) if p > 0 => {
                ps.insert(p);
            }
            (Some(n), None) if gamma_ok => {
                ps.insert(p_of(n));
            }
            _ => {}
        }
        if gamma_ok {
            ps.extend(e.n_grid.iter().map(|&n| p_of(n)));
        }
        let scalars_ok = errs.is_empty();
        let mut seen = BTreeSet::new();
        for p in ps {
            let pen_err = if scalars_ok {
                self.penalty.build(p).err()
            } else {
                self.penalty.r0.build(p).err()
            };
            for msg in [pen_err, m.covariance.validate(p).err()]
                .into_iter()
                .flatten()
                .map(|e| e.to_string())
            {
                if seen.insert(msg.clone()) {
                    errs.push(format!("penalty/model at p = {p}: {msg}"));
                }
            }
        }
        errs
    }

    pub fn seed(&self) -> u64 {
        self.experiment.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.experiment.seed = seed;
    }

    /// The single problem instance used by `fit`, `lo` and `snr`.
    pub fn instance(&self) -> Result<ModelSpec> {
        self.instance_of(&self.model)
    }

    /// Like [`Config::instance`] with another model template at the same n, p.
    pub fn instance_of(&self, m: &ModelTemplate) -> Result<ModelSpec> {
        let beta_seed = |n: usize| derive_seed(self.seed(), &[0xB5, n as u64]);
        let mut spec = match (self.n, self.p) {
            (Some(n), Some(p)) => m.with_np(n, p, beta_seed(n))?,
            (Some(n), None) => m.at_n(n, beta_seed(n))?,
            (None, Some(p)) => {
                let n = (m.gamma0 * p as f64).round() as usize;
                m.with_np(n, p, beta_seed(n))?
            }
            (None, None) => {
                return Err(Error::Config(vec![
                    "model.n / model.p: single-instance commands need model.n or model.p".into(),
                ]))
            }
        };
        if let Some(target) = self.snr_target {
            spec.calibrate_snr(target, self.snr_samples, derive_seed(self.seed(), &[0x5A]))?;
        }
        Ok(spec)
    }

    pub fn rate_experiment(&self) -> Result<RateExperiment> {
        let e = &self.experiment;
        let exp = RateExperiment {
            model: self.model.clone(),
            penalty: self.penalty.clone(),
            n_grid: e.n_grid.clone(),
            replicates: e.replicates,
            m_oo: e.m_oo,
            m_oo_max: e.m_oo_max,
            m_cond: (e.m_cond > 0).then_some(e.m_cond),
            bootstrap: e.bootstrap,
            base_seed: e.seed,
            solver: self.solver.clone(),
        };
        exp.validate()?;
        Ok(exp)
    }

    pub fn moment_audit(&self) -> MomentAudit {
        MomentAudit {
            model: self.model.clone(),
            penalty: self.penalty.clone(),
            n_grid: self.experiment.n_grid.clone(),
            replicates: self.audit.moment_replicates,
            n_draws: self.audit.n_draws,
            m_phi: self.audit.m_phi,
            base_seed: self.experiment.seed,
            solver: self.solver.clone(),
        }
    }

    /// Model templates swept by the bound audits.
    pub fn audit_models(&self) -> Vec<ModelTemplate> {
        if self.audit.losses.is_empty() {
            return vec![self.model.clone()];
        }
        self.audit
            .losses
            .iter()
            .map(|&loss| ModelTemplate {
                loss,
                metric: ErrorMetric(loss),
                ..self.model.clone()
            })
            .collect()
    }

    /// Canonical TOML form; parsing it gives back an equal `Config`.
    pub fn to_toml(&self) -> String {
        let m = &self.model;
        let covariance = match &m.covariance {
            CovarianceSpec::ScaledIdentity(c) => table([("kind", s("identity")), ("scale", f(*c))]),
            CovarianceSpec::ScaledDiagonal(d) => table([
                ("kind", s("diagonal")),
                ("diag", Value::Array(d.iter().map(|v| f(*v)).collect())),
            ]),
            CovarianceSpec::ScaledAr1(rho) => table([("kind", s("ar1")), ("rho", f(*rho))]),
        };
        let (mode, xi) = match m.beta_star {
            BetaStarMode::Rademacher { xi } => ("rademacher", xi),
            BetaStarMode::Constant { xi } => ("constant", xi),
            BetaStarMode::SortedGaussian { xi } => ("sorted_gaussian", xi),
            BetaStarMode::Zero => ("zero", 1.0),
        };
        let mut model = Table::new();
        model.insert("loss".into(), s(m.loss.name()));
        model.insert("metric".into(), s(m.metric.name()));
        model.insert("gamma0".into(), f(m.gamma0));
        if let Some(n) = self.n {
            model.insert("n".into(), int(n));
        }
        if let Some(p) = self.p {
            model.insert("p".into(), int(p));
        }
        model.insert("beta_star_mode".into(), s(mode));
        model.insert("xi".into(), f(xi));
        model.insert("noise_sigma".into(), f(m.noise_sigma));
        model.insert(
            "xi_bounds".into(),
            Value::Array(vec![f(m.xi_bounds.0), f(m.xi_bounds.1)]),
        );
        if let Some(t) = self.snr_target {
            model.insert("snr_target".into(), f(t));
        }
        model.insert("snr_samples".into(), int(self.snr_samples));
        model.insert("covariance".into(), covariance);

        let pen = &self.penalty;
        let r0 = match pen.r0 {
            R0Kind::Zero => table([("kind", s("zero"))]),
            R0Kind::Lasso => table([("kind", s("lasso"))]),
            R0Kind::Fused => table([("kind", s("fused"))]),
            R0Kind::Group { size } => table([("kind", s("group")), ("group_size", int(size))]),
            R0Kind::Schatten { rows, q } => {
                table([("kind", s("schatten")), ("rows", int(rows)), ("q", int(q))])
            }
        };
        let theta = match pen.theta {
            ThetaKind::Full => table([("kind", s("full"))]),
            ThetaKind::Nonnegative => table([("kind", s("nonnegative"))]),
            ThetaKind::Box { lo, hi } => table([("kind", s("box")), ("lo", f(lo)), ("hi", f(hi))]),
            ThetaKind::Ball { radius } => table([("kind", s("ball")), ("radius", f(radius))]),
            ThetaKind::Isotone => table([("kind", s("isotone"))]),
        };
        let smoothing = match pen.smoothing {
            Smoothing::None => table([("mode", s("none"))]),
            Smoothing::ClosedForm => table([("mode", s("closed_form"))]),
            Smoothing::MonteCarlo { samples, seed } => table([
                ("mode", s("monte_carlo")),
                ("samples", int(samples)),
                ("seed", int(seed)),
            ]),
        };
        let mut penalty = Table::new();
        penalty.insert("lambda".into(), f(pen.lambda));
        penalty.insert("eta".into(), f(pen.eta));
        if let AlphaSchedule::Fixed(a) = self.solver.alpha_schedule {
            penalty.insert("alpha".into(), f(a));
        }
        penalty.insert("r0".into(), r0);
        penalty.insert("theta".into(), theta);
        penalty.insert("smoothing".into(), smoothing);

        let sv = &self.solver;
        let mut solver = Table::new();
        solver.insert("max_iters".into(), int(sv.max_iters));
        solver.insert("tol".into(), f(sv.tol));
        match sv.step_rule {
            StepRule::Backtracking { shrink } => {
                solver.insert("step_rule".into(), s("backtracking"));
                solver.insert("shrink".into(), f(shrink));
            }
            StepRule::FixedInverseLipschitz => {
                solver.insert("step_rule".into(), s("fixed"));
            }
        }
        solver.insert("acceleration".into(), Value::Boolean(sv.acceleration));
        if let AlphaSchedule::Continuation { alpha0, alpha_max, growth } = sv.alpha_schedule {
            solver.insert("alpha0".into(), f(alpha0));
            solver.insert("alpha_max".into(), f(alpha_max));
            solver.insert("alpha_growth".into(), f(growth));
        }
        solver.insert("allow_unconverged".into(), Value::Boolean(sv.allow_unconverged));

        let e = &self.experiment;
        let experiment = table([
            ("n_grid", Value::Array(e.n_grid.iter().map(|&v| int(v)).collect())),
            ("replicates", int(e.replicates)),
            ("m_oo", int(e.m_oo)),
            ("m_oo_max", int(e.m_oo_max)),
            ("m_cond", int(e.m_cond)),
            ("bootstrap", int(e.bootstrap)),
            ("seed", int(e.seed)),
        ]);
        let a = &self.audit;
        let audit = table([
            ("seeds", Value::Array(a.seeds.iter().map(|&v| int(v)).collect())),
            ("rhs_scale", f(a.rhs_scale)),
            ("alphas", Value::Array(a.alphas.iter().map(|&v| f(v)).collect())),
            ("n_draws", int(a.n_draws)),
            ("m_phi", int(a.m_phi)),
            ("moment_replicates", int(a.moment_replicates)),
            ("losses", Value::Array(a.losses.iter().map(|l| s(l.name())).collect())),
        ]);

        let mut root = Table::new();
        root.insert("model".into(), Value::Table(model));
        root.insert("penalty".into(), Value::Table(penalty));
        root.insert("solver".into(), Value::Table(solver));
        root.insert("experiment".into(), experiment);
        root.insert("audit".into(), audit);
        root.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
loss = "logistic"
gamma0 = 2.0
p = 20

[penalty]
lambda = 1.0
eta = 0.3
r0 = { kind = "lasso" }
"#;

    fn errors(doc: &str, overrides: &[(String, String)]) -> Vec<String> {
        match load_config(doc, overrides) {
            Err(Error::Config(e)) => e,
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn minimal_document_gets_defaults() {
        let c = validate_config(MINIMAL).unwrap();
        assert_eq!(c.model.loss, LossFamily::LogisticNll);
        assert_eq!(c.model.metric, ErrorMetric(LossFamily::LogisticNll));
        assert_eq!(c.penalty.r0, R0Kind::Lasso);
        assert_eq!(c.solver, SolverConfig::default());
        assert_eq!(c.experiment, ExperimentSection::default());
        let spec = c.instance().unwrap();
        assert_eq!((spec.n, spec.p), (40, 20));
    }

    #[test]
    fn missing_lambda_names_the_key() {
        let doc = MINIMAL.replace("lambda = 1.0\n", "");
        let e = errors(&doc, &[]);
        assert_eq!(e.len(), 1);
        assert!(e[0].starts_with("penalty.lambda"), "{e:?}");
    }

    #[test]
    fn errors_are_aggregated() {
        let e = errors(MINIMAL, &[ov("penalty.eta", "1"), ov("model.gamma0", "0")]);
        assert!(e.iter().any(|m| m.contains("eta must lie strictly inside (0,1)")), "{e:?}");
        assert!(e.iter().any(|m| m.starts_with("model.gamma0")), "{e:?}");
        let e = errors(MINIMAL, &[ov("model.lossy", "1"), ov("penalty.r0.kind", "\"l1\"")]);
        assert_eq!(e.len(), 2, "{e:?}");
        assert!(e.iter().any(|m| m.starts_with("penalty.r0.kind: unknown penalty")), "{e:?}");
        assert!(e.iter().any(|m| m == "model.lossy: unknown key"), "{e:?}");
    }

    #[test]
    fn monte_carlo_sizes_are_checked_up_front() {
        let e = errors(MINIMAL, &[ov("experiment.m_cond", "200"), ov("audit.m_phi", "10")]);
        assert!(e.iter().any(|m| m.starts_with("experiment.m_cond: must be 0 (off) or at least 1000")), "{e:?}");
        assert!(e.iter().any(|m| m.starts_with("audit.m_phi")), "{e:?}");
    }

    #[test]
    fn schatten_shape_is_checked() {
        let e = errors(
            MINIMAL,
            &[
                ov("model.p", "7"),
                ov("experiment.n_grid", "[14]"),
                ov("penalty.r0.kind", "schatten"),
                ov("penalty.r0.rows", "2"),
            ],
        );
        assert!(e.iter().any(|m| m.contains("not divisible")), "{e:?}");
        let e = errors(
            MINIMAL,
            &[ov("penalty.eta", "1"), ov("penalty.r0.kind", "nuclear"), ov("penalty.r0.rows", "4"), ov("model.p", "7")],
        );
        assert!(e[0].starts_with("penalty.eta"), "{e:?}");
        assert!(e.iter().any(|m| m.contains("p = 7 is not divisible by rows = 4")), "{e:?}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e = errors("[model]\nloss = \n", &[]);
        assert!(e[0].contains("line 2"), "{e:?}");
    }

    #[test]
    fn overrides_take_literals_or_strings() {
        let c = load_config(
            MINIMAL,
            &[
                ov("penalty.r0.kind", "group"),
                ov("penalty.r0.group_size", "4"),
                ov("experiment.n_grid", "[40, 80]"),
                ov("solver.acceleration", "false"),
            ],
        )
        .unwrap();
        assert_eq!(c.penalty.r0, R0Kind::Group { size: 4 });
        assert_eq!(c.experiment.n_grid, vec![40, 80]);
        assert!(!c.solver.acceleration);
        assert!(parse_override("a.b=c=d").unwrap().1 == "c=d");
        assert!(parse_override("=x").is_err());
    }

    #[test]
    fn env_names_map_to_dotted_keys() {
        let vars = vec![
            ("LO_RISK_THREADS".to_string(), "4".to_string()),
            ("LO_RISK_PENALTY__LAMBDA".to_string(), "2.5".to_string()),
            ("LO_RISK_MODEL__COVARIANCE__KIND".to_string(), "ar1".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        let o = env_overrides(vars);
        assert_eq!(
            o,
            vec![ov("model.covariance.kind", "ar1"), ov("penalty.lambda", "2.5")]
        );
        let c = load_config(MINIMAL, &[o[1].clone()]).unwrap();
        assert_eq!(c.penalty.lambda, 2.5);
    }

    #[test]
    fn round_trip_is_exact() {
        let docs = [
            MINIMAL.to_string(),
            format!(
                "{MINIMAL}\n[experiment]\nm_cond = 1500\nseed = 9\n[audit]\nlosses = [\"squared\", \"poisson\"]\n"
            ),
        ];
        for doc in &docs {
            let c = validate_config(doc).unwrap();
            let again = validate_config(&c.to_toml()).unwrap();
            assert_eq!(c, again);
        }
        let mut c = validate_config(MINIMAL).unwrap();
        c.model.covariance = CovarianceSpec::ScaledAr1(0.5);
        c.penalty.theta = ThetaKind::Box { lo: -1.0, hi: 2.0 };
        c.penalty.r0 = R0Kind::Schatten { rows: 4, q: 1 };
        c.solver.alpha_schedule = AlphaSchedule::Fixed(100.0);
        c.solver.step_rule = StepRule::FixedInverseLipschitz;
        c.snr_target = Some(1.5);
        c.experiment.n_grid = vec![40, 80];
        assert_eq!(validate_config(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn builders_follow_the_manifest() {
        let c = load_config(MINIMAL, &[ov("experiment.n_grid", "[40, 80]"), ov("experiment.m_cond", "0")]).unwrap();
        let exp = c.rate_experiment().unwrap();
        assert_eq!(exp.m_cond, None);
        assert_eq!(exp.n_grid, vec![40, 80]);
        assert_eq!(c.audit_models().len(), 1);
        let bad = load_config(MINIMAL, &[ov("experiment.replicates", "3")]).unwrap();
        assert!(bad.rate_experiment().is_err());
    }
}
