use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use lo_risk_core::config::{env_overrides, load_config, parse_override, Config};
use lo_risk_core::model::compute_snr;
use lo_risk_core::rng::derive_seed;
use lo_risk_core::risk::RISK_CSV_HEADER;
use lo_risk_core::solver::{fit, Problem};
use lo_risk_core::verify::{
    audit_moments, risk_replicate, run_lemma4_audit, run_lemma8_audit, run_rate_experiment, BoundAuditReport,
    BOUND_CSV_HEADER, MOMENTS_CSV_HEADER,
};
use lo_risk_core::{Error, Execution};

const EXIT_AUDIT: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;

/// Leave-one-out versus out-of-sample risk experiments for regularized GLMs.
#[derive(Parser, Debug)]
#[command(name = "lo-risk", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment manifest (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for reports; created if missing.
    #[arg(long, global = true, default_value = "out")]
    output_dir: PathBuf,

    /// Worker threads, 0 = one per core.
    #[arg(long, global = true, env = "LO_RISK_THREADS", default_value_t = 0)]
    threads: usize,

    /// Base seed; replaces experiment.seed from the manifest.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override a manifest key, e.g. --set penalty.lambda=0.5 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Validate and print the plan without computing anything.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Fit the configured instance once.
    Fit,
    /// LO, OO and their squared gap on one dataset.
    Lo,
    /// E(LO − OO)² over the n grid and its log-log slope.
    Rate,
    /// Leave-one-out stability inequalities.
    #[command(name = "audit-lemma4")]
    AuditLemma4,
    /// Smoothing-path inequalities.
    #[command(name = "audit-lemma8")]
    AuditLemma8,
    /// Moment bounds on x, p⁻¹‖β̂‖² and φ₀².
    #[command(name = "audit-moments")]
    AuditMoments,
    /// Signal-to-noise ratio of the configured instance.
    Snr,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Lo => "lo",
            Command::Rate => "rate",
            Command::AuditLemma4 => "audit-lemma4",
            Command::AuditLemma8 => "audit-lemma8",
            Command::AuditMoments => "audit-moments",
            Command::Snr => "snr",
        }
    }
}

/// What a finished command hands back for writing.
struct Outcome {
    files: Vec<(&'static str, String)>,
    summary: Value,
    exit: u8,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(msgs) => {
            for m in msgs {
                eprintln!("config error: {m}");
            }
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Err(e) = preflight(cli.command, &cfg) {
        return report_error(&e);
    }
    if cli.dry_run {
        print_plan(&cli, &cfg);
        return ExitCode::SUCCESS;
    }

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let outcome = pool.install(|| run(cli.command, &cfg));
    match outcome {
        Ok(out) => {
            if let Err(e) = write_outputs(&cli.output_dir, cli.command, &cfg, out.files, out.summary, out.exit) {
                eprintln!("error: writing reports to {}: {e}", cli.output_dir.display());
                return ExitCode::from(EXIT_CONFIG);
            }
            ExitCode::from(out.exit)
        }
        Err(e) => report_error(&e),
    }
}

fn load(cli: &Cli) -> Result<Config, Vec<String>> {
    let Some(path) = &cli.config else {
        return Err(vec!["--config is required".into()]);
    };
    let doc = fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let mut overrides = env_overrides(std::env::vars());
    let mut errs = vec![];
    for s in &cli.overrides {
        match parse_override(s) {
            Ok(kv) => overrides.push(kv),
            Err(Error::Config(m)) => errs.extend(m),
            Err(e) => errs.push(e.to_string()),
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }
    let mut cfg = load_config(&doc, &overrides).map_err(|e| match e {
        Error::Config(m) => m.into_iter().map(|s| format!("{}: {s}", path.display())).collect(),
        other => vec![other.to_string()],
    })?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

/// Checks that need the subcommand: builds every object the run will use.
fn preflight(cmd: Command, cfg: &Config) -> lo_risk_core::Result<()> {
    match cmd {
        Command::Rate => cfg.rate_experiment().map(|_| ()),
        Command::AuditMoments => {
            if cfg.audit.moment_replicates < 2 {
                return Err(Error::Config(vec!["audit.moment_replicates: must be at least 2".into()]));
            }
            if cfg.audit.n_draws < 10_000 {
                return Err(Error::Config(vec!["audit.n_draws: must be at least 10000".into()]));
            }
            Ok(())
        }
        Command::AuditLemma4 | Command::AuditLemma8 => {
            for m in cfg.audit_models() {
                let spec = cfg.instance_of(&m)?;
                cfg.penalty.build(spec.p)?;
            }
            Ok(())
        }
        Command::Fit | Command::Lo | Command::Snr => {
            let spec = cfg.instance()?;
            cfg.penalty.build(spec.p).map(|_| ())
        }
    }
}

fn report_error(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code_for(e))
}

fn exit_code_for(e: &Error) -> u8 {
    if e.is_nonconvergence() {
        return EXIT_NONCONVERGENCE;
    }
    match e {
        Error::Config(_) | Error::InvalidParameter(_) | Error::Shape { .. } | Error::Unsupported(_) => EXIT_CONFIG,
        _ => EXIT_NONCONVERGENCE,
    }
}

fn outputs_of(cmd: Command) -> &'static [&'static str] {
    match cmd {
        Command::Fit | Command::Snr => &["summary.json"],
        Command::Lo | Command::Rate => &["rate_report.csv", "summary.json"],
        Command::AuditLemma4 | Command::AuditLemma8 => &["bound_audit.csv", "summary.json"],
        Command::AuditMoments => &["moments.csv", "summary.json"],
    }
}

fn print_plan(cli: &Cli, cfg: &Config) {
    let threads = if cli.threads == 0 { "auto".to_string() } else { cli.threads.to_string() };
    println!("command:    {}", cli.command.name());
    println!("seed:       {}", cfg.seed());
    println!("threads:    {threads}");
    println!("output dir: {}", cli.output_dir.display());
    println!("writes:     {}", outputs_of(cli.command).join(", "));
    let pen = &cfg.penalty;
    println!(
        "model:      loss={} gamma0={} | penalty r0={:?} theta={:?} lambda={} eta={}",
        cfg.model.loss.name(),
        cfg.model.gamma0,
        pen.r0,
        pen.theta,
        pen.lambda,
        pen.eta
    );
    match cli.command {
        Command::Rate => {
            let e = &cfg.experiment;
            println!(
                "plan:       {} replicates x n in {:?}, m_oo={} (max {}), m_cond={}, bootstrap={}",
                e.replicates, e.n_grid, e.m_oo, e.m_oo_max, e.m_cond, e.bootstrap
            );
        }
        Command::AuditLemma4 | Command::AuditLemma8 => {
            let losses: Vec<&str> = cfg.audit_models().iter().map(|m| m.loss.name()).collect();
            println!(
                "plan:       losses {:?} x seeds {:?}, rhs_scale={}{}",
                losses,
                cfg.audit.seeds,
                cfg.audit.rhs_scale,
                if cli.command == Command::AuditLemma8 {
                    format!(", alphas {:?}", cfg.audit.alphas)
                } else {
                    String::new()
                }
            );
        }
        Command::AuditMoments => println!(
            "plan:       n in {:?}, {} replicates, {} draws for |x|^8, m_phi={}",
            cfg.experiment.n_grid, cfg.audit.moment_replicates, cfg.audit.n_draws, cfg.audit.m_phi
        ),
        Command::Fit | Command::Lo | Command::Snr => {
            if let Ok(spec) = cfg.instance() {
                println!("plan:       one instance with n={} p={}", spec.n, spec.p);
            }
        }
    }
}

fn run(cmd: Command, cfg: &Config) -> lo_risk_core::Result<Outcome> {
    let exec = Execution::Parallel;
    let seed = cfg.seed();
    match cmd {
        Command::Fit => {
            let spec = cfg.instance()?;
            let data = lo_risk_core::model::generate_dataset(&spec, seed)?;
            let problem = Problem::from_spec(&spec, cfg.penalty.build(spec.p)?);
            let f = fit(&problem, &data, &cfg.solver, None)?;
            Ok(Outcome {
                files: vec![],
                summary: json!({
                    "n": spec.n,
                    "p": spec.p,
                    "objective": f.objective,
                    "fp_residual": f.fp_residual,
                    "iters": f.iters,
                    "converged": f.converged,
                    "alpha_used": if f.alpha_used.is_finite() { json!(f.alpha_used) } else { json!("inf") },
                    "beta_hat": f.beta_hat.as_slice(),
                }),
                exit: if f.converged { 0 } else { EXIT_NONCONVERGENCE },
            })
        }
        Command::Lo => {
            let spec = cfg.instance()?;
            let pen = cfg.penalty.build(spec.p)?;
            let m_cond = (cfg.experiment.m_cond > 0).then_some(cfg.experiment.m_cond);
            let (row, loo) = risk_replicate(&spec, &pen, &cfg.solver, seed, cfg.experiment.m_oo, m_cond, exec)?;
            let csv = format!("{RISK_CSV_HEADER}\n{}\n", row.csv_row());
            Ok(Outcome {
                files: vec![("rate_report.csv", csv)],
                summary: json!({
                    "n": row.n,
                    "p": row.p,
                    "lo": row.lo,
                    "oo_mc": row.oo_mc,
                    "oo_mc_se": row.oo_mc_se,
                    "sq_err": row.sq_err,
                    "mc_bias": row.mc_bias,
                    "v1": row.v1,
                    "v2": row.v2,
                    "degraded": row.degraded,
                    "all_converged": loo.all_converged(),
                }),
                exit: 0,
            })
        }
        Command::Rate => {
            let exp = cfg.rate_experiment()?;
            let rep = run_rate_experiment(&exp, exec)?;
            let mut csv = format!("{RISK_CSV_HEADER}\n");
            for row in &rep.rows {
                csv.push_str(&row.csv_row());
                csv.push('\n');
            }
            let per_n: Vec<Value> = rep
                .per_n
                .iter()
                .map(|r| {
                    json!({
                        "n": r.n, "p": r.p, "mse": r.mse, "mse_se": r.mse_se,
                        "mc_bias": r.mc_bias, "replicates_ok": r.replicates_ok, "failures": r.failures,
                    })
                })
                .collect();
            Ok(Outcome {
                files: vec![("rate_report.csv", csv)],
                summary: json!({
                    "slope": rep.slope,
                    "intercept": rep.intercept,
                    "slope_ci": [rep.slope_ci.0, rep.slope_ci.1],
                    "ci_width": rep.ci_width(),
                    "slope_in_bracket": (-1.5..=-0.6).contains(&rep.slope),
                    "bootstrap_used": rep.bootstrap_used,
                    "m_oo_initial": rep.m_oo_initial,
                    "m_oo_used": rep.m_oo_used,
                    "m_oo_raised": rep.m_oo_raised,
                    "bias_ratio": rep.bias_ratio(),
                    "failures": rep.failures,
                    "total": rep.total,
                    "per_n": per_n,
                }),
                exit: 0,
            })
        }
        Command::AuditLemma4 | Command::AuditLemma8 => {
            let seeds: Vec<u64> = cfg.audit.seeds.iter().map(|&s| derive_seed(seed, &[s])).collect();
            let mut merged: Option<BoundAuditReport> = None;
            for m in cfg.audit_models() {
                let spec = cfg.instance_of(&m)?;
                let pen = cfg.penalty.build(spec.p)?;
                let rep = if cmd == Command::AuditLemma4 {
                    run_lemma4_audit(&spec, &pen, &cfg.solver, &seeds, cfg.audit.rhs_scale, exec)?
                } else {
                    let mut r = run_lemma8_audit(&spec, &pen, &cfg.solver, &seeds, &cfg.audit.alphas, exec)?;
                    if cfg.audit.rhs_scale != 1.0 {
                        r = rescale(r, cfg.audit.rhs_scale);
                    }
                    r
                };
                merged = Some(match merged {
                    None => rep,
                    Some(acc) => acc.merge(rep),
                });
            }
            let rep = merged.expect("at least one audit model");
            let mut csv = format!("{BOUND_CSV_HEADER}\n");
            for r in &rep.records {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            let failed: Vec<Value> = rep
                .records
                .iter()
                .filter(|r| !r.pass)
                .take(20)
                .map(|r| json!({"check": r.check, "instance": r.instance, "index": r.index, "lhs": r.lhs, "rhs": r.rhs}))
                .collect();
            let all_pass = rep.all_pass();
            Ok(Outcome {
                files: vec![("bound_audit.csv", csv)],
                summary: json!({
                    "checks": rep.records.len(),
                    "pass_rate": rep.pass_rate(),
                    "all_pass": all_pass,
                    "mode": format!("{:?}", rep.mode),
                    "note": rep.note,
                    "first_failures": failed,
                }),
                exit: if all_pass { 0 } else { EXIT_AUDIT },
            })
        }
        Command::AuditMoments => {
            let rep = audit_moments(&cfg.moment_audit(), exec)?;
            let mut csv = format!("{MOMENTS_CSV_HEADER}\n");
            for r in &rep.records {
                csv.push_str(&r.csv_row());
                csv.push('\n');
            }
            let all_pass = rep.all_pass();
            Ok(Outcome {
                files: vec![("moments.csv", csv)],
                summary: json!({
                    "checks": rep.records.len(),
                    "failed": rep.records.iter().filter(|r| !r.pass).count(),
                    "all_pass": all_pass,
                }),
                exit: if all_pass { 0 } else { EXIT_AUDIT },
            })
        }
        Command::Snr => {
            let spec = cfg.instance()?;
            let r = compute_snr(&spec, cfg.snr_samples, derive_seed(seed, &[0x5B]))?;
            Ok(Outcome {
                files: vec![],
                summary: json!({
                    "n": spec.n,
                    "p": spec.p,
                    "beta_scale": spec.beta_star.norm_squared() / spec.p as f64,
                    "signal_var": r.signal_var,
                    "mean_noise_var": r.mean_noise_var,
                    "mean_noise_var_se": r.mean_noise_var_se,
                    "snr": r.snr,
                    "snr_se": r.snr_se,
                }),
                exit: 0,
            })
        }
    }
}

/// Scales every right-hand side and recomputes pass flags.
fn rescale(mut rep: BoundAuditReport, scale: f64) -> BoundAuditReport {
    for r in rep.records.iter_mut().filter(|r| r.lhs.is_finite()) {
        r.rhs *= scale;
        r.pass = r.lhs <= r.rhs + r.slack;
    }
    rep
}

fn write_outputs(
    dir: &Path,
    cmd: Command,
    cfg: &Config,
    files: Vec<(&'static str, String)>,
    summary: Value,
    exit: u8,
) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, body) in &files {
        write_atomic(&dir.join(name), body.as_bytes())?;
    }
    let doc = json!({
        "command": cmd.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed(),
        "exit_code": exit,
        "files": files.iter().map(|(n, _)| *n).collect::<Vec<_>>(),
        "result": summary,
        "config": cfg.to_toml(),
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    write_atomic(&dir.join("summary.json"), text.as_bytes())
}

/// Temp file in the target directory, then rename over the destination.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
