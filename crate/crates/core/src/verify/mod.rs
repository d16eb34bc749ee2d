//! Experiment drivers and bound audits built on top of the solver and risk layers.

mod audit;
mod moments;
mod rate;

pub use audit::{
    audit_lemma4, audit_lemma8, run_lemma4_audit, run_lemma8_audit, solver_slack, AuditMode, BoundAuditReport,
    BoundRecord, BOUND_CSV_HEADER,
};
pub use moments::{audit_moments, eighth_moment_check, MomentAudit, MomentRecord, MomentReport, MOMENTS_CSV_HEADER};
pub use rate::{risk_replicate, run_rate_experiment, RateExperiment, RateReport, RateRow};
