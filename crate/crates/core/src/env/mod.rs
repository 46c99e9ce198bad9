//! Environments for both models: site types, stationary ensembles with the
//! lattice shift, admissibility checks and CSV persistence.

mod conditions;
mod ensemble;
pub mod io;
mod site;

pub use conditions::{
    check_nonexplosion, embedded_jump_probs, nonexplosion_series, validate_condition_b, validate_condition_b_env, validate_condition_c,
    validate_condition_c_weak, ConditionReport, DivergenceReport, EmbeddedProbs, NonExplosionVerdict, Rule, Violation,
    DEFAULT_LOG_SLOPE_THRESHOLD,
};
pub use ensemble::{sample_environment, EnvSpec, EnvView, Environment, Mode, SiteCursor, DEFAULT_LIMIT};
pub use site::{default_truncation, RwreSiteLaw, Site, SiteRates};
