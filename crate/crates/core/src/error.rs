use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid environment specification or run parameters.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate site {site}: {reason}")]
    DegenerateSite { site: i64, reason: String },

    /// A walk or path left the region in which the environment may be materialized.
    #[error("walk reached site {position}, outside the materializable window |x| <= {limit}")]
    WindowExhausted { position: i64, limit: i64 },

    #[error("singular system: {0}")]
    Singular(String),

    /// A depth-doubling computation did not stabilize before its maximum depth.
    #[error("{what} did not converge by depth {depth} (last change {last_change:e})")]
    Truncation { what: &'static str, depth: usize, last_change: f64 },

    /// A series whose terms failed to decay before the term cap.
    #[error("{what} diverges: {terms} terms, last term {last_term:e}, running sum {partial_sum:e}")]
    Divergence { what: &'static str, terms: usize, last_term: f64, partial_sum: f64 },

    #[error("infeasible coefficient at site {site}: denominator {denominator:e}")]
    InfeasibleCoefficient { site: i64, denominator: f64 },

    #[error("event count exceeded {events} before the horizon")]
    EventExplosion { events: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for the errors that signal a regime problem (recurrence, divergence)
    /// rather than bad input.
    pub fn is_numerical_divergence(&self) -> bool {
        matches!(self, Error::Truncation { .. } | Error::Divergence { .. } | Error::InfeasibleCoefficient { .. })
    }
}
