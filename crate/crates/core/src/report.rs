//! Serializable result types shared by the velocity estimators.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    McBdp,
    McRwre,
    Theorem51,
    Corollary,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::McBdp => "mc-bdp",
            Method::McRwre => "mc-rwre",
            Method::Theorem51 => "theorem51",
            Method::Corollary => "corollary",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VelocityVerdict {
    Estimated,
    /// A series or truncation failed to converge; the velocity is zero or
    /// undefined and `velocity` is absent.
    ZeroOrUndefined,
}

/// How the environment average was taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// One evaluation; the environment is homogeneous.
    Single,
    /// Exact average over the shifts of one period.
    PeriodAverage,
    /// Monte Carlo over independent environment draws.
    Sampled,
    /// A single fixed environment realization shared by every replica.
    Quenched,
}

/// Method-specific diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum VelocityDetails {
    Simulation {
        replicas: usize,
        /// Walk length (discrete time) or horizon (continuous time).
        horizon: f64,
        averaging: Averaging,
        /// Replicas whose run was cut short.
        truncations: usize,
    },
    Theorem51 {
        #[serde(rename = "D_mean")]
        d_mean: f64,
        #[serde(rename = "D_se")]
        d_se: f64,
        pi_mean: f64,
        /// Mean of `pi * (2 lambda^2 + lambda^1 - mu^1 - 2 mu^2)` at site 0.
        pi_drift_mean: f64,
        drift_mean: f64,
        /// Largest number of series terms used over all evaluations.
        k_used: usize,
        /// Largest relative size of the last retained series term.
        residuals: f64,
        env_samples: usize,
        averaging: Averaging,
        #[serde(skip_serializing_if = "Option::is_none")]
        failure: Option<String>,
    },
    Corollary {
        /// Environment mean of `sum_{i <= 0} pi_i`, i.e. of `E_omega(T)`.
        sum_pi_mean: f64,
        sum_pi_se: f64,
        depth: usize,
        residual: f64,
        samples: usize,
        averaging: Averaging,
        #[serde(skip_serializing_if = "Option::is_none")]
        failure: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VelocityReport {
    pub method: Method,
    pub verdict: VelocityVerdict,
    pub velocity: Option<f64>,
    /// Standard error; zero for exact single evaluations.
    pub se: Option<f64>,
    pub seed: u64,
    #[serde(flatten)]
    pub details: VelocityDetails,
    /// Per-replica or per-draw values behind the estimate.
    #[serde(skip)]
    pub samples: Vec<f64>,
}

impl VelocityReport {
    /// Distance to another report in units of the combined standard error.
    pub fn z_distance(&self, other: &VelocityReport) -> Option<f64> {
        let (a, b) = (self.velocity?, other.velocity?);
        let se = self.se.unwrap_or(0.0).hypot(other.se.unwrap_or(0.0));
        Some((a - b).abs() / se)
    }
}
