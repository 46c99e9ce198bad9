//! Admissibility checks for environments: uniform ellipticity for the
//! birth-death model, the step and tail conditions for walks with unbounded
//! jumps, and a numerical non-explosion diagnostic.

use serde::Serialize;

use super::ensemble::Environment;
use super::site::{RwreSiteLaw, SiteRates};
use crate::error::{Error, Result};
use crate::stats::ols_slope;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// A rate is not strictly above epsilon.
    EllipticLower,
    /// A rate is not strictly below M.
    EllipticUpper,
    /// `lambda^1` is not strictly above kappa (weak ellipticity).
    WeakRightRate,
    /// Total rate is not strictly below K (weak ellipticity).
    WeakTotalRate,
    /// `omega_{01}` is not strictly above epsilon.
    RightStep,
    /// `omega_{0j}` is not strictly below `D |j|^-(3 + eps0)`.
    TailBound,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub site: i64,
    pub rule: Rule,
    /// Which rate (`mu1`, `lambda2`, ...) or offset (`j=-10`) failed.
    pub component: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConditionReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl ConditionReport {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        ConditionReport { passed: violations.is_empty(), violations }
    }

    pub fn merge(mut self, other: ConditionReport) -> Self {
        self.violations.extend(other.violations);
        self.passed = self.violations.is_empty();
        self
    }
}

fn rate_components(site: &SiteRates) -> impl Iterator<Item = (String, f64)> + '_ {
    let mus = site.mus().iter().enumerate().map(|(i, v)| (format!("mu{}", i + 1), *v));
    let lambdas = site.lambdas().iter().enumerate().map(|(i, v)| (format!("lambda{}", i + 1), *v));
    mus.chain(lambdas)
}

/// Uniform ellipticity: every rate of every site in `[a, b]` lies strictly
/// inside `(epsilon, m)`.
pub fn validate_condition_c(env: &Environment<SiteRates>, epsilon: f64, m: f64, window: (i64, i64)) -> Result<ConditionReport> {
    if !(epsilon < m) {
        return Err(Error::config(format!("ellipticity bounds need epsilon < M, got ({epsilon}, {m})")));
    }
    let view = env.view(window.0, window.1)?;
    let mut violations = Vec::new();
    for x in window.0..=window.1 {
        let site = view.get(x).expect("materialized");
        for (component, value) in rate_components(site) {
            if !(value > epsilon) {
                violations.push(Violation { site: x, rule: Rule::EllipticLower, component: component.clone(), value });
            }
            if !(value < m) {
                violations.push(Violation { site: x, rule: Rule::EllipticUpper, component, value });
            }
        }
    }
    Ok(ConditionReport::from_violations(violations))
}

/// Weak ellipticity: `lambda^1 > kappa` and total rate `< big_k` on `[a, b]`.
/// Enough for simulation, which needs no lower bound on the other rates.
pub fn validate_condition_c_weak(env: &Environment<SiteRates>, kappa: f64, big_k: f64, window: (i64, i64)) -> Result<ConditionReport> {
    let view = env.view(window.0, window.1)?;
    let mut violations = Vec::new();
    for x in window.0..=window.1 {
        let site = view.get(x).expect("materialized");
        if !(site.lambda(1) > kappa) {
            violations.push(Violation { site: x, rule: Rule::WeakRightRate, component: "lambda1".into(), value: site.lambda(1) });
        }
        let total = site.total_rate();
        if !(total < big_k) {
            violations.push(Violation { site: x, rule: Rule::WeakTotalRate, component: "total".into(), value: total });
        }
    }
    Ok(ConditionReport::from_violations(violations))
}

/// Step condition `omega_{01} > epsilon` and polynomial tail
/// `omega_{0j} < D |j|^-(3 + eps0)` for one site law.
pub fn validate_condition_b(law: &RwreSiteLaw, epsilon: f64, d: f64, eps0: f64) -> ConditionReport {
    validate_condition_b_at(law, 0, epsilon, d, eps0)
}

fn validate_condition_b_at(law: &RwreSiteLaw, site: i64, epsilon: f64, d: f64, eps0: f64) -> ConditionReport {
    let mut violations = Vec::new();
    let step = law.prob(1);
    if !(step > epsilon) {
        violations.push(Violation { site, rule: Rule::RightStep, component: "j=1".into(), value: step });
    }
    for (j, p) in law.support().filter(|(j, _)| *j != 0) {
        let bound = d * (j.unsigned_abs() as f64).powf(-(3.0 + eps0));
        if !(p < bound) {
            violations.push(Violation { site, rule: Rule::TailBound, component: format!("j={j}"), value: p });
        }
    }
    ConditionReport::from_violations(violations)
}

/// [`validate_condition_b`] at every site of `[a, b]`.
pub fn validate_condition_b_env(
    env: &Environment<RwreSiteLaw>,
    epsilon: f64,
    d: f64,
    eps0: f64,
    window: (i64, i64),
) -> Result<ConditionReport> {
    let view = env.view(window.0, window.1)?;
    Ok((window.0..=window.1).fold(ConditionReport::from_violations(Vec::new()), |acc, x| {
        acc.merge(validate_condition_b_at(view.get(x).expect("materialized"), x, epsilon, d, eps0))
    }))
}

/// One-step jump probabilities of the embedded chain at a site.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedProbs {
    /// `p^r = lambda^r / q`, r = 1..R.
    pub up: Vec<f64>,
    /// `q^l = mu^l / q`, l = 1..L.
    pub down: Vec<f64>,
}

impl EmbeddedProbs {
    pub fn total(&self) -> f64 {
        self.up.iter().chain(&self.down).sum()
    }
}

pub fn embedded_jump_probs(site: &SiteRates) -> EmbeddedProbs {
    let q = site.total_rate();
    EmbeddedProbs { up: site.lambdas().iter().map(|v| v / q).collect(), down: site.mus().iter().map(|v| v / q).collect() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NonExplosionVerdict {
    DivergenceConsistent,
    DivergenceNotObserved,
}

/// Partial sums of the reciprocal-rate series whose divergence rules out
/// explosion. A numerical diagnostic only.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceReport {
    /// `sum_{n=1}^{N} 1 / max_{1<=k<=R} q(nR - k)` for N = 1, 2, ...
    pub right_partial_sums: Vec<f64>,
    /// `sum_{n=0}^{-(N-1)} 1 / max_{1<=k<=L} q(nL - k)` for N = 1, 2, ...
    pub left_partial_sums: Vec<f64>,
    /// Fitted growth of the partial sums against `ln n` over the last part of the range.
    pub right_log_slope: f64,
    pub left_log_slope: f64,
    pub threshold: f64,
    pub verdict: NonExplosionVerdict,
}

/// Slope threshold above which partial sums count as growing.
pub const DEFAULT_LOG_SLOPE_THRESHOLD: f64 = 0.1;

/// Non-explosion series from a total-rate field `q(x)`.
pub fn nonexplosion_series(total_rate: impl Fn(i64) -> f64, l: usize, r: usize, depth: usize, threshold: f64) -> DivergenceReport {
    let (l, r) = (l as i64, r as i64);
    let mut acc = 0.0;
    let right: Vec<f64> = (1..=depth as i64)
        .map(|n| {
            let max = (1..=r).map(|k| total_rate(n * r - k)).fold(f64::MIN, f64::max);
            acc += 1.0 / max;
            acc
        })
        .collect();
    let mut acc = 0.0;
    let left: Vec<f64> = (0..depth as i64)
        .map(|m| {
            let n = -m;
            let max = (1..=l).map(|k| total_rate(n * l - k)).fold(f64::MIN, f64::max);
            acc += 1.0 / max;
            acc
        })
        .collect();
    let slope = |sums: &[f64]| -> f64 {
        let start = (sums.len() / 10).max(1);
        if sums.len() < start + 2 {
            return f64::NAN;
        }
        let xs: Vec<f64> = (start..=sums.len()).map(|n| (n as f64).ln()).collect();
        ols_slope(&xs, &sums[start - 1..])
    };
    let (rs, ls) = (slope(&right), slope(&left));
    let verdict = if rs >= threshold && ls >= threshold {
        NonExplosionVerdict::DivergenceConsistent
    } else {
        NonExplosionVerdict::DivergenceNotObserved
    };
    DivergenceReport { right_partial_sums: right, left_partial_sums: left, right_log_slope: rs, left_log_slope: ls, threshold, verdict }
}

/// [`nonexplosion_series`] on a realized environment, to depth `n`.
pub fn check_nonexplosion(env: &Environment<SiteRates>, n: usize) -> Result<DivergenceReport> {
    if n == 0 {
        return Err(Error::config("non-explosion depth must be >= 1"));
    }
    let site0 = env.site(0)?;
    let (l, r) = (site0.l(), site0.r());
    let lo = -(n as i64) * l as i64 - l as i64;
    let hi = n as i64 * r as i64;
    let view = env.view(lo, hi)?;
    Ok(nonexplosion_series(|x| view.get(x).expect("materialized").total_rate(), l, r, n, DEFAULT_LOG_SLOPE_THRESHOLD))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_environment, EnvSpec, Mode};

    fn rates(v: [f64; 4]) -> SiteRates {
        SiteRates::from_ordered(2, 2, &v).unwrap()
    }

    #[test]
    fn condition_c_containment() {
        let spec = EnvSpec::new(Mode::IidUniform { template: rates([1.0; 4]), low: 0.5, high: 3.0 }).unwrap();
        let env = sample_environment(&spec, 1, (-20, 20)).unwrap();
        assert!(validate_condition_c(&env, 0.4, 4.0, (-20, 20)).unwrap().passed);
    }

    #[test]
    fn condition_c_flags_low_rate() {
        let spec = EnvSpec::new(Mode::Explicit {
            first: 0,
            sites: vec![rates([1.0, 1.0, 1.0, 2.0]), rates([1.0, 0.3, 1.0, 2.0]), rates([1.0, 1.0, 1.0, 2.0])],
        })
        .unwrap();
        let env = sample_environment(&spec, 0, (0, 2)).unwrap();
        let report = validate_condition_c(&env, 0.4, 4.0, (0, 2)).unwrap();
        assert!(!report.passed);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].site, 1);
        assert_eq!(report.violations[0].component, "mu1");
        assert_eq!(report.violations[0].rule, Rule::EllipticLower);
    }

    #[test]
    fn condition_c_is_strict() {
        let env = sample_environment(&EnvSpec::homogeneous(rates([1.0, 1.0, 1.0, 2.0])), 0, (0, 0)).unwrap();
        let report = validate_condition_c(&env, 1.0, 3.0, (0, 0)).unwrap();
        assert!(!report.passed);
        assert!(report.violations.iter().any(|v| v.component == "mu1"));
        assert!(validate_condition_c(&env, 3.0, 1.0, (0, 0)).is_err());
    }

    #[test]
    fn weak_condition_allows_zero_rates() {
        let env = sample_environment(&EnvSpec::homogeneous(rates([0.0, 1.0, 1.0, 0.0])), 0, (0, 0)).unwrap();
        assert!(validate_condition_c_weak(&env, 0.5, 3.0, (0, 0)).unwrap().passed);
        assert!(!validate_condition_c(&env, 0.1, 3.0, (0, 0)).unwrap().passed);
    }

    #[test]
    fn condition_b_examples() {
        let law = RwreSiteLaw::new([(1, 0.7), (-1, 0.3)]).unwrap();
        assert!(validate_condition_b(&law, 0.5, 1.0, 0.1).passed);

        // 10^-3.1 = 0.000794 < 0.01
        let heavy = RwreSiteLaw::new([(1, 0.69), (-1, 0.3), (-10, 0.01)]).unwrap();
        let r = validate_condition_b(&heavy, 0.5, 1.0, 0.1);
        assert!(!r.passed);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].rule, Rule::TailBound);
        assert_eq!(r.violations[0].component, "j=-10");
        let bound = 10f64.powf(-3.1);
        assert!((bound - 0.000_794_3).abs() < 1e-7);

        let weak_step = RwreSiteLaw::new([(1, 0.4), (-1, 0.6)]).unwrap();
        let r = validate_condition_b(&weak_step, 0.5, 1.0, 0.1);
        assert_eq!(r.violations[0].rule, Rule::RightStep);
    }

    #[test]
    fn embedded_probabilities() {
        let p = embedded_jump_probs(&rates([1.0, 1.0, 1.0, 2.0]));
        assert_eq!(p.up, vec![0.2, 0.4]);
        assert_eq!(p.down, vec![0.2, 0.2]);
        let p = embedded_jump_probs(&rates([0.0, 1.0, 1.0, 0.0]));
        assert_eq!(p.up, vec![0.5, 0.0]);
        assert_eq!(p.down, vec![0.5, 0.0]);
    }

    #[test]
    fn nonexplosion_homogeneous_arithmetic() {
        let env = sample_environment(&EnvSpec::homogeneous(rates([1.0, 1.0, 1.0, 2.0])), 0, (0, 0)).unwrap();
        let report = check_nonexplosion(&env, 100).unwrap();
        assert!((report.right_partial_sums[99] - 20.0).abs() < 1e-12);
        assert!((report.left_partial_sums[99] - 20.0).abs() < 1e-12);
        assert_eq!(report.verdict, NonExplosionVerdict::DivergenceConsistent);
    }

    #[test]
    fn nonexplosion_bounded_rates_grow_linearly() {
        let spec = EnvSpec::new(Mode::IidUniform { template: rates([1.0; 4]), low: 0.5, high: 3.0 }).unwrap();
        let env = sample_environment(&spec, 4, (0, 0)).unwrap();
        let report = check_nonexplosion(&env, 1000).unwrap();
        let m = 3.0;
        assert!(report.right_partial_sums[999] >= 1000.0 / (4.0 * m));
        assert!(report.left_partial_sums[999] >= 1000.0 / (4.0 * m));
        assert_eq!(report.verdict, NonExplosionVerdict::DivergenceConsistent);
    }

    #[test]
    fn nonexplosion_quadratic_rates_converge() {
        let spec = EnvSpec::new(Mode::Growing { base: rates([1.0; 4]), exponent: 2.0 }).unwrap();
        let env = sample_environment(&spec, 0, (0, 0)).unwrap();
        let report = check_nonexplosion(&env, 1000).unwrap();
        assert_eq!(report.verdict, NonExplosionVerdict::DivergenceNotObserved);
        // bounded by the convergent sum of 1/(4 (1+n)^2) over both halves
        assert!(report.right_partial_sums[999] < 0.25 * std::f64::consts::PI.powi(2) / 6.0);
    }
}
