use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Per-site data an environment can be built from.
pub trait Site: Clone + fmt::Debug + PartialEq + Send + Sync + 'static {
    /// Checks the type invariants of one site.
    fn check(&self, site: i64) -> Result<()>;

    /// A random site of the same shape whose parameters are i.i.d. uniform on
    /// `[low, high]`. `None` when the site kind has no such family.
    fn uniform_like(&self, _low: f64, _high: f64, _rng: &mut StreamRng) -> Option<Self> {
        None
    }

    /// The site with every rate multiplied by `factor`, if meaningful.
    fn scaled(&self, _factor: f64) -> Option<Self> {
        None
    }
}

/// Jump rates of one birth-death site: `mu[l - 1]` is the rate of a jump of
/// `-l`, `lambda[r - 1]` the rate of a jump of `+r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRates {
    mu: Vec<f64>,
    lambda: Vec<f64>,
}

impl SiteRates {
    pub fn new(mu: Vec<f64>, lambda: Vec<f64>) -> Result<Self> {
        let site = SiteRates { mu, lambda };
        site.check(0)?;
        Ok(site)
    }

    /// Builds a site from rates listed as `(mu^L, ..., mu^1, lambda^1, ..., lambda^R)`.
    pub fn from_ordered(l: usize, r: usize, values: &[f64]) -> Result<Self> {
        if values.len() != l + r {
            return Err(Error::config(format!("expected {} rates for L={l}, R={r}, got {}", l + r, values.len())));
        }
        let mu = values[..l].iter().rev().copied().collect();
        let lambda = values[l..].to_vec();
        Self::new(mu, lambda)
    }

    /// Rates as `(mu^L, ..., mu^1, lambda^1, ..., lambda^R)`.
    pub fn ordered(&self) -> Vec<f64> {
        self.mu.iter().rev().chain(self.lambda.iter()).copied().collect()
    }

    /// Maximal left jump.
    pub fn l(&self) -> usize {
        self.mu.len()
    }

    /// Maximal right jump.
    pub fn r(&self) -> usize {
        self.lambda.len()
    }

    /// `mu^l`, 1-based.
    pub fn mu(&self, l: usize) -> f64 {
        self.mu[l - 1]
    }

    /// `lambda^r`, 1-based.
    pub fn lambda(&self, r: usize) -> f64 {
        self.lambda[r - 1]
    }

    pub fn mus(&self) -> &[f64] {
        &self.mu
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    /// Holding rate `sum mu + sum lambda`.
    pub fn total_rate(&self) -> f64 {
        self.mu.iter().sum::<f64>() + self.lambda.iter().sum::<f64>()
    }

    /// Mean displacement per unit time, `sum r lambda^r - sum l mu^l`.
    pub fn drift(&self) -> f64 {
        let up: f64 = self.lambda.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
        let down: f64 = self.mu.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
        up - down
    }

    /// Maps `u` uniform on `[0, total_rate)` to a jump offset.
    #[inline]
    pub fn jump_for(&self, u: f64) -> i64 {
        let mut acc = 0.0;
        for (i, v) in self.lambda.iter().enumerate() {
            acc += v;
            if u < acc {
                return i as i64 + 1;
            }
        }
        for (i, v) in self.mu.iter().enumerate() {
            acc += v;
            if u < acc {
                return -(i as i64 + 1);
            }
        }
        // u landed on the rounding gap at the top; take the last positive-rate jump
        if let Some(i) = self.mu.iter().rposition(|&v| v > 0.0) {
            -(i as i64 + 1)
        } else {
            self.lambda.iter().rposition(|&v| v > 0.0).map_or(1, |i| i as i64 + 1)
        }
    }

    /// The same site seen from the mirror image `x -> -x`.
    pub fn mirrored(&self) -> SiteRates {
        SiteRates { mu: self.lambda.clone(), lambda: self.mu.clone() }
    }
}

impl Site for SiteRates {
    fn check(&self, site: i64) -> Result<()> {
        if self.mu.is_empty() || self.lambda.is_empty() {
            return Err(Error::config("L and R must be at least 1"));
        }
        if let Some(v) = self.mu.iter().chain(&self.lambda).find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::DegenerateSite { site, reason: format!("invalid rate {v}") });
        }
        if self.total_rate() <= 0.0 {
            return Err(Error::DegenerateSite { site, reason: "zero total rate".into() });
        }
        Ok(())
    }

    fn uniform_like(&self, low: f64, high: f64, rng: &mut StreamRng) -> Option<Self> {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(low..=high)).collect() };
        let mu = draw(self.l());
        let lambda = draw(self.r());
        Some(SiteRates { mu, lambda })
    }

    fn scaled(&self, factor: f64) -> Option<Self> {
        Some(SiteRates { mu: self.mu.iter().map(|v| v * factor).collect(), lambda: self.lambda.iter().map(|v| v * factor).collect() })
    }
}

/// Jump distribution of one site of a discrete-time walk, on a finite
/// support sorted by offset.
#[derive(Clone, Debug, PartialEq)]
pub struct RwreSiteLaw {
    offsets: Vec<i64>,
    probs: Vec<f64>,
    cdf: Vec<f64>,
    truncation: Option<i64>,
}

const NORMALIZATION_TOL: f64 = 1e-9;

impl RwreSiteLaw {
    /// Law from `(offset, probability)` pairs. Repeated offsets are merged,
    /// zero-probability entries dropped.
    pub fn new(pairs: impl IntoIterator<Item = (i64, f64)>) -> Result<Self> {
        let mut pairs: Vec<(i64, f64)> = pairs.into_iter().collect();
        pairs.sort_by_key(|p| p.0);
        let mut offsets = Vec::with_capacity(pairs.len());
        let mut probs: Vec<f64> = Vec::with_capacity(pairs.len());
        for (j, p) in pairs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::config(format!("invalid probability {p} at offset {j}")));
            }
            if p == 0.0 {
                continue;
            }
            if offsets.last() == Some(&j) {
                *probs.last_mut().unwrap() += p;
            } else {
                offsets.push(j);
                probs.push(p);
            }
        }
        let law = RwreSiteLaw { cdf: Vec::new(), offsets, probs, truncation: None };
        law.check(0)?;
        Ok(law.with_cdf())
    }

    /// Finite-support version of an unbounded law `pmf` on `[-j_max, j_max]`.
    /// The mass outside is folded onto `-j_max` and `+j_max` in proportion to
    /// the left and right tail masses.
    pub fn folded(pmf: impl Fn(i64) -> f64, j_max: i64) -> Result<Self> {
        if j_max < 1 {
            return Err(Error::config("truncation radius must be >= 1"));
        }
        let mut pairs: Vec<(i64, f64)> = (-j_max..=j_max).map(|j| (j, pmf(j))).collect();
        let inside: f64 = pairs.iter().map(|p| p.1).sum();
        let missing = 1.0 - inside;
        if missing < -NORMALIZATION_TOL {
            return Err(Error::config(format!("pmf mass {inside} exceeds 1 on [-J, J]")));
        }
        if missing > 0.0 {
            let tail = |sign: i64| -> f64 {
                let mut s = 0.0;
                for k in (j_max + 1)..=(j_max.saturating_mul(64)).max(j_max + 1_000) {
                    let v = pmf(sign * k);
                    s += v;
                    if v < 1e-20 * s.max(1e-300) && k > 2 * j_max {
                        break;
                    }
                }
                s
            };
            let (left, right) = (tail(-1), tail(1));
            let (wl, wr) = if left + right > 0.0 { (left / (left + right), right / (left + right)) } else { (0.5, 0.5) };
            pairs[0].1 += missing * wl;
            pairs.last_mut().unwrap().1 += missing * wr;
        }
        let mut law = Self::new(pairs)?;
        law.truncation = Some(j_max);
        Ok(law)
    }

    fn with_cdf(mut self) -> Self {
        let mut acc = 0.0;
        self.cdf = self
            .probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        if let Some(last) = self.cdf.last_mut() {
            *last = f64::INFINITY;
        }
        self
    }

    /// `omega_{0j}`; zero off the support.
    pub fn prob(&self, j: i64) -> f64 {
        self.offsets.binary_search(&j).map_or(0.0, |i| self.probs[i])
    }

    pub fn support(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.offsets.iter().copied().zip(self.probs.iter().copied())
    }

    /// Local drift `sum_j j omega_{0j}`.
    pub fn drift(&self) -> f64 {
        self.support().map(|(j, p)| j as f64 * p).sum()
    }

    pub fn max_left(&self) -> i64 {
        (-self.offsets.first().copied().unwrap_or(0)).max(0)
    }

    pub fn max_right(&self) -> i64 {
        self.offsets.last().copied().unwrap_or(0).max(0)
    }

    /// Truncation radius for laws built with [`RwreSiteLaw::folded`].
    pub fn truncation(&self) -> Option<i64> {
        self.truncation
    }

    /// Maps `u` uniform on `[0, 1)` to an offset.
    #[inline]
    pub fn jump_for(&self, u: f64) -> i64 {
        let i = self.cdf.partition_point(|&c| c <= u);
        self.offsets[i.min(self.offsets.len() - 1)]
    }
}

impl Site for RwreSiteLaw {
    fn check(&self, site: i64) -> Result<()> {
        if self.offsets.is_empty() {
            return Err(Error::DegenerateSite { site, reason: "empty jump law".into() });
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::DegenerateSite { site, reason: format!("probabilities sum to {total}") });
        }
        Ok(())
    }
}

/// Smallest truncation radius `J` for which the drift error of folding a law
/// with tail bound `D |j|^-(3 + eps0)` is below `tol`, using
/// `sum_{|j| > J} |j| D |j|^-(3+eps0) <= 2 D J^-(1+eps0) / (1 + eps0)`.
pub fn default_truncation(d: f64, eps0: f64, tol: f64) -> i64 {
    let j = (2.0 * d / ((1.0 + eps0) * tol)).powf(1.0 / (1.0 + eps0));
    j.ceil().max(1.0) as i64
}
