//! Small statistics helpers: running moments, batch means, ratio estimators
//! and compensated summation.

use serde::{Deserialize, Serialize};

/// Mean and standard error of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    /// Mean with the usual `sd / sqrt(n)` standard error. A single sample has
    /// an undefined error, reported as NaN.
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate { mean: f64::NAN, se: f64::NAN, n };
        }
        let mean = neumaier_sum(xs.iter().copied()) / n as f64;
        if n == 1 {
            return Estimate { mean, se: f64::NAN, n };
        }
        let ss = neumaier_sum(xs.iter().map(|x| (x - mean) * (x - mean)));
        let var = ss / (n - 1) as f64;
        Estimate { mean, se: (var / n as f64).sqrt(), n }
    }

    /// Distance between two independent estimates in units of their combined SE.
    pub fn z_distance(&self, other: &Estimate) -> f64 {
        (self.mean - other.mean).abs() / self.se.hypot(other.se)
    }
}

/// Batch-means estimate of the mean of a correlated series. Trailing samples
/// that do not fill a batch are dropped.
pub fn batch_means(xs: &[f64], batches: usize) -> Estimate {
    let batches = batches.max(2);
    let size = xs.len() / batches;
    if size == 0 {
        return Estimate::from_samples(xs);
    }
    let means: Vec<f64> = xs.chunks_exact(size).take(batches).map(|c| neumaier_sum(c.iter().copied()) / size as f64).collect();
    Estimate::from_samples(&means)
}

/// Ratio of means `mean(a) / mean(b)` over paired samples with a delta-method
/// standard error.
pub fn ratio_of_means(a: &[f64], b: &[f64]) -> Estimate {
    assert_eq!(a.len(), b.len(), "paired samples required");
    let n = a.len();
    let ea = Estimate::from_samples(a);
    let eb = Estimate::from_samples(b);
    let r = ea.mean / eb.mean;
    if n < 2 {
        return Estimate { mean: r, se: f64::NAN, n };
    }
    let resid: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - r * y).collect();
    let er = Estimate::from_samples(&resid);
    Estimate { mean: r, se: er.se / eb.mean.abs(), n }
}

/// Neumaier's compensated sum.
pub fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = CompensatedSum::default();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Least-squares slope of `y` against `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Two-sided normal quantile used for 99% intervals.
pub const Z99: f64 = 2.575_829_303_548_901;
