//! Companion matrices of the birth-death environment, Lyapunov spectra of
//! their products, and the recurrence/transience verdict read off `gamma_R`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::env::{Environment, SiteRates};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{Estimate, Z99};

pub const DEFAULT_BURN_IN: usize = 1_000;
pub const DEFAULT_BATCHES: usize = 50;
/// Exponents within this distance of zero are not resolved from zero.
pub const RESOLUTION: f64 = 1e-3;

/// `(L+R-1)`-square matrix with ones on the superdiagonal and last row
/// `b(1), ..., b(L+R-1)`, where `b(k) = sum_{j=R-k+1}^R lambda^j / mu^L` for
/// `k <= R` and `b(k) = -sum_{j=k-R}^L mu^j / mu^L` above.
pub fn build_a(site: &SiteRates) -> Result<DMatrix<f64>> {
    let (l, r) = (site.l(), site.r());
    let mu_l = site.mu(l);
    if !(mu_l > 0.0) {
        return Err(Error::Singular(format!("mu^{l} = {mu_l} cannot normalize the companion row")));
    }
    let n = l + r - 1;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n - 1 {
        a[(i, i + 1)] = 1.0;
    }
    for k in 1..=n {
        let b = if k <= r {
            (r - k + 1..=r).map(|j| site.lambda(j)).sum::<f64>() / mu_l
        } else {
            -(k - r..=l).map(|j| site.mu(j)).sum::<f64>() / mu_l
        };
        a[(n - 1, k - 1)] = b;
    }
    Ok(a)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyapunovSpectrum {
    /// `gamma_1 <= ... <= gamma_d`.
    pub gammas: Vec<f64>,
    pub ses: Vec<f64>,
    pub n: usize,
    pub burn_in: usize,
}

impl LyapunovSpectrum {
    /// Spectrum from per-batch sums of `ln |R_ii|`; `batch_len` products per batch.
    pub fn from_batches(batch_sums: &[Vec<f64>], batch_len: usize, burn_in: usize) -> Self {
        let dim = batch_sums.first().map_or(0, Vec::len);
        let mut pairs: Vec<(f64, f64)> = (0..dim)
            .map(|i| {
                let means: Vec<f64> = batch_sums.iter().map(|b| b[i] / batch_len as f64).collect();
                let e = Estimate::from_samples(&means);
                (e.mean, if e.se.is_finite() { e.se } else { 0.0 })
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        LyapunovSpectrum {
            gammas: pairs.iter().map(|p| p.0).collect(),
            ses: pairs.iter().map(|p| p.1).collect(),
            n: batch_sums.len() * batch_len,
            burn_in,
        }
    }
}

/// Lyapunov spectrum of `A_n ... A_1` for a matrix sequence, by re-orthonormalizing
/// every step: `A_k Q_{k-1} = Q_k R_k` and `gamma_i` is the average of `ln |R_k[i,i]|`.
/// The first `burn_in` factors only align the frame; the next `n_products` are
/// measured, in `batches` consecutive batches.
pub fn spectrum_of_product<I>(
    dim: usize,
    mut matrices: I,
    n_products: usize,
    burn_in: usize,
    batches: usize,
    seed: u64,
) -> Result<LyapunovSpectrum>
where
    I: Iterator<Item = Result<DMatrix<f64>>>,
{
    let batches = batches.max(2);
    if n_products < batches {
        return Err(Error::config(format!("need at least {batches} measured products")));
    }
    let mut frame_rng = rng::stream(seed, 0);
    let start = DMatrix::from_fn(dim, dim, |_, _| frame_rng.random::<f64>() - 0.5);
    let mut q = start.qr().q();
    let mut step = |q: &DMatrix<f64>| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let a = matrices.next().ok_or_else(|| Error::config("matrix sequence ended early"))??;
        let qr = (a * q).qr();
        Ok((qr.q(), qr.r()))
    };
    for _ in 0..burn_in {
        q = step(&q)?.0;
    }
    let batch_len = n_products / batches;
    let mut sums = Vec::with_capacity(batches);
    for _ in 0..batches {
        let mut acc = vec![0.0; dim];
        for _ in 0..batch_len {
            let (nq, r) = step(&q)?;
            for (i, s) in acc.iter_mut().enumerate() {
                *s += r[(i, i)].abs().ln();
            }
            q = nq;
        }
        sums.push(acc);
    }
    Ok(LyapunovSpectrum::from_batches(&sums, batch_len, burn_in))
}

/// Spectrum of `A_{burn_in + n} ... A_1` along sites `1, 2, ...` of `env`.
pub fn lyapunov_spectrum(env: &Environment<SiteRates>, n_products: usize, burn_in: usize, seed: u64) -> Result<LyapunovSpectrum> {
    if n_products < burn_in + 100 {
        return Err(Error::config("n_products must be at least burn_in + 100"));
    }
    let site1 = env.site(1)?;
    let dim = site1.l() + site1.r() - 1;
    let total = (n_products + burn_in) as i64;
    let view = env.view(1, total)?;
    let matrices = (1..=total).map(|x| build_a(view.get(x).expect("materialized")));
    spectrum_of_product(dim, matrices, n_products, burn_in, DEFAULT_BATCHES, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    TransientRight,
    Recurrent,
    TransientLeft,
    BoundaryUndetermined,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Classification {
    pub verdict: Verdict,
    /// Index `R` of the deciding exponent in the ascending spectrum.
    pub index: usize,
    pub gamma_r: f64,
    /// 99% interval for `gamma_R`.
    pub ci: (f64, f64),
}

/// Verdict from an interval for `gamma_R`. Intervals clear of
/// `[-RESOLUTION, RESOLUTION]` decide the direction, intervals inside it read
/// as zero, and anything else straddles the boundary.
pub fn classify_interval(lo: f64, hi: f64) -> Verdict {
    if lo > RESOLUTION {
        Verdict::TransientRight
    } else if hi < -RESOLUTION {
        Verdict::TransientLeft
    } else if lo >= -RESOLUTION && hi <= RESOLUTION {
        Verdict::Recurrent
    } else {
        Verdict::BoundaryUndetermined
    }
}

pub fn classify(spectrum: &LyapunovSpectrum, r: usize) -> Result<Classification> {
    if r == 0 || spectrum.gammas.len() < r {
        return Err(Error::config(format!("spectrum has {} exponents, need gamma_{r}", spectrum.gammas.len())));
    }
    let (g, se) = (spectrum.gammas[r - 1], spectrum.ses[r - 1]);
    let ci = (g - Z99 * se, g + Z99 * se);
    Ok(Classification { verdict: classify_interval(ci.0, ci.1), index: r, gamma_r: g, ci })
}
