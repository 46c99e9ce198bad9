//! Exact velocity machinery for `L = R = 2`: exit probabilities of the
//! embedded chain, half-line hitting probabilities `f`, the alpha/beta/gamma
//! coefficients with the 9-type mean matrices `Q_i`, and the series `D` and
//! `pi` whose environment averages give the velocity.

use std::collections::HashMap;

use nalgebra::{Matrix3, SMatrix, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::env::{embedded_jump_probs, EmbeddedProbs, EnvSpec, EnvView, Environment, Mode, SiteRates};
use crate::error::{Error, Result};
use crate::linalg::BandMatrix;
use crate::report::{Averaging, Method, VelocityDetails, VelocityReport, VelocityVerdict};
use crate::rng::{self, tag};
use crate::stats::{ratio_of_means, Estimate};

pub const START_DEPTH: usize = 32;
pub const MAX_DEPTH: usize = 1 << 16;
/// Deepest truncation at which the transfer route is also run as a check.
pub const TRANSFER_CHECK_DEPTH: usize = 1024;
pub const DEFAULT_K_MAX: usize = 10_000;

pub const V1: [f64; 9] = [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
pub const V2: [f64; 9] = [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0];

fn two_by_two(site: &SiteRates, x: i64) -> Result<EmbeddedProbs> {
    if site.l() != 2 || site.r() != 2 {
        return Err(Error::config(format!("site {x} has L = {}, R = {}; this engine needs L = R = 2", site.l(), site.r())));
    }
    Ok(embedded_jump_probs(site))
}

/// Exit distribution of the embedded chain from one start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ExitProbs {
    pub at_b: f64,
    pub at_b1: f64,
    pub at_a: f64,
    pub at_a1: f64,
}

impl ExitProbs {
    pub fn total(&self) -> f64 {
        self.at_b + self.at_b1 + self.at_a + self.at_a1
    }

    fn max_diff(&self, o: &ExitProbs) -> f64 {
        [self.at_b - o.at_b, self.at_b1 - o.at_b1, self.at_a - o.at_a, self.at_a1 - o.at_a1].iter().fold(0.0, |m, d| m.max(d.abs()))
    }
}

fn check_interval(a: i64, b: i64) -> Result<()> {
    if b - a < 2 {
        return Err(Error::config(format!("interval [{a}, {b}] has no interior")));
    }
    Ok(())
}

/// Exit distributions from every start in `a+1..=b-1` by an absorbing-chain
/// linear solve. Entry `k - a - 1` belongs to start `k`.
pub fn exit_probs_all(env: &Environment<SiteRates>, a: i64, b: i64) -> Result<Vec<ExitProbs>> {
    check_interval(a, b)?;
    let view = env.view(a + 1, b - 1)?;
    let n = (b - a - 1) as usize;
    let mut m = BandMatrix::zeros(n, 2, 2);
    // right-hand sides for exits at b, b+1, a, a-1
    let mut rhs = vec![vec![0.0; n]; 4];
    let boundary = |y: i64| -> Option<usize> {
        match y - b {
            0 => Some(0),
            1 => Some(1),
            _ => match a - y {
                0 => Some(2),
                1 => Some(3),
                _ => None,
            },
        }
    };
    for (row, k) in (a + 1..b).enumerate() {
        let p = two_by_two(view.get(k).expect("materialized"), k)?;
        m.add(row, row, 1.0);
        for (off, prob) in [(1, p.up[0]), (2, p.up[1]), (-1, p.down[0]), (-2, p.down[1])] {
            let y = k + off;
            if y > a && y < b {
                m.add(row, (y - a - 1) as usize, -prob);
            } else if let Some(col) = boundary(y) {
                rhs[col][row] += prob;
            }
        }
    }
    let sol = m.solve_many(&rhs)?;
    Ok((0..n).map(|i| ExitProbs { at_b: sol[0][i], at_b1: sol[1][i], at_a: sol[2][i], at_a1: sol[3][i] }).collect())
}

/// Exit distribution from `start` over `{b, b+1, a, a-1}` for the chain
/// confined to `[a+1, b-1]`.
pub fn exit_probs_finite(env: &Environment<SiteRates>, a: i64, b: i64, start: i64) -> Result<ExitProbs> {
    if start <= a || start >= b {
        return Err(Error::config(format!("start {start} is not inside ({a}, {b})")));
    }
    Ok(exit_probs_all(env, a, b)?[(start - a - 1) as usize])
}

type Mat53 = SMatrix<f64, 5, 3>;
type Mat5 = SMatrix<f64, 5, 5>;

/// Augmented transfer step `Z_k = T_k Z_{k+1}` on
/// `Z_k = (D_{k-1}, D_k, D_{k+1}, P_{k+1}, 1)`, `D_j = P_j - P_{j-1}`.
fn transfer_step(p: &EmbeddedProbs, k: i64) -> Result<Mat5> {
    let (mu1, mu2, l1, l2) = (p.down[0], p.down[1], p.up[0], p.up[1]);
    if !(mu2 > 0.0) {
        return Err(Error::Singular(format!("mu^2 = 0 at site {k}; the transfer recursion is undefined")));
    }
    let mut t = Mat5::zeros();
    t[(0, 0)] = -(mu1 + mu2) / mu2;
    t[(0, 1)] = (l1 + l2) / mu2;
    t[(0, 2)] = l2 / mu2;
    t[(1, 0)] = 1.0;
    t[(2, 1)] = 1.0;
    t[(3, 2)] = -1.0;
    t[(3, 3)] = 1.0;
    t[(4, 4)] = 1.0;
    Ok(t)
}

fn orthonormalize(m: Mat53) -> (Mat53, Matrix3<f64>) {
    let qr = m.qr();
    (qr.q(), qr.r())
}

/// Solves `P_k = p^2 P_{k+2} + p^1 P_{k+1} + q^1 P_{k-1} + q^2 P_{k-2}` on
/// `(a, b)` for boundary values `[P_{a-1}, P_a, P_b, P_{b+1}]` by marching
/// the matrices `M_k` downward from `b`. The two free directions at the top
/// are re-orthonormalized after every step, which keeps the march stable.
fn transfer_solve(probs: &[EmbeddedProbs], a: i64, b: i64, boundary: [f64; 4]) -> Result<Vec<f64>> {
    let n = (b - a - 1) as usize;
    let [pa1, pa, pb, pb1] = boundary;
    let mut top = Mat53::zeros();
    top[(0, 0)] = 1.0;
    top[(1, 1)] = 1.0;
    top[(2, 2)] = pb1 - pb;
    top[(3, 2)] = pb1;
    top[(4, 2)] = 1.0;
    let (mut basis, _) = orthonormalize(top);
    // bases[i] and steps[i] belong to site k = b - 1 - i
    let mut bases = Vec::with_capacity(n);
    let mut steps = Vec::with_capacity(n);
    for i in 0..n {
        let k = b - 1 - i as i64;
        let t = transfer_step(&probs[(k - a - 1) as usize], k)?;
        let (q, r) = orthonormalize(t * basis);
        bases.push(q);
        steps.push(r);
        basis = q;
    }
    // bottom conditions at Z_{a+1}: D_a, P_a and the constant coordinate
    let g = Matrix3::from_rows(&[basis.row(0).into_owned(), basis.row(3) - basis.row(2) - basis.row(1), basis.row(4).into_owned()]);
    let mut c = g.lu().solve(&Vector3::new(pa - pa1, pa, 1.0)).ok_or_else(|| Error::Singular("bottom boundary system".into()))?;
    let mut values = vec![0.0; n];
    for i in (0..n).rev() {
        let z = bases[i] * c;
        let k = b - 1 - i as i64;
        values[(k - a - 1) as usize] = z[3] - z[2];
        if i > 0 {
            let r = steps[i];
            if (0..3).any(|d| r[(d, d)].abs() < 1e-300) {
                return Err(Error::Singular(format!("transfer step at site {k} is not invertible")));
            }
            c = r.solve_upper_triangular(&c).ok_or_else(|| Error::Singular("transfer back-substitution".into()))?;
        }
    }
    Ok(values)
}

/// The same exit distributions as [`exit_probs_all`], computed through the
/// matrices `M_k` instead of a linear solve.
pub fn exit_probs_transfer(env: &Environment<SiteRates>, a: i64, b: i64) -> Result<Vec<ExitProbs>> {
    check_interval(a, b)?;
    let view = env.view(a + 1, b - 1)?;
    let probs = (a + 1..b).map(|k| two_by_two(view.get(k).expect("materialized"), k)).collect::<Result<Vec<_>>>()?;
    let solve = |bd: [f64; 4]| transfer_solve(&probs, a, b, bd);
    let (pb, pb1, pa, pa1) =
        (solve([0.0, 0.0, 1.0, 0.0])?, solve([0.0, 0.0, 0.0, 1.0])?, solve([0.0, 1.0, 0.0, 0.0])?, solve([1.0, 0.0, 0.0, 0.0])?);
    Ok((0..probs.len()).map(|i| ExitProbs { at_b: pb[i], at_b1: pb1[i], at_a: pa[i], at_a1: pa1[i] }).collect())
}

/// Hitting probabilities of `[i+1, inf)` for the chain on `(-inf, i]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FValues {
    pub i: i64,
    /// `f_i(i, i+1)`: from `i`, the first passage above `i` lands on `i+1`.
    pub from_i_to_1: f64,
    /// `f_i(i, i+2)`.
    pub from_i_to_2: f64,
    /// `f_{i-1}(i, i+1)`.
    pub from_prev_to_1: f64,
    /// `f_{i-1}(i, i+2)`.
    pub from_prev_to_2: f64,
    /// Number of interior sites of the final truncation `[i - depth + 1, i]`.
    pub depth: usize,
    /// Change of the values at the last doubling.
    pub residual: f64,
    /// Largest difference between the linear solve and the transfer march at
    /// the final depth, when the march was run.
    pub transfer_gap: Option<f64>,
}

fn truncated_f(env: &Environment<SiteRates>, i: i64, depth: usize) -> Result<[ExitProbs; 2]> {
    let b = i + 1;
    let a = b - depth as i64 - 1;
    let all = exit_probs_all(env, a, b)?;
    Ok([all[depth - 1], all[depth - 2]])
}

fn f_values_impl(env: &Environment<SiteRates>, i: i64, tol: f64, check_transfer: bool) -> Result<FValues> {
    if !(tol > 0.0) {
        return Err(Error::config("tol must be positive"));
    }
    let mut depth = START_DEPTH;
    let mut prev = truncated_f(env, i, depth)?;
    let mut last_change = f64::INFINITY;
    loop {
        if depth * 2 > MAX_DEPTH {
            return Err(Error::Truncation { what: "half-line exit probabilities", depth, last_change });
        }
        depth *= 2;
        let next = truncated_f(env, i, depth)?;
        let change = next[0].max_diff(&prev[0]).max(next[1].max_diff(&prev[1]));
        if change < tol {
            // the march needs mu^2 > 0 everywhere; without it there is no second route
            let transfer_gap = if check_transfer && depth <= TRANSFER_CHECK_DEPTH {
                let b = i + 1;
                match exit_probs_transfer(env, b - depth as i64 - 1, b) {
                    Ok(t) => Some(t[depth - 1].max_diff(&next[0]).max(t[depth - 2].max_diff(&next[1]))),
                    Err(Error::Singular(_)) => None,
                    Err(e) => return Err(e),
                }
            } else {
                None
            };
            return Ok(FValues {
                i,
                from_i_to_1: next[0].at_b,
                from_i_to_2: next[0].at_b1,
                from_prev_to_1: next[1].at_b,
                from_prev_to_2: next[1].at_b1,
                depth,
                residual: change,
                transfer_gap,
            });
        }
        prev = next;
        last_change = change;
    }
}

/// `f` values at `i`, deepening the truncation from 32 sites until
/// successive values change by less than `tol`. Where the transfer march is
/// defined and the depth is moderate it is run too and its gap reported.
pub fn f_values(env: &Environment<SiteRates>, i: i64, tol: f64) -> Result<FValues> {
    f_values_impl(env, i, tol, true)
}

/// Coefficients at one site, with the 9x9 mean matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoefficientBundle {
    pub site: i64,
    pub alpha: [f64; 3],
    pub beta: [f64; 3],
    pub gamma: [f64; 3],
    /// `1 - q_{i-1}^1 f_{i-2}(i-2, i-1) - q_{i-1}^2 f_{i-3}(i-2, i-1)`.
    pub denominator: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub v: f64,
    pub s: f64,
    pub t: f64,
    pub q: [[f64; 9]; 9],
    /// `(alpha_1, alpha_2, alpha_3) / sum alpha` padded with zeros.
    pub u1: [f64; 9],
    /// `(alpha_1, alpha_2) / (alpha_1 + alpha_2)`, then 1, then zeros.
    pub u_star: [f64; 9],
}

/// Ratio with `0 / 0 = 0`.
fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 && den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `(alpha, beta, gamma, denominator)` at one site.
pub type Abg = ([f64; 3], [f64; 3], [f64; 3], f64);

/// Alpha, beta and gamma at site `i` from the embedded probabilities at
/// `i-1, i, i+1` and `f1 = f_{i-2}(i-2, i-1)`, `f2 = f_{i-3}(i-2, i-1)`.
pub fn abg(prev: &EmbeddedProbs, here: &EmbeddedProbs, next: &EmbeddedProbs, f1: f64, f2: f64) -> Abg {
    let den = 1.0 - prev.down[0] * f1 - prev.down[1] * f2;
    let (p1, p2) = (prev.up[0], prev.up[1]);
    let (q1, q2, q2n) = (here.down[0], here.down[1], next.down[1]);
    let a1 = q1 * p1 / den;
    let a3 = q1 * p2 / den;
    let b1 = q2 * f1 * p1 / den;
    let b3 = q2 * f1 * p2 / den;
    let g1 = q2n * p1 / den;
    let g3 = q2n * p2 / den;
    ([a1, q1 - a1 - a3, a3], [b1, q2 - b1 - b3, b3], [g1, q2n - g1 - g3, g3], den)
}

/// Builds the bundle from the coefficients at `i` and `beta_{i+1,2}`.
pub fn bundle_from(site: i64, alpha: [f64; 3], beta: [f64; 3], gamma: [f64; 3], denominator: f64, beta_next2: f64) -> CoefficientBundle {
    let d = 1.0 - alpha[0] - alpha[1] - beta[0] - beta[1];
    let (x, y, z, w) = (alpha[0] / d, alpha[1] / d, beta[0] / d, beta[1] / d);
    let v = 1.0 - ratio(gamma[2], beta_next2);
    let s = ratio(alpha[2], alpha[2] + beta[2]);
    let t = ratio(gamma[0], gamma[0] + gamma[1]);
    let r0 = [x, y, 0.0, z, w, 0.0, 0.0, 0.0, 0.0];
    let r1 = [x, y, s, z, w, 1.0 - s, 0.0, 0.0, 0.0];
    let r3 = [x, y, 0.0, z, w, 0.0, t, 1.0 - t, 0.0];
    let r4 = [x * v, y * v, s * v, z * v, w * v, (1.0 - s) * v, t * v, (1.0 - t) * v, 1.0 - v];
    let q = [r0, r1, r0, r3, r4, r3, r0, r1, r0];
    let sa = alpha[0] + alpha[1] + alpha[2];
    let mut u1 = [0.0; 9];
    u1[..3].copy_from_slice(&[ratio(alpha[0], sa), ratio(alpha[1], sa), ratio(alpha[2], sa)]);
    let s12 = alpha[0] + alpha[1];
    let mut u_star = [0.0; 9];
    u_star[..3].copy_from_slice(&[ratio(alpha[0], s12), ratio(alpha[1], s12), 1.0]);
    CoefficientBundle { site, alpha, beta, gamma, denominator, x, y, z, w, v, s, t, q, u1, u_star }
}

/// Memoized coefficient computations on one environment.
pub struct Exact2 {
    env: Environment<SiteRates>,
    tol: f64,
    series_tol: f64,
    view: Option<EnvView<SiteRates>>,
    f_cache: HashMap<i64, (f64, f64)>,
    bundles: HashMap<i64, CoefficientBundle>,
    /// Deepest truncation used by any `f` computation.
    pub max_f_depth: usize,
}

impl Exact2 {
    pub fn new(env: &Environment<SiteRates>, tol: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(Error::config("tol must be positive"));
        }
        Ok(Exact2 { env: env.clone(), tol, series_tol: tol, view: None, f_cache: HashMap::new(), bundles: HashMap::new(), max_f_depth: 0 })
    }

    /// Stops the series at a different relative tolerance than the `f` values.
    pub fn with_series_tol(mut self, tol: f64) -> Self {
        self.series_tol = tol;
        self
    }

    fn probs(&mut self, x: i64) -> Result<EmbeddedProbs> {
        let hit = self.view.as_ref().and_then(|v| v.get(x)).is_some();
        if !hit {
            self.view = Some(self.env.view(x - 64, x + 64)?);
        }
        two_by_two(self.view.as_ref().unwrap().get(x).expect("materialized"), x)
    }

    /// `(f_j(j, j+1), f_{j-1}(j, j+1))`.
    fn f_pair(&mut self, j: i64) -> Result<(f64, f64)> {
        if let Some(v) = self.f_cache.get(&j) {
            return Ok(*v);
        }
        let f = f_values_impl(&self.env, j, self.tol, false)?;
        self.max_f_depth = self.max_f_depth.max(f.depth);
        let v = (f.from_i_to_1, f.from_prev_to_1);
        self.f_cache.insert(j, v);
        Ok(v)
    }

    fn abg_at(&mut self, i: i64) -> Result<Abg> {
        let (f1, f2) = self.f_pair(i - 2)?;
        let (prev, here, next) = (self.probs(i - 1)?, self.probs(i)?, self.probs(i + 1)?);
        let out = abg(&prev, &here, &next, f1, f2);
        if !(out.3 > 0.0) {
            return Err(Error::InfeasibleCoefficient { site: i, denominator: out.3 });
        }
        Ok(out)
    }

    pub fn bundle(&mut self, i: i64) -> Result<&CoefficientBundle> {
        if !self.bundles.contains_key(&i) {
            let (alpha, beta, gamma, den) = self.abg_at(i)?;
            let (_, beta_next, _, _) = self.abg_at(i + 1)?;
            let b = bundle_from(i, alpha, beta, gamma, den, beta_next[1]);
            let d = 1.0 - alpha[0] - alpha[1] - beta[0] - beta[1];
            if !(d > 0.0) || b.q.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::InfeasibleCoefficient { site: i, denominator: d });
            }
            self.bundles.insert(i, b);
        }
        Ok(&self.bundles[&i])
    }

    pub fn total_rate(&mut self, x: i64) -> Result<f64> {
        self.probs(x)?;
        Ok(self.view.as_ref().unwrap().get(x).expect("materialized").total_rate())
    }
}

/// Coefficient bundle at site `i` of `env`.
pub fn coefficient_bundle(env: &Environment<SiteRates>, i: i64, tol: f64) -> Result<CoefficientBundle> {
    Ok(Exact2::new(env, tol)?.bundle(i)?.clone())
}

fn row_times(r: &[f64; 9], q: &[[f64; 9]; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for (ri, row) in r.iter().zip(q) {
        if *ri != 0.0 {
            for (o, v) in out.iter_mut().zip(row) {
                *o += ri * v;
            }
        }
    }
    out
}

fn times_col(q: &[[f64; 9]; 9], c: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for (o, row) in out.iter_mut().zip(q) {
        *o = dot(row, c);
    }
    out
}

fn dot(a: &[f64; 9], b: &[f64; 9]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A summed series with its stopping diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SeriesValue {
    pub value: f64,
    pub terms: usize,
    /// Last term relative to the sum.
    pub last_relative: f64,
    /// Geometric decay rate of the terms, `(last / first)^(1 / terms)`.
    pub rate: f64,
}

/// Adds terms from `next_term` until one falls below `tol` times the running
/// sum; a divergence error after `k_max` terms.
fn sum_series(what: &'static str, tol: f64, k_max: usize, mut next_term: impl FnMut(usize) -> Result<f64>) -> Result<SeriesValue> {
    let mut acc = crate::stats::CompensatedSum::default();
    let mut first = f64::NAN;
    let mut last = f64::NAN;
    for k in 0..k_max {
        let term = next_term(k)?;
        if !term.is_finite() || term < 0.0 {
            return Err(Error::Divergence { what, terms: k + 1, last_term: term, partial_sum: acc.value() });
        }
        if k == 0 {
            first = term;
        }
        last = term;
        acc.add(term);
        let total = acc.value();
        if term <= tol * total {
            let rate = if first > 0.0 && term > 0.0 { (term / first).powf(1.0 / k.max(1) as f64) } else { 0.0 };
            return Ok(SeriesValue { value: total, terms: k + 1, last_relative: term / total, rate });
        }
    }
    Err(Error::Divergence { what, terms: k_max, last_term: last, partial_sum: acc.value() })
}

impl Exact2 {
    /// `sum_{k <= 0} (1 / q_k) u*(alpha_1) (Q_0 ... Q_{k+1} v1 + Q_0 ... Q_k v2)`.
    pub fn d_omega(&mut self, k_max: usize) -> Result<SeriesValue> {
        let mut r1 = self.bundle(1)?.u_star;
        let tol = self.series_tol;
        sum_series("D series", tol, k_max, |m| {
            let k = -(m as i64);
            let r2 = row_times(&r1, &self.bundle(k)?.q);
            let term = (dot(&r1, &V1) + dot(&r2, &V2)) / self.total_rate(k)?;
            r1 = r2;
            Ok(term)
        })
    }

    /// `sum_{k >= 0} (1 / q_0) u*(alpha_{k+1}) (Q_k ... Q_1 v1 + Q_k ... Q_0 v2)`.
    pub fn pi_omega(&mut self, k_max: usize) -> Result<SeriesValue> {
        let q0 = self.total_rate(0)?;
        let mut w1 = V1;
        let mut w2 = times_col(&self.bundle(0)?.q, &V2);
        let tol = self.series_tol;
        sum_series("pi series", tol, k_max, |k| {
            let k = k as i64;
            if k > 0 {
                let q = self.bundle(k)?.q;
                w1 = times_col(&q, &w1);
                w2 = times_col(&q, &w2);
            }
            let u = self.bundle(k + 1)?.u_star;
            Ok((dot(&u, &w1) + dot(&u, &w2)) / q0)
        })
    }

    /// `u*(alpha_1) (Q_0 ... Q_{k+1} v1 + Q_0 ... Q_k v2)` for `k <= 0`.
    pub fn expected_occupation(&mut self, k: i64) -> Result<f64> {
        if k > 0 {
            return Err(Error::config("occupation is defined for k <= 0"));
        }
        let mut r = self.bundle(1)?.u_star;
        for j in (k + 1..=0).rev() {
            r = row_times(&r, &self.bundle(j)?.q);
        }
        let r2 = row_times(&r, &self.bundle(k)?.q);
        Ok(dot(&r, &V1) + dot(&r2, &V2))
    }
}

pub fn d_omega(env: &Environment<SiteRates>, tol: f64, k_max: usize) -> Result<SeriesValue> {
    Exact2::new(env, tol)?.d_omega(k_max)
}

pub fn pi_omega(env: &Environment<SiteRates>, tol: f64, k_max: usize) -> Result<SeriesValue> {
    Exact2::new(env, tol)?.pi_omega(k_max)
}

/// `E(U_k | chi at T1bar = 2) + E(U_k | chi at T1bar = 1)` in the quenched law.
pub fn expected_occupation(env: &Environment<SiteRates>, k: i64, tol: f64) -> Result<f64> {
    Exact2::new(env, tol)?.expected_occupation(k)
}

/// `D`, `pi` and the drift at site 0 for one environment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct VelocityDecomposition {
    pub d: SeriesValue,
    pub pi: SeriesValue,
    /// `2 lambda_0^2 + lambda_0^1 - mu_0^1 - 2 mu_0^2`.
    pub drift: f64,
}

pub fn decompose(env: &Environment<SiteRates>, tol: f64, k_max: usize) -> Result<VelocityDecomposition> {
    let mut ex = Exact2::new(env, tol)?;
    let d = ex.d_omega(k_max)?;
    let pi = ex.pi_omega(k_max)?;
    let drift = env.site(0)?.drift();
    Ok(VelocityDecomposition { d, pi, drift })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Theorem51Run {
    pub env_samples: usize,
    pub tol: f64,
    pub k_max: usize,
    pub seed: u64,
}

/// `v = E[pi (2 lambda_0^2 + lambda_0^1 - mu_0^1 - 2 mu_0^2)] / E[D]`: one
/// evaluation for homogeneous laws, the average over a period for periodic
/// ones, Monte Carlo over environment draws otherwise.
pub fn velocity_theorem51(spec: &EnvSpec<SiteRates>, run: Theorem51Run) -> Result<VelocityReport> {
    let two = |s: &SiteRates| s.l() == 2 && s.r() == 2;
    let ok = match &spec.mode {
        Mode::IidUniform { template, .. } => two(template),
        _ => spec.catalog().is_some_and(|c| c.iter().all(two)),
    };
    if !ok {
        return Err(Error::config("the exact velocity needs L = R = 2"));
    }
    let (envs, averaging): (Vec<Environment<SiteRates>>, Averaging) = match &spec.mode {
        Mode::Homogeneous(_) => (vec![Environment::new(spec.clone(), 0)?], Averaging::Single),
        Mode::Periodic(sites) => {
            let base = Environment::new(spec.clone(), 0)?;
            ((0..sites.len() as i64).map(|s| base.shift(s)).collect(), Averaging::PeriodAverage)
        }
        _ if spec.is_random() => {
            if run.env_samples < 2 {
                return Err(Error::config("random environments need env_samples >= 2"));
            }
            let envs = (0..run.env_samples as u64)
                .map(|r| Environment::new(spec.clone(), rng::derive(run.seed, tag::ENV_REPLICA, r)))
                .collect::<Result<_>>()?;
            (envs, Averaging::Sampled)
        }
        _ => return Err(Error::config("the exact velocity needs a stationary environment law")),
    };
    let results: Vec<Result<VelocityDecomposition>> = envs.par_iter().map(|e| decompose(e, run.tol, run.k_max)).collect();
    let mut decs = Vec::with_capacity(results.len());
    let mut failure = None;
    for r in results {
        match r {
            Ok(d) => decs.push(d),
            Err(e) if e.is_numerical_divergence() => {
                failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let ds: Vec<f64> = decs.iter().map(|d| d.d.value).collect();
    let pds: Vec<f64> = decs.iter().map(|d| d.pi.value * d.drift).collect();
    let pis: Vec<f64> = decs.iter().map(|d| d.pi.value).collect();
    let drifts: Vec<f64> = decs.iter().map(|d| d.drift).collect();
    let k_used = decs.iter().map(|d| d.d.terms.max(d.pi.terms)).max().unwrap_or(0);
    let residuals = decs.iter().map(|d| d.d.last_relative.max(d.pi.last_relative)).fold(0.0, f64::max);
    let mean = |xs: &[f64]| Estimate::from_samples(xs);
    let d_est = mean(&ds);
    let details = |failure: Option<String>| VelocityDetails::Theorem51 {
        d_mean: d_est.mean,
        d_se: if averaging == Averaging::Sampled { d_est.se } else { 0.0 },
        pi_mean: mean(&pis).mean,
        pi_drift_mean: mean(&pds).mean,
        drift_mean: mean(&drifts).mean,
        k_used,
        residuals,
        env_samples: envs.len(),
        averaging,
        failure,
    };
    if failure.is_some() {
        return Ok(VelocityReport {
            method: Method::Theorem51,
            verdict: VelocityVerdict::ZeroOrUndefined,
            velocity: None,
            se: None,
            seed: run.seed,
            details: details(failure),
            samples: Vec::new(),
        });
    }
    let (v, se) = if averaging == Averaging::Sampled {
        let r = ratio_of_means(&pds, &ds);
        (r.mean, r.se)
    } else {
        (mean(&pds).mean / d_est.mean, 0.0)
    };
    Ok(VelocityReport {
        method: Method::Theorem51,
        verdict: VelocityVerdict::Estimated,
        velocity: Some(v),
        se: Some(se),
        seed: run.seed,
        details: details(None),
        samples: ds.iter().zip(&pds).map(|(d, p)| p / d).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn rates(v: [f64; 4]) -> SiteRates {
        SiteRates::from_ordered(2, 2, &v).unwrap()
    }

    fn homogeneous(v: [f64; 4]) -> Environment<SiteRates> {
        Environment::new(EnvSpec::homogeneous(rates(v)), 0).unwrap()
    }

    #[test]
    fn symmetric_nearest_neighbor_exits() {
        // embedded p1 = q1 = 1/2
        let env = homogeneous([0.0, 1.0, 1.0, 0.0]);
        let e = exit_probs_finite(&env, 0, 10, 5).unwrap();
        assert!((e.at_b - 0.5).abs() < 1e-12);
        assert_eq!(e.at_b1, 0.0);
        assert!((e.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gamblers_ruin() {
        let env = homogeneous([0.0, 1.0, 2.0, 0.0]);
        let n = 12;
        for k in 1..n {
            let e = exit_probs_finite(&env, 0, n, k).unwrap();
            let expected = (1.0 - 0.5f64.powi(k as i32)) / (1.0 - 0.5f64.powi(n as i32));
            assert!((e.at_b - expected).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn one_jump_lower_bound() {
        let env = homogeneous([1.0, 1.0, 1.0, 2.0]);
        let e = exit_probs_finite(&env, 0, 8, 7).unwrap();
        assert!(e.at_b1 >= 0.4);
    }

    #[test]
    fn transfer_matches_solve() {
        let env = homogeneous([1.0, 0.7, 1.3, 0.9]);
        let s = exit_probs_all(&env, -20, 5).unwrap();
        let t = exit_probs_transfer(&env, -20, 5).unwrap();
        for (x, y) in s.iter().zip(&t) {
            assert!(x.max_diff(y) < 1e-12, "{x:?} vs {y:?}");
        }
    }

    #[test]
    fn deterministic_right_f_and_occupation() {
        let env = homogeneous([0.0, 0.0, 1.0, 1.0]);
        let f = f_values(&env, 0, 1e-12).unwrap();
        assert!((f.from_i_to_1 + f.from_i_to_2 - 1.0).abs() < 1e-15);
        let b = coefficient_bundle(&env, 0, 1e-12).unwrap();
        assert_eq!(b.beta, [0.0; 3]);
        assert_eq!((b.z, b.w), (0.0, 0.0));
        assert!((expected_occupation(&env, 0, 1e-12).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn coefficient_identities_and_structure() {
        let env = homogeneous([1.0, 1.0, 1.0, 2.0]);
        let b = coefficient_bundle(&env, 0, 1e-12).unwrap();
        let p = embedded_jump_probs(&rates([1.0, 1.0, 1.0, 2.0]));
        assert!((b.alpha.iter().sum::<f64>() - p.down[0]).abs() < 1e-12);
        assert!((b.beta.iter().sum::<f64>() - p.down[1]).abs() < 1e-12);
        assert!((b.gamma.iter().sum::<f64>() - p.down[1]).abs() < 1e-12);
        assert_eq!(b.q[0], b.q[2]);
        assert_eq!(b.q[0], b.q[6]);
        assert_eq!(b.q[0], b.q[8]);
        assert_eq!(b.q[1], b.q[7]);
        assert_eq!(b.q[3], b.q[5]);
        assert!(b.q.iter().flatten().all(|&v| v >= 0.0 && v.is_finite()));
        assert!((b.u1[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn homogeneous_closed_form(v: [f64; 4]) -> f64 {
        let env = homogeneous(v);
        let b = coefficient_bundle(&env, 0, 1e-13).unwrap();
        let q = DMatrix::from_fn(9, 9, |i, j| b.q[i][j]);
        let inv = (DMatrix::identity(9, 9) - &q).try_inverse().unwrap();
        let rhs = DVector::from_row_slice(&V1) + &q * DVector::from_row_slice(&V2);
        let u = DVector::from_row_slice(&b.u_star);
        u.dot(&(inv * rhs)) / rates(v).total_rate()
    }

    #[test]
    fn d_matches_geometric_closed_form() {
        let env = homogeneous([1.0, 1.0, 1.0, 2.0]);
        let d = d_omega(&env, 1e-13, DEFAULT_K_MAX).unwrap();
        let closed = homogeneous_closed_form([1.0, 1.0, 1.0, 2.0]);
        assert!((d.value - closed).abs() < 1e-10 * closed, "{} vs {closed}", d.value);
        let pi = pi_omega(&env, 1e-13, DEFAULT_K_MAX).unwrap();
        assert!((pi.value - d.value).abs() < 1e-10 * d.value);
    }

    #[test]
    fn first_terms_use_empty_products() {
        let env = homogeneous([1.0, 1.0, 1.0, 2.0]);
        let b = coefficient_bundle(&env, 0, 1e-13).unwrap();
        let b1 = coefficient_bundle(&env, 1, 1e-13).unwrap();
        assert_eq!(b.u_star, b1.u_star);
        let first = (dot(&b.u_star, &V1) + dot(&b.u_star, &times_col(&b.q, &V2))) / 5.0;
        let mut ex = Exact2::new(&env, 1e-13).unwrap().with_series_tol(1e300);
        let one = ex.d_omega(10).unwrap();
        assert_eq!(one.terms, 1);
        assert!((one.value - first).abs() < 1e-15);
        let one = ex.pi_omega(10).unwrap();
        assert!((one.value - first).abs() < 1e-15);
    }

    #[test]
    fn homogeneous_velocity_equals_drift() {
        let run = Theorem51Run { env_samples: 1, tol: 1e-10, k_max: DEFAULT_K_MAX, seed: 0 };
        let r = velocity_theorem51(&EnvSpec::homogeneous(rates([1.0, 1.0, 1.0, 2.0])), run).unwrap();
        assert!((r.velocity.unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let spec = EnvSpec::homogeneous(SiteRates::new(vec![1.0], vec![2.0]).unwrap());
        let run = Theorem51Run { env_samples: 1, tol: 1e-10, k_max: 100, seed: 0 };
        assert!(matches!(velocity_theorem51(&spec, run), Err(Error::Config(_))));
    }
}
