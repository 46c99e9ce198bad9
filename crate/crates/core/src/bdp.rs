//! Continuous-time birth-death process with bounded jumps in a random
//! environment: event-driven simulation, the embedded chain, h-skeletons,
//! ladder statistics and the Monte Carlo checks built on them.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::env::{validate_condition_c, EnvSpec, Environment, SiteRates};
use crate::error::{Error, Result};
use crate::report::{Averaging, Method, VelocityDetails, VelocityReport, VelocityVerdict};
use crate::rng::{self, tag, StreamRng};
use crate::rwre::{replica_env, shared_env, walk_rng};
use crate::stats::{ols_slope, CompensatedSum, Estimate};

/// Abort threshold on the number of events in one path.
pub const EVENT_LIMIT: u64 = 1_000_000_000;

/// A realized path: jump epochs and the states entered at them.
#[derive(Clone, Debug, PartialEq)]
pub struct EventPath {
    /// `tau_0 = 0 < tau_1 < ...`, all `<= t_max`.
    pub epochs: Vec<f64>,
    /// `chi_n = N_{tau_n}`.
    pub states: Vec<i64>,
    pub t_max: f64,
    pub seed: u64,
}

impl EventPath {
    /// `N_t`, right-continuous.
    pub fn state_at(&self, t: f64) -> i64 {
        let i = self.epochs.partition_point(|&e| e <= t);
        self.states[i.saturating_sub(1)]
    }

    pub fn final_state(&self) -> i64 {
        *self.states.last().expect("non-empty path")
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau", "chi"])?;
        for (t, s) in self.epochs.iter().zip(&self.states) {
            w.write_record([format!("{t:?}"), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Drives the jump chain until `stop(time, state)` after an event returns
/// true or the next epoch would pass `t_max`. Calls `on_event(tau, state)` for
/// every jump. Returns the final state.
fn drive<F, G>(env: &Environment<SiteRates>, t_max: f64, rng: &mut StreamRng, mut on_event: F, mut stop: G) -> Result<i64>
where
    F: FnMut(f64, i64),
    G: FnMut(f64, i64) -> bool,
{
    let mut cursor = env.cursor();
    let mut clock = CompensatedSum::default();
    let mut x = 0i64;
    let mut events = 0u64;
    loop {
        let site = cursor.site(x)?;
        let q = site.total_rate();
        let hold: f64 = Exp1.sample(rng);
        clock.add(hold / q);
        let t = clock.value();
        if t > t_max {
            return Ok(x);
        }
        x += site.jump_for(rng.random::<f64>() * q);
        events += 1;
        if events > EVENT_LIMIT {
            return Err(Error::EventExplosion { events: EVENT_LIMIT });
        }
        on_event(t, x);
        if stop(t, x) {
            return Ok(x);
        }
    }
}

pub fn simulate_bdp_with(env: &Environment<SiteRates>, t_max: f64, rng: &mut StreamRng, seed: u64) -> Result<EventPath> {
    if !(t_max > 0.0) {
        return Err(Error::config("t_max must be positive"));
    }
    let mut epochs = vec![0.0];
    let mut states = vec![0];
    drive(
        env,
        t_max,
        rng,
        |t, x| {
            epochs.push(t);
            states.push(x);
        },
        |_, _| false,
    )?;
    Ok(EventPath { epochs, states, t_max, seed })
}

/// Gillespie simulation on `[0, t_max]` from state 0.
pub fn simulate_bdp(env: &Environment<SiteRates>, t_max: f64, seed: u64) -> Result<EventPath> {
    simulate_bdp_with(env, t_max, &mut walk_rng(seed, 0), seed)
}

/// Simulates until the first entrance into `(0, inf)` or `t_max`.
pub fn simulate_until_ladder(env: &Environment<SiteRates>, t_max: f64, rng: &mut StreamRng, seed: u64) -> Result<EventPath> {
    let mut epochs = vec![0.0];
    let mut states = vec![0];
    drive(
        env,
        t_max,
        rng,
        |t, x| {
            epochs.push(t);
            states.push(x);
        },
        |_, x| x > 0,
    )?;
    Ok(EventPath { epochs, states, t_max, seed })
}

/// `X_k = N_{kh}` for `k = 0..=floor(t_max / h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSeries {
    pub h: f64,
    pub xs: Vec<i64>,
}

impl SkeletonSeries {
    pub fn increments(&self) -> impl Iterator<Item = i64> + '_ {
        self.xs.windows(2).map(|w| w[1] - w[0])
    }
}

fn grid_len(t_max: f64, h: f64) -> usize {
    // tolerate representation error when h divides t_max
    (t_max / h * (1.0 + 1e-12)).floor() as usize
}

pub fn extract_skeleton(path: &EventPath, h: f64) -> Result<SkeletonSeries> {
    if !(h > 0.0 && h <= path.t_max) {
        return Err(Error::config(format!("skeleton mesh must satisfy 0 < h <= t_max, got {h}")));
    }
    let n = grid_len(path.t_max, h);
    let mut xs = Vec::with_capacity(n + 1);
    let mut i = 0usize;
    for k in 0..=n {
        let t = k as f64 * h;
        while i + 1 < path.epochs.len() && path.epochs[i + 1] <= t {
            i += 1;
        }
        xs.push(path.states[i]);
    }
    Ok(SkeletonSeries { h, xs })
}

/// First-ladder statistics of one path.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LadderStats {
    /// `T_1`, or the horizon when truncated.
    pub t1: f64,
    /// `N_{T_1}`.
    pub overshoot: Option<i64>,
    /// `visits[m]` is the number of embedded steps `n < T1bar` at state `-m`.
    pub visits: Vec<u64>,
    /// `occupation[m]`: total time spent at `-m` before `T_1`.
    pub occupation: Vec<f64>,
    /// `T1bar`, the index of the embedded step entering `(0, inf)`.
    pub ladder_index: u64,
    pub truncated: bool,
}

impl LadderStats {
    pub fn u_bar(&self, k: i64) -> u64 {
        if k > 0 {
            return 0;
        }
        self.visits.get((-k) as usize).copied().unwrap_or(0)
    }

    pub fn occupation_at(&self, k: i64) -> f64 {
        if k > 0 {
            return 0.0;
        }
        self.occupation.get((-k) as usize).copied().unwrap_or(0.0)
    }
}

/// `X_n / (n h)` for the full skeleton of a path.
pub fn skeleton_velocity(skel: &SkeletonSeries) -> f64 {
    let n = skel.xs.len() - 1;
    (skel.xs[n] - skel.xs[0]) as f64 / (n as f64 * skel.h)
}

/// Ladder time, overshoot and per-site visits and occupation times.
pub fn ladder_stats(path: &EventPath) -> Result<LadderStats> {
    if path.states.first() != Some(&0) {
        return Err(Error::config("ladder statistics need a path started at 0"));
    }
    let mut visits: Vec<u64> = Vec::new();
    let mut occ: Vec<CompensatedSum> = Vec::new();
    for n in 0..path.states.len() {
        let x = path.states[n];
        if x > 0 {
            let occupation: Vec<f64> = occ.iter().map(|c| c.value()).collect();
            return Ok(LadderStats {
                t1: path.epochs[n],
                overshoot: Some(x),
                visits,
                occupation,
                ladder_index: n as u64,
                truncated: false,
            });
        }
        let m = (-x) as usize;
        if m >= visits.len() {
            visits.resize(m + 1, 0);
            occ.resize(m + 1, CompensatedSum::default());
        }
        visits[m] += 1;
        let leave = path.epochs.get(n + 1).copied().unwrap_or(path.t_max);
        occ[m].add(leave - path.epochs[n]);
    }
    Ok(LadderStats {
        t1: path.t_max,
        overshoot: None,
        visits,
        occupation: occ.iter().map(|c| c.value()).collect(),
        ladder_index: path.states.len() as u64,
        truncated: true,
    })
}

/// Parameters of a continuous-time Monte Carlo run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BdpRun {
    pub t_max: f64,
    pub replicas: usize,
    pub seed: u64,
    pub annealed: bool,
}

/// Final positions `N_{t_max}` of independent replicas, in replica order.
pub fn final_positions(spec: &EnvSpec<SiteRates>, run: BdpRun) -> Result<Vec<i64>> {
    if run.replicas == 0 || !(run.t_max > 0.0) {
        return Err(Error::config("replicas must be >= 1 and t_max > 0"));
    }
    let shared = shared_env(spec, run.seed)?;
    (0..run.replicas as u64)
        .into_par_iter()
        .map(|r| {
            let env = replica_env(spec, &shared, run.seed, r, run.annealed)?;
            drive(&env, run.t_max, &mut walk_rng(run.seed, r), |_, _| {}, |_, _| false)
        })
        .collect()
}

fn averaging_of(spec: &EnvSpec<SiteRates>, annealed: bool) -> Averaging {
    if spec.period() == Some(1) {
        Averaging::Single
    } else if spec.is_random() && annealed {
        Averaging::Sampled
    } else {
        Averaging::Quenched
    }
}

/// Mean of `N_{t_max} / t_max` over replicas.
pub fn estimate_velocity_bdp(spec: &EnvSpec<SiteRates>, run: BdpRun) -> Result<VelocityReport> {
    let samples: Vec<f64> = final_positions(spec, run)?.into_iter().map(|x| x as f64 / run.t_max).collect();
    let est = Estimate::from_samples(&samples);
    Ok(VelocityReport {
        method: Method::McBdp,
        verdict: VelocityVerdict::Estimated,
        velocity: Some(est.mean),
        se: Some(est.se),
        seed: run.seed,
        details: VelocityDetails::Simulation {
            replicas: run.replicas,
            horizon: run.t_max,
            averaging: averaging_of(spec, run.annealed),
            truncations: 0,
        },
        samples,
    })
}

/// Constants of the exponential skeleton tail bound
/// `p(h, i, j) < exp(c0 h) exp(-c1 |j|)` for `|j| > max(L, R)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TailConstants {
    pub epsilon: f64,
    #[serde(rename = "M")]
    pub big_m: f64,
    pub kappa: f64,
    #[serde(rename = "K")]
    pub big_k: f64,
    pub lambda_bar: f64,
    pub c0: f64,
    pub c1: f64,
}

impl TailConstants {
    /// `kappa = (L+R) eps`, `K = (L+R) M`, `c0 = -lambda_bar`,
    /// `c1 = (ln(kappa - lambda_bar) - ln K) / R`.
    pub fn new(l: usize, r: usize, epsilon: f64, big_m: f64, lambda_bar: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < big_m) {
            return Err(Error::config(format!("tail bound needs 0 < epsilon < M, got ({epsilon}, {big_m})")));
        }
        if !(lambda_bar < 0.0) {
            return Err(Error::config("lambda_bar must be negative"));
        }
        let n = (l + r) as f64;
        let (kappa, big_k) = (n * epsilon, n * big_m);
        Ok(TailConstants {
            epsilon,
            big_m,
            kappa,
            big_k,
            lambda_bar,
            c0: -lambda_bar,
            c1: ((kappa - lambda_bar).ln() - big_k.ln()) / r as f64,
        })
    }

    pub fn bound(&self, h: f64, m: u32) -> f64 {
        (self.c0 * h).exp() * (-self.c1 * m as f64).exp()
    }
}

/// Parameters of [`skeleton_tail_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailRun {
    pub h: f64,
    /// Total skeleton steps, split evenly over the replicas.
    pub steps: usize,
    pub replicas: usize,
    pub m_max: u32,
    pub epsilon: f64,
    pub big_m: f64,
    pub lambda_bar: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailPoint {
    pub m: u32,
    pub count: u64,
    /// Empirical `P(|X_1 - X_0| >= m)`.
    pub frequency: f64,
    pub se: f64,
    pub bound: f64,
    pub below: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TailReport {
    pub h: f64,
    pub steps: u64,
    pub constants: TailConstants,
    pub points: Vec<TailPoint>,
    /// Least-squares slope of `ln frequency` against `m` over the points with
    /// nonzero counts; NaN with fewer than two such points.
    pub log_slope: f64,
    /// Every point plus three standard errors lies below the bound.
    pub all_below: bool,
}

/// Empirical tail of one-step skeleton increments against the analytic bound.
/// Requires the uniform ellipticity bounds on every site the paths visit.
pub fn skeleton_tail_check(spec: &EnvSpec<SiteRates>, run: TailRun) -> Result<TailReport> {
    let shared = shared_env(spec, run.seed)?;
    let site0 = shared.site(0)?;
    let (l, r) = (site0.l(), site0.r());
    let lr = l.max(r) as u32;
    if run.m_max <= lr {
        return Err(Error::config(format!("m_max must exceed max(L, R) = {lr}; the bound says nothing below")));
    }
    if !(run.h > 0.0) || run.replicas == 0 || run.steps < run.replicas {
        return Err(Error::config("tail check needs h > 0 and steps >= replicas >= 1"));
    }
    let constants = TailConstants::new(l, r, run.epsilon, run.big_m, run.lambda_bar)?;
    let per = run.steps / run.replicas;
    let t_max = per as f64 * run.h;
    let results: Vec<(Vec<u64>, i64, i64)> = (0..run.replicas as u64)
        .into_par_iter()
        .map(|rep| {
            let env = replica_env(spec, &shared, run.seed, rep, true)?;
            let path = simulate_bdp_with(&env, t_max, &mut walk_rng(run.seed, rep), run.seed)?;
            let skel = extract_skeleton(&path, run.h)?;
            let mut counts = vec![0u64; run.m_max as usize + 1];
            for d in skel.increments().take(per) {
                let a = d.unsigned_abs().min(run.m_max as u64) as usize;
                counts[a] += 1;
            }
            let lo = *path.states.iter().min().unwrap();
            let hi = *path.states.iter().max().unwrap();
            let report = validate_condition_c(&env, run.epsilon, run.big_m, (lo, hi))?;
            if !report.passed {
                let v = &report.violations[0];
                return Err(Error::config(format!(
                    "tail check needs epsilon < rate < M on visited sites; site {} has {} = {}",
                    v.site, v.component, v.value
                )));
            }
            Ok((counts, lo, hi))
        })
        .collect::<Result<_>>()?;
    let mut hist = vec![0u64; run.m_max as usize + 1];
    for (c, _, _) in &results {
        for (h, v) in hist.iter_mut().zip(c) {
            *h += v;
        }
    }
    let total = (per * run.replicas) as u64;
    let n = total as f64;
    let mut points = Vec::new();
    for m in (lr + 1)..=run.m_max {
        let count: u64 = hist[m as usize..].iter().sum();
        let p = count as f64 / n;
        let se = (p * (1.0 - p) / n).sqrt();
        let bound = constants.bound(run.h, m);
        points.push(TailPoint { m, count, frequency: p, se, bound, below: p + 3.0 * se < bound });
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().filter(|p| p.count > 0).map(|p| (p.m as f64, p.frequency.ln())).unzip();
    let log_slope = if xs.len() >= 2 { ols_slope(&xs, &ys) } else { f64::NAN };
    let all_below = points.iter().all(|p| p.below);
    Ok(TailReport { h: run.h, steps: total, constants, points, log_slope, all_below })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HRow {
    pub h: f64,
    /// Skeleton steps per replica, `floor(t_max / h)`.
    pub n: usize,
    /// Mean of `X_n / n` divided by `h`.
    pub v_over_h: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HConsistency {
    pub rows: Vec<HRow>,
    /// Largest pairwise distance in combined standard errors.
    pub max_z: f64,
    pub consistent: bool,
}

/// Skeleton velocity over `h` for each mesh, each from its own streams.
pub fn h_consistency(spec: &EnvSpec<SiteRates>, h_list: &[f64], t_max: f64, replicas: usize, seed: u64) -> Result<HConsistency> {
    if h_list.is_empty() || h_list.iter().any(|&h| !(h > 0.0 && h <= t_max)) {
        return Err(Error::config("every h must satisfy 0 < h <= t_max"));
    }
    let mut rows = Vec::with_capacity(h_list.len());
    for (idx, &h) in h_list.iter().enumerate() {
        let n = grid_len(t_max, h);
        let sub_seed = rng::derive(seed, tag::SPLIT, idx as u64);
        let run = BdpRun { t_max: n as f64 * h, replicas, seed: sub_seed, annealed: true };
        let xs: Vec<f64> = final_positions(spec, run)?.into_iter().map(|x| x as f64 / n as f64 / h).collect();
        let est = Estimate::from_samples(&xs);
        rows.push(HRow { h, n, v_over_h: est.mean, se: est.se });
    }
    let mut max_z: f64 = 0.0;
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let z = (a.v_over_h - b.v_over_h).abs() / a.se.hypot(b.se);
            max_z = max_z.max(if z.is_nan() { 0.0 } else { z });
        }
    }
    Ok(HConsistency { rows, max_z, consistent: max_z < 3.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateEstimate {
    pub h: f64,
    pub offset: i64,
    /// `p_hat(h, 0, j) / h`.
    pub rate: f64,
    pub se: f64,
}

/// One-step skeleton jump frequencies from state 0, divided by `h`, for
/// offsets `-(L+1)..=R+1` except 0. Each trial runs the process for time `h`.
pub fn small_h_rates(spec: &EnvSpec<SiteRates>, h_list: &[f64], trials: usize, seed: u64) -> Result<Vec<RateEstimate>> {
    if trials == 0 || h_list.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::config("small-h rates need trials >= 1 and h > 0"));
    }
    let shared = shared_env(spec, seed)?;
    let site0 = shared.site(0)?;
    let (l, r) = (site0.l() as i64, site0.r() as i64);
    let offsets: Vec<i64> = (-(l + 1)..=(r + 1)).filter(|&j| j != 0).collect();
    let chunks = 64usize.min(trials);
    let mut out = Vec::new();
    for (idx, &h) in h_list.iter().enumerate() {
        let sub_seed = rng::derive(seed, tag::SPLIT, idx as u64);
        let counts: Vec<Vec<u64>> = (0..chunks as u64)
            .into_par_iter()
            .map(|c| {
                let lo = trials * c as usize / chunks;
                let hi = trials * (c as usize + 1) / chunks;
                let mut rng = walk_rng(sub_seed, c);
                let mut counts = vec![0u64; offsets.len()];
                for t in lo..hi {
                    let env = replica_env(spec, &shared, sub_seed, t as u64, true)?;
                    let x = drive(&env, h, &mut rng, |_, _| {}, |_, _| false)?;
                    if let Some(i) = offsets.iter().position(|&j| j == x) {
                        counts[i] += 1;
                    }
                }
                Ok(counts)
            })
            .collect::<Result<_>>()?;
        let n = trials as f64;
        for (i, &j) in offsets.iter().enumerate() {
            let count: u64 = counts.iter().map(|c| c[i]).sum();
            let p = count as f64 / n;
            out.push(RateEstimate { h, offset: j, rate: p / h, se: (p * (1.0 - p) / n).sqrt() / h });
        }
    }
    Ok(out)
}
