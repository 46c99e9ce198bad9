//! Discrete-time random walk with unbounded jumps in a random environment:
//! simulation, first-passage statistics, the drift martingale, and the
//! expected-visit vector `pi` behind the exact velocity `1 / E(T)`.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::env::{EnvSpec, Environment, Mode, RwreSiteLaw};
use crate::error::{Error, Result};
use crate::linalg::BandMatrix;
use crate::report::{Averaging, Method, VelocityDetails, VelocityReport, VelocityVerdict};
use crate::rng::{self, tag, StreamRng};
use crate::stats::{batch_means, CompensatedSum, Estimate};

/// Default step budget for first-passage runs.
pub const DEFAULT_STEP_CAP: u64 = 1_000_000;
/// Deepest truncation tried by [`phi_pi_solve`].
pub const DEFAULT_MAX_DEPTH: usize = 1 << 18;

/// Generator for walk `replica` of master seed `seed`.
pub fn walk_rng(seed: u64, replica: u64) -> StreamRng {
    rng::stream(rng::derive(seed, tag::WALK, 0), replica)
}

/// Environment used by `replica`: a fresh draw when `annealed` and the law is
/// random, otherwise one shared realization.
pub(crate) fn replica_env<S: crate::env::Site>(
    spec: &EnvSpec<S>,
    shared: &Environment<S>,
    seed: u64,
    replica: u64,
    annealed: bool,
) -> Result<Environment<S>> {
    if annealed && spec.is_random() {
        Environment::new(spec.clone(), rng::derive(seed, tag::ENV_REPLICA, replica))
    } else {
        Ok(shared.clone())
    }
}

pub(crate) fn shared_env<S: crate::env::Site>(spec: &EnvSpec<S>, seed: u64) -> Result<Environment<S>> {
    Environment::new(spec.clone(), rng::derive(seed, tag::ENV_REPLICA, u64::MAX))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkTrajectory {
    /// `S_0, ..., S_n` with `S_0 = 0`.
    pub states: Vec<i64>,
    pub seed: u64,
}

impl WalkTrajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// Writes `step,state` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "state"])?;
        for (n, s) in self.states.iter().enumerate() {
            w.write_record([n.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `n_steps` steps from 0 using `rng`.
pub fn run_walk_with(env: &Environment<RwreSiteLaw>, n_steps: usize, rng: &mut StreamRng) -> Result<Vec<i64>> {
    let mut cursor = env.cursor();
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut x = 0i64;
    states.push(x);
    for _ in 0..n_steps {
        x += cursor.site(x)?.jump_for(rng.random());
        states.push(x);
    }
    Ok(states)
}

/// The quenched walk from 0 for `n_steps` steps; a pure function of
/// `(env, n_steps, seed)`.
pub fn run_walk(env: &Environment<RwreSiteLaw>, n_steps: usize, seed: u64) -> Result<WalkTrajectory> {
    let states = run_walk_with(env, n_steps, &mut walk_rng(seed, 0))?;
    Ok(WalkTrajectory { states, seed })
}

/// First passage of the walk into `(0, inf)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HittingRecord {
    /// `T` when completed, otherwise the number of steps taken (the cap).
    pub steps: u64,
    pub completed: bool,
    /// `S_T`, when completed.
    pub overshoot: Option<i64>,
    /// `occupation[m]` is `U_{-m}`, the number of `n < T` with `S_n = -m`.
    pub occupation: Vec<u64>,
}

impl HittingRecord {
    pub fn t(&self) -> Option<u64> {
        self.completed.then_some(self.steps)
    }

    /// `U_k` for `k <= 0`.
    pub fn u(&self, k: i64) -> u64 {
        if k > 0 {
            return 0;
        }
        self.occupation.get((-k) as usize).copied().unwrap_or(0)
    }
}

pub fn hitting_time_with(env: &Environment<RwreSiteLaw>, step_cap: u64, rng: &mut StreamRng) -> Result<HittingRecord> {
    if step_cap == 0 {
        return Err(Error::config("step cap must be >= 1"));
    }
    let mut cursor = env.cursor();
    let mut occupation: Vec<u64> = Vec::new();
    let mut x = 0i64;
    for n in 0..step_cap {
        let m = (-x) as usize;
        if m >= occupation.len() {
            occupation.resize(m + 1, 0);
        }
        occupation[m] += 1;
        x += cursor.site(x)?.jump_for(rng.random());
        if x > 0 {
            return Ok(HittingRecord { steps: n + 1, completed: true, overshoot: Some(x), occupation });
        }
    }
    Ok(HittingRecord { steps: step_cap, completed: false, overshoot: None, occupation })
}

/// `T = inf{n > 0 : S_n > 0}` with the occupation counts before it.
pub fn hitting_time(env: &Environment<RwreSiteLaw>, seed: u64, step_cap: u64) -> Result<HittingRecord> {
    hitting_time_with(env, step_cap, &mut walk_rng(seed, 0))
}

/// `d(x, omega) = E^x_omega(S_1 - S_0)`.
pub fn local_drift(env: &Environment<RwreSiteLaw>, x: i64) -> Result<f64> {
    Ok(env.site(x)?.drift())
}

/// `M_n = S_n - S_0 - sum_{k<n} d(S_k)` along a trajectory, with the drift
/// sums kept so the decomposition can be checked.
#[derive(Clone, Debug, PartialEq)]
pub struct MartingaleSeries {
    pub m: Vec<f64>,
    /// `sum_{k<n} d(S_k)`, compensated.
    pub drift_sums: Vec<f64>,
}

impl MartingaleSeries {
    /// Largest `|M_n| / n / (c n^-(1/2 - delta))` over `1 <= n <= N`; the
    /// envelope `|M_n| / n < c n^-(1/2 - delta)` holds when this is below 1.
    pub fn envelope_ratio(&self, c: f64, delta: f64) -> f64 {
        self.m
            .iter()
            .enumerate()
            .skip(1)
            .map(|(n, m)| {
                let n = n as f64;
                (m.abs() / n) / (c * n.powf(-(0.5 - delta)))
            })
            .fold(0.0, f64::max)
    }
}

pub fn martingale_residual(env: &Environment<RwreSiteLaw>, traj: &WalkTrajectory) -> Result<MartingaleSeries> {
    let s0 = traj.states[0];
    let mut cursor = env.cursor();
    let mut acc = CompensatedSum::default();
    let mut m = Vec::with_capacity(traj.states.len());
    let mut drift_sums = Vec::with_capacity(traj.states.len());
    for (n, &s) in traj.states.iter().enumerate() {
        let d = acc.value();
        drift_sums.push(d);
        m.push((s - s0) as f64 - d);
        if n + 1 < traj.states.len() {
            acc.add(cursor.site(s)?.drift());
        }
    }
    Ok(MartingaleSeries { m, drift_sums })
}

/// Parameters of a Monte Carlo velocity run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RwreRun {
    pub n_steps: usize,
    pub replicas: usize,
    pub seed: u64,
    /// Fresh environment per replica (annealed) or one shared realization.
    pub annealed: bool,
}

/// Estimates `lim S_n / n` by the mean of `S_n / n` over replicas. With a
/// single replica the error comes from 50 batch means along the path.
pub fn estimate_velocity_rwre(spec: &EnvSpec<RwreSiteLaw>, run: RwreRun) -> Result<VelocityReport> {
    if run.replicas == 0 || run.n_steps == 0 {
        return Err(Error::config("replicas and n_steps must be >= 1"));
    }
    let shared = shared_env(spec, run.seed)?;
    let batches = 50usize;
    let per_replica: Vec<(f64, Vec<f64>)> = (0..run.replicas as u64)
        .into_par_iter()
        .map(|r| {
            let env = replica_env(spec, &shared, run.seed, r, run.annealed)?;
            let mut rng = walk_rng(run.seed, r);
            let mut cursor = env.cursor();
            let mut x = 0i64;
            let mut checkpoints = Vec::new();
            let every = (run.n_steps / batches).max(1);
            for n in 1..=run.n_steps {
                x += cursor.site(x)?.jump_for(rng.random());
                if run.replicas == 1 && n % every == 0 {
                    checkpoints.push(x as f64);
                }
            }
            Ok((x as f64 / run.n_steps as f64, checkpoints))
        })
        .collect::<Result<_>>()?;
    let samples: Vec<f64> = per_replica.iter().map(|p| p.0).collect();
    let est = if run.replicas == 1 {
        let every = (run.n_steps / batches).max(1) as f64;
        let mut prev = 0.0;
        let increments: Vec<f64> = per_replica[0]
            .1
            .iter()
            .map(|&c| {
                let d = (c - prev) / every;
                prev = c;
                d
            })
            .collect();
        let bm = batch_means(&increments, increments.len());
        Estimate { mean: samples[0], se: bm.se, n: 1 }
    } else {
        Estimate::from_samples(&samples)
    };
    let averaging = if !spec.is_random() {
        if spec.period() == Some(1) {
            Averaging::Single
        } else {
            Averaging::Quenched
        }
    } else if run.annealed {
        Averaging::Sampled
    } else {
        Averaging::Quenched
    };
    Ok(VelocityReport {
        method: Method::McRwre,
        verdict: VelocityVerdict::Estimated,
        velocity: Some(est.mean),
        se: Some(est.se),
        seed: run.seed,
        details: VelocityDetails::Simulation { replicas: run.replicas, horizon: run.n_steps as f64, averaging, truncations: 0 },
        samples,
    })
}

/// Solution of `pi Phi = pi`, `pi_1 = 1` on a truncated state space.
#[derive(Clone, Debug, PartialEq)]
pub struct PiVector {
    /// `entries[0] = pi_1`, `entries[1 + m] = pi_{-m}` for `0 <= m <= depth`.
    pub entries: Vec<f64>,
    pub depth: usize,
    /// `sum_{i <= 0} pi_i`, which equals `E_omega(T)`.
    pub sum: f64,
    /// `max |(pi Phi - pi)_i|` over the retained block.
    pub residual: f64,
    /// Change of `sum` at the last depth doubling.
    pub last_change: f64,
}

impl PiVector {
    /// `pi_i` for `i <= 1`.
    pub fn pi(&self, i: i64) -> f64 {
        if i == 1 {
            return self.entries[0];
        }
        self.entries.get(1 + (-i) as usize).copied().unwrap_or(0.0)
    }
}

fn check_one_step_right(law: &RwreSiteLaw, x: i64) -> Result<()> {
    if law.max_right() > 1 {
        return Err(Error::config(format!(
            "site {x} jumps {} to the right; the expected-visit system needs right jumps of size <= 1",
            law.max_right()
        )));
    }
    Ok(())
}

/// Visit vector on `[-depth, 0]`, with jumps below `-depth` sent to `-depth`.
fn pi_at_depth(env: &Environment<RwreSiteLaw>, depth: usize) -> Result<PiVector> {
    let k = depth as i64;
    let view = env.view(-k, 0)?;
    let laws: Vec<&RwreSiteLaw> = (-k..=0).map(|i| view.get(i).expect("materialized")).collect();
    for (m, law) in laws.iter().enumerate() {
        check_one_step_right(law, m as i64 - k)?;
    }
    let band = laws.iter().map(|l| l.max_left()).max().unwrap_or(0).min(k) as usize;
    let n = depth + 1;
    // unknown index m = i + depth; equation j reads pi_j - sum_i pi_i P(i, j) = [j = 0]
    let mut a = BandMatrix::zeros(n, 1, band.max(1));
    let target = |i: i64, o: i64| -> Option<usize> {
        let t = i + o;
        if t >= 1 {
            None
        } else {
            Some((t.max(-k) + k) as usize)
        }
    };
    for (mi, law) in laws.iter().enumerate() {
        let i = mi as i64 - k;
        a.add(mi, mi, 1.0);
        for (o, p) in law.support() {
            if let Some(mj) = target(i, o) {
                a.add(mj, mi, -p);
            }
        }
    }
    let mut rhs = vec![0.0; n];
    rhs[depth] = 1.0;
    let x = a.solve(&rhs)?;
    let resid_block = a.mul_vec(&x).iter().zip(&rhs).map(|(l, r)| (l - r).abs()).fold(0.0, f64::max);
    let pi1 = laws[depth].prob(1) * x[depth];
    let residual = resid_block.max((pi1 - 1.0).abs());
    let sum = crate::stats::neumaier_sum(x.iter().copied());
    let mut entries = Vec::with_capacity(n + 1);
    entries.push(1.0);
    entries.extend(x.iter().rev().copied());
    Ok(PiVector { entries, depth, sum, residual, last_change: f64::INFINITY })
}

/// Solves `pi Phi = pi` with `pi_1 = 1`, doubling the truncation depth from
/// `depth_k` until `sum_{i<=0} pi_i` changes by less than `tol`.
pub fn phi_pi_solve(env: &Environment<RwreSiteLaw>, depth_k: usize, tol: f64) -> Result<PiVector> {
    phi_pi_solve_capped(env, depth_k, tol, DEFAULT_MAX_DEPTH)
}

pub fn phi_pi_solve_capped(env: &Environment<RwreSiteLaw>, depth_k: usize, tol: f64, max_depth: usize) -> Result<PiVector> {
    if depth_k == 0 || !(tol > 0.0) {
        return Err(Error::config("depth must be >= 1 and tol > 0"));
    }
    let mut prev = pi_at_depth(env, depth_k)?;
    let mut depth = depth_k;
    loop {
        if depth * 2 > max_depth {
            return Err(Error::Truncation { what: "expected-visit sum", depth, last_change: prev.last_change });
        }
        depth *= 2;
        let mut next = pi_at_depth(env, depth)?;
        next.last_change = (next.sum - prev.sum).abs();
        if next.last_change < tol {
            return Ok(next);
        }
        prev = next;
    }
}

/// Parameters for [`velocity_corollary`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorollaryRun {
    pub samples: usize,
    pub depth_k: usize,
    pub tol: f64,
    pub seed: u64,
}

/// `v = 1 / E(sum_{i<=0} pi_i)`. Exact for homogeneous and periodic laws,
/// Monte Carlo over environment draws otherwise.
pub fn velocity_corollary(spec: &EnvSpec<RwreSiteLaw>, run: CorollaryRun) -> Result<VelocityReport> {
    let (envs, averaging): (Vec<Environment<RwreSiteLaw>>, Averaging) = match &spec.mode {
        Mode::Homogeneous(_) => (vec![Environment::new(spec.clone(), 0)?], Averaging::Single),
        Mode::Periodic(sites) => {
            let base = Environment::new(spec.clone(), 0)?;
            ((0..sites.len() as i64).map(|s| base.shift(s)).collect(), Averaging::PeriodAverage)
        }
        _ if spec.is_random() => {
            if run.samples == 0 {
                return Err(Error::config("samples must be >= 1"));
            }
            let envs = (0..run.samples as u64)
                .map(|r| Environment::new(spec.clone(), rng::derive(run.seed, tag::ENV_REPLICA, r)))
                .collect::<Result<_>>()?;
            (envs, Averaging::Sampled)
        }
        _ => return Err(Error::config("the corollary velocity needs a stationary environment law")),
    };
    for law in spec.catalog().unwrap_or_default() {
        check_one_step_right(law, 0)?;
    }
    if let Mode::IidUniform { template, .. } = &spec.mode {
        check_one_step_right(template, 0)?;
    }
    let solved: Vec<Result<PiVector>> = envs.par_iter().map(|e| phi_pi_solve(e, run.depth_k, run.tol)).collect();
    let mut sums = Vec::with_capacity(solved.len());
    let (mut depth, mut residual) = (0usize, 0.0f64);
    for s in solved {
        match s {
            Ok(p) => {
                depth = depth.max(p.depth);
                residual = residual.max(p.residual);
                sums.push(p.sum);
            }
            Err(e) if e.is_numerical_divergence() => {
                return Ok(VelocityReport {
                    method: Method::Corollary,
                    verdict: VelocityVerdict::ZeroOrUndefined,
                    velocity: None,
                    se: None,
                    seed: run.seed,
                    details: VelocityDetails::Corollary {
                        sum_pi_mean: f64::INFINITY,
                        sum_pi_se: 0.0,
                        depth,
                        residual,
                        samples: envs.len(),
                        averaging,
                        failure: Some(e.to_string()),
                    },
                    samples: sums,
                })
            }
            Err(e) => return Err(e),
        }
    }
    let est = Estimate::from_samples(&sums);
    let sum_se = if averaging == Averaging::Sampled { est.se } else { 0.0 };
    Ok(VelocityReport {
        method: Method::Corollary,
        verdict: VelocityVerdict::Estimated,
        velocity: Some(1.0 / est.mean),
        se: Some(if sum_se.is_finite() { sum_se / (est.mean * est.mean) } else { f64::NAN }),
        seed: run.seed,
        details: VelocityDetails::Corollary {
            sum_pi_mean: est.mean,
            sum_pi_se: sum_se,
            depth,
            residual,
            samples: envs.len(),
            averaging,
            failure: None,
        },
        samples: sums,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Mode;

    fn law(pairs: &[(i64, f64)]) -> RwreSiteLaw {
        RwreSiteLaw::new(pairs.iter().copied()).unwrap()
    }

    fn homogeneous(pairs: &[(i64, f64)]) -> Environment<RwreSiteLaw> {
        Environment::new(EnvSpec::homogeneous(law(pairs)), 0).unwrap()
    }

    #[test]
    fn deterministic_walk() {
        let env = homogeneous(&[(1, 1.0)]);
        assert_eq!(run_walk(&env, 5, 3).unwrap().states, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn walk_is_reproducible() {
        let env = homogeneous(&[(1, 0.5), (-1, 0.3), (-3, 0.2)]);
        assert_eq!(run_walk(&env, 1000, 9).unwrap(), run_walk(&env, 1000, 9).unwrap());
        assert_ne!(run_walk(&env, 1000, 9).unwrap(), run_walk(&env, 1000, 10).unwrap());
    }

    #[test]
    fn hitting_deterministic_and_right_drift() {
        let env = homogeneous(&[(1, 1.0)]);
        let rec = hitting_time(&env, 0, 10).unwrap();
        assert_eq!((rec.t(), rec.overshoot, rec.u(0)), (Some(1), Some(1), 1));

        let env = homogeneous(&[(2, 0.5), (1, 0.5)]);
        for seed in 0..20 {
            let rec = hitting_time(&env, seed, 10).unwrap();
            assert_eq!(rec.t(), Some(1));
            assert!(matches!(rec.overshoot, Some(1) | Some(2)));
        }
    }

    #[test]
    fn hitting_counts_sum_to_t() {
        let env = homogeneous(&[(1, 0.6), (-1, 0.3), (-2, 0.1)]);
        for seed in 0..50 {
            let rec = hitting_time(&env, seed, 100_000).unwrap();
            assert!(rec.completed);
            assert!(rec.u(0) >= 1);
            assert_eq!(rec.occupation.iter().sum::<u64>(), rec.steps);
        }
    }

    #[test]
    fn drift_examples() {
        assert!((local_drift(&homogeneous(&[(1, 0.7), (-1, 0.3)]), 0).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(local_drift(&homogeneous(&[(1, 0.5), (-1, 0.5)]), 3).unwrap(), 0.0);
        let d = local_drift(&homogeneous(&[(1, 0.5), (-1, 0.25), (-2, 0.25)]), 0).unwrap();
        assert!((d + 0.25).abs() < 1e-15);
    }

    #[test]
    fn martingale_first_step_and_deterministic() {
        let env = homogeneous(&[(1, 0.7), (-1, 0.3)]);
        let traj = WalkTrajectory { states: vec![0, 1], seed: 0 };
        let m = martingale_residual(&env, &traj).unwrap();
        assert_eq!(m.m[0], 0.0);
        assert!((m.m[1] - 0.6).abs() < 1e-15);

        let env = homogeneous(&[(1, 1.0)]);
        let traj = run_walk(&env, 100, 0).unwrap();
        assert!(martingale_residual(&env, &traj).unwrap().m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pi_deterministic_right() {
        let env = homogeneous(&[(1, 1.0)]);
        let pi = phi_pi_solve(&env, 4, 1e-12).unwrap();
        assert_eq!(pi.pi(1), 1.0);
        assert!((pi.pi(0) - 1.0).abs() < 1e-15);
        assert!((pi.sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pi_nearest_neighbor_matches_classical_mean() {
        // E(T) = 1 / (p - q) for the nearest-neighbor walk
        let env = homogeneous(&[(1, 0.7), (-1, 0.3)]);
        let pi = phi_pi_solve(&env, 32, 1e-12).unwrap();
        assert!((pi.sum - 2.5).abs() < 1e-10, "{}", pi.sum);
        assert!(pi.residual < 1e-12);
        assert!(pi.entries.iter().all(|&p| p >= 0.0));
        // pi_{-m} = (q/p)^m / p: expected visits below 0 fall off geometrically
        for m in 0..5 {
            let expected = (0.3f64 / 0.7).powi(m) / 0.7;
            assert!((pi.pi(-(m as i64)) - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn pi_symmetric_does_not_converge() {
        let env = homogeneous(&[(1, 0.5), (-1, 0.5)]);
        let err = phi_pi_solve_capped(&env, 16, 1e-6, 1 << 12).unwrap_err();
        assert!(matches!(err, Error::Truncation { .. }));
    }

    #[test]
    fn pi_rejects_long_right_jumps() {
        let env = homogeneous(&[(2, 0.5), (-1, 0.5)]);
        assert!(matches!(phi_pi_solve(&env, 8, 1e-8), Err(Error::Config(_))));
    }

    #[test]
    fn corollary_homogeneous() {
        let run = CorollaryRun { samples: 1, depth_k: 32, tol: 1e-12, seed: 0 };
        let r = velocity_corollary(&EnvSpec::homogeneous(law(&[(1, 0.7), (-1, 0.3)])), run).unwrap();
        assert!((r.velocity.unwrap() - 0.4).abs() < 1e-10);
        let r = velocity_corollary(&EnvSpec::homogeneous(law(&[(1, 1.0)])), run).unwrap();
        assert_eq!(r.velocity, Some(1.0));
        let r = velocity_corollary(&EnvSpec::homogeneous(law(&[(1, 0.5), (-1, 0.5)])), CorollaryRun { tol: 1e-3, ..run }).unwrap();
        assert_eq!(r.verdict, VelocityVerdict::ZeroOrUndefined);
    }

    #[test]
    fn corollary_periodic_is_period_average() {
        let (a, b) = (law(&[(1, 0.7), (-1, 0.3)]), law(&[(1, 0.8), (-1, 0.2)]));
        let spec = EnvSpec::new(Mode::Periodic(vec![a, b])).unwrap();
        let run = CorollaryRun { samples: 1, depth_k: 32, tol: 1e-12, seed: 0 };
        let r = velocity_corollary(&spec, run).unwrap();
        // two-periodic nearest neighbor: E(T) from 0 and from 1 averaged
        let base = Environment::new(spec.clone(), 0).unwrap();
        let s0 = phi_pi_solve(&base, 32, 1e-12).unwrap().sum;
        let s1 = phi_pi_solve(&base.shift(1), 32, 1e-12).unwrap().sum;
        assert!((r.velocity.unwrap() - 2.0 / (s0 + s1)).abs() < 1e-12);
    }

    #[test]
    fn velocity_single_replica_uses_batches() {
        let spec = EnvSpec::homogeneous(law(&[(1, 0.7), (-1, 0.3)]));
        let r = estimate_velocity_rwre(&spec, RwreRun { n_steps: 100_000, replicas: 1, seed: 1, annealed: true }).unwrap();
        let (v, se) = (r.velocity.unwrap(), r.se.unwrap());
        assert!(se > 0.0 && se < 0.01);
        assert!((v - 0.4).abs() < 4.0 * se);
    }
}
