//! One function per subcommand. Each returns the report body and the CSV
//! series to write next to it; `main` handles files and exit codes.

use ergwalk::bdp::{self, BdpRun, TailRun};
use ergwalk::env::{self, Environment, NonExplosionVerdict, SiteRates};
use ergwalk::exact2::{velocity_theorem51, Theorem51Run};
use ergwalk::lyapunov::{self, Verdict};
use ergwalk::report::{VelocityReport, VelocityVerdict};
use ergwalk::rng::{self, tag};
use ergwalk::rwre::{self, CorollaryRun, RwreRun};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Law, MethodName, VelocityConfig};
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// A verdict that `--strict` refuses to accept.
    Indeterminate,
    /// A result that needed a convergent series or truncation and did not get one.
    Diverged,
}

pub struct Outcome {
    pub result: Value,
    pub warnings: Vec<String>,
    /// `(file name, contents)`.
    pub files: Vec<(String, String)>,
    pub status: Status,
}

impl Outcome {
    fn new(result: Value) -> Self {
        Outcome { result, warnings: Vec::new(), files: Vec::new(), status: Status::Ok }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("reports serialize to JSON")
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

fn bdp_law<'a>(law: &'a Law, what: &str) -> Result<&'a env::EnvSpec<SiteRates>, CliError> {
    match law {
        Law::Bdp(spec) => Ok(spec),
        Law::Rwre(_) => Err(CliError::Config(format!("{what} needs a birth-death (\"bdp\") environment"))),
    }
}

fn f(x: f64) -> String {
    format!("{x:?}")
}

pub fn validate(cfg: &ExperimentConfig, law: &Law) -> Result<Outcome, CliError> {
    let v = cfg.validate.clone().unwrap_or_default();
    let bounds = cfg.environment.bounds.unwrap_or_default();
    let mut reports = serde_json::Map::new();
    let mut warnings = Vec::new();
    let mut files = Vec::new();
    match law {
        Law::Bdp(spec) => {
            let env = Environment::new(spec.clone(), cfg.seed)?;
            if let (Some(e), Some(m)) = (bounds.epsilon, bounds.big_m) {
                reports.insert("condition_c".into(), to_value(&env::validate_condition_c(&env, e, m, v.window)?));
            }
            if let (Some(k), Some(big_k)) = (bounds.kappa, bounds.big_k) {
                reports.insert("condition_c_weak".into(), to_value(&env::validate_condition_c_weak(&env, k, big_k, v.window)?));
            }
            let ne = env::check_nonexplosion(&env, v.nonexplosion_depth)?;
            if ne.verdict == NonExplosionVerdict::DivergenceNotObserved {
                warnings.push("non-explosion: divergence of the reciprocal-rate series NOT observed".to_string());
            }
            files.push((
                "nonexplosion.csv".to_string(),
                csv_text(
                    &["n", "right_partial_sum", "left_partial_sum"],
                    ne.right_partial_sums
                        .iter()
                        .zip(&ne.left_partial_sums)
                        .enumerate()
                        .map(|(i, (r, l))| vec![(i + 1).to_string(), f(*r), f(*l)]),
                ),
            ));
            reports.insert(
                "nonexplosion".into(),
                json!({
                    "depth": v.nonexplosion_depth,
                    "right_sum": ne.right_partial_sums.last(),
                    "left_sum": ne.left_partial_sums.last(),
                    "right_log_slope": ne.right_log_slope,
                    "left_log_slope": ne.left_log_slope,
                    "threshold": ne.threshold,
                    "verdict": ne.verdict,
                }),
            );
        }
        Law::Rwre(spec) => {
            let env = Environment::new(spec.clone(), cfg.seed)?;
            if let Some(t) = cfg.environment.tail {
                let eps = bounds.epsilon.ok_or_else(|| CliError::Config("condition B needs bounds.epsilon".into()))?;
                reports.insert("condition_b".into(), to_value(&env::validate_condition_b_env(&env, eps, t.d, t.eps0, v.window)?));
            }
        }
    }
    if !reports.keys().any(|k| k.starts_with("condition")) {
        warnings.push("no ellipticity or tail bounds declared; only structural checks ran".to_string());
    }
    let passed = reports.values().all(|r| r.get("passed").and_then(Value::as_bool).unwrap_or(true));
    let mut out = Outcome::new(json!({ "passed": passed, "window": v.window, "reports": reports }));
    out.warnings = warnings;
    out.files = files;
    Ok(out)
}

pub fn classify(cfg: &ExperimentConfig, law: &Law) -> Result<Outcome, CliError> {
    let c = cfg.classify.clone().unwrap_or_default();
    let spec = bdp_law(law, "classify")?;
    let env = Environment::new(spec.clone(), cfg.seed)?;
    let index = c.index.or(cfg.environment.r).unwrap_or(1);
    let spectrum = lyapunov::lyapunov_spectrum(&env, c.n_products, c.burn_in, cfg.seed)?;
    let class = lyapunov::classify(&spectrum, index)?;
    let mut out = Outcome::new(json!({
        "verdict": class.verdict,
        "index": class.index,
        "gamma_r": class.gamma_r,
        "ci": class.ci,
        "resolution": lyapunov::RESOLUTION,
        "spectrum": spectrum,
    }));
    if class.verdict == Verdict::BoundaryUndetermined {
        out.status = Status::Indeterminate;
    }
    Ok(out)
}

fn run_method(method: MethodName, v: &VelocityConfig, law: &Law, seed: u64) -> Result<VelocityReport, CliError> {
    let wrong = || CliError::Config(format!("method {} does not apply to this environment model", method_name(method)));
    Ok(match (method, law) {
        (MethodName::McBdp, Law::Bdp(spec)) => {
            bdp::estimate_velocity_bdp(spec, BdpRun { t_max: v.t_max, replicas: v.replicas, seed, annealed: v.annealed })?
        }
        (MethodName::Theorem51, Law::Bdp(spec)) => {
            velocity_theorem51(spec, Theorem51Run { env_samples: v.env_samples, tol: v.tol, k_max: v.k_max, seed })?
        }
        (MethodName::McRwre, Law::Rwre(spec)) => {
            rwre::estimate_velocity_rwre(spec, RwreRun { n_steps: v.n_steps, replicas: v.replicas, seed, annealed: v.annealed })?
        }
        (MethodName::Corollary, Law::Rwre(spec)) => {
            rwre::velocity_corollary(spec, CorollaryRun { samples: v.env_samples, depth_k: v.depth_k, tol: v.tol, seed })?
        }
        _ => return Err(wrong()),
    })
}

/// The exact formula reproduces the velocity when every site has the same
/// drift; otherwise it can be off, by a lot for periodic or Markov laws.
fn exact_formula_caveat(methods: &[MethodName], law: &Law) -> Option<String> {
    let Law::Bdp(spec) = law else { return None };
    let drifts: Vec<f64> = spec.catalog()?.iter().map(SiteRates::drift).collect();
    let uneven = drifts.iter().any(|d| (d - drifts[0]).abs() > 1e-12 * (1.0 + drifts[0].abs()));
    (methods.contains(&MethodName::Theorem51) && uneven).then(|| {
        "site drifts differ; the exact formula can deviate from the simulated velocity, strongly for periodic or Markov laws".to_string()
    })
}

fn method_name(m: MethodName) -> &'static str {
    match m {
        MethodName::McBdp => "mc-bdp",
        MethodName::McRwre => "mc-rwre",
        MethodName::Theorem51 => "theorem51",
        MethodName::Corollary => "corollary",
    }
}

fn samples_csv(report: &VelocityReport) -> String {
    csv_text(&["index", "value"], report.samples.iter().enumerate().map(|(i, x)| vec![i.to_string(), f(*x)]))
}

pub fn velocity(cfg: &ExperimentConfig, law: &Law) -> Result<Outcome, CliError> {
    let v = cfg.velocity.clone().unwrap_or_default();
    let method = v.method.expect("resolved config names a method");
    let report = run_method(method, &v, law, cfg.seed)?;
    let mut out = Outcome::new(to_value(&report));
    out.warnings.extend(exact_formula_caveat(&[method], law));
    if report.verdict == VelocityVerdict::ZeroOrUndefined {
        out.warnings.push("velocity is zero or undefined: a series or truncation did not converge".to_string());
        out.status = Status::Diverged;
    }
    if !report.samples.is_empty() {
        out.files.push(("samples.csv".to_string(), samples_csv(&report)));
    }
    Ok(out)
}

pub fn compare(cfg: &ExperimentConfig, law: &Law) -> Result<Outcome, CliError> {
    let c = cfg.compare.clone().unwrap_or_default();
    let v = cfg.velocity.clone().unwrap_or_default();
    let (m1, m2) = c.methods;
    if m1.model() != cfg.environment.model || m2.model() != cfg.environment.model {
        return Err(CliError::Config(format!(
            "{} and {} do not both apply to a {:?} environment",
            method_name(m1),
            method_name(m2),
            cfg.environment.model
        )));
    }
    // independent streams for the two sides
    let first = run_method(m1, &v, law, rng::derive(cfg.seed, tag::SPLIT, 0))?;
    let second = run_method(m2, &v, law, rng::derive(cfg.seed, tag::SPLIT, 1))?;
    let z = first.z_distance(&second);
    let agree = z.is_some_and(|z| z < c.threshold);
    let mut out = Outcome::new(json!({
        "first": first,
        "second": second,
        "z": z,
        "threshold": c.threshold,
        "agree": agree,
    }));
    out.warnings.extend(exact_formula_caveat(&[m1, m2], law));
    match z {
        None => {
            out.warnings.push("a velocity is zero or undefined; nothing to compare".to_string());
            out.status = Status::Diverged;
        }
        Some(z) if !agree => {
            out.warnings.push(format!("methods disagree by {z:.3} combined standard errors"));
            out.status = Status::Indeterminate;
        }
        Some(_) => {}
    }
    out.files.push(("first_samples.csv".to_string(), samples_csv(&first)));
    out.files.push(("second_samples.csv".to_string(), samples_csv(&second)));
    Ok(out)
}

pub fn tailcheck(cfg: &ExperimentConfig, law: &Law) -> Result<Outcome, CliError> {
    let t = cfg.tailcheck.clone().unwrap_or_default();
    let spec = bdp_law(law, "tailcheck")?;
    let bounds = cfg.environment.bounds.unwrap_or_default();
    let (Some(epsilon), Some(big_m)) = (bounds.epsilon, bounds.big_m) else {
        return Err(CliError::Config("tailcheck needs bounds.epsilon and bounds.M".into()));
    };
    let run =
        TailRun { h: t.h, steps: t.steps, replicas: t.replicas, m_max: t.m_max, epsilon, big_m, lambda_bar: t.lambda_bar, seed: cfg.seed };
    let report = bdp::skeleton_tail_check(spec, run)?;
    let mut out = Outcome::new(to_value(&report));
    if !report.all_below {
        out.warnings.push("some tail frequencies exceed the analytic bound".to_string());
        out.status = Status::Indeterminate;
    }
    if !(report.log_slope < 0.0) {
        out.warnings.push(format!("log-frequency slope {} is not negative", report.log_slope));
        out.status = Status::Indeterminate;
    }
    out.files.push((
        "tail.csv".to_string(),
        csv_text(
            &["m", "count", "frequency", "se", "log_frequency", "bound", "below"],
            report.points.iter().map(|p| {
                vec![p.m.to_string(), p.count.to_string(), f(p.frequency), f(p.se), f(p.frequency.ln()), f(p.bound), p.below.to_string()]
            }),
        ),
    ));
    Ok(out)
}

pub fn hconsistency(cfg: &ExperimentConfig, law: &Law) -> Result<Outcome, CliError> {
    let h = cfg.hconsistency.clone().unwrap_or_default();
    let spec = bdp_law(law, "hconsistency")?;
    let table = bdp::h_consistency(spec, &h.h, h.t_max, h.replicas, cfg.seed)?;
    let mut out = Outcome::new(json!({ "h_consistency": table }));
    if !table.consistent {
        out.warnings.push(format!("skeleton velocities differ by up to {:.3} combined standard errors", table.max_z));
        out.status = Status::Indeterminate;
    }
    out.files.push((
        "h_consistency.csv".to_string(),
        csv_text(&["h", "n", "v_over_h", "se"], table.rows.iter().map(|r| vec![f(r.h), r.n.to_string(), f(r.v_over_h), f(r.se)])),
    ));
    if !h.rates_h.is_empty() {
        let rates = bdp::small_h_rates(spec, &h.rates_h, h.rates_trials, rng::derive(cfg.seed, tag::SPLIT, u64::MAX))?;
        let truth = match &spec.mode {
            env::Mode::Homogeneous(site) => Some(site.clone()),
            _ => None,
        };
        let expected = |j: i64| -> Option<f64> {
            let s = truth.as_ref()?;
            let k = j.unsigned_abs() as usize;
            Some(match j {
                j if j < 0 && k <= s.l() => s.mu(k),
                j if j > 0 && k <= s.r() => s.lambda(k),
                _ => 0.0,
            })
        };
        out.files.push((
            "small_h_rates.csv".to_string(),
            csv_text(
                &["h", "offset", "rate", "se", "expected"],
                rates.iter().map(|r| vec![f(r.h), r.offset.to_string(), f(r.rate), f(r.se), expected(r.offset).map(f).unwrap_or_default()]),
            ),
        ));
        out.result["small_h_rates"] = to_value(&rates);
    }
    Ok(out)
}

pub fn simulate(cfg: &ExperimentConfig, law: &Law) -> Result<Outcome, CliError> {
    let s = cfg.simulate.clone().unwrap_or_default();
    let mut files = Vec::new();
    let result = match law {
        Law::Bdp(spec) => {
            let env = Environment::new(spec.clone(), cfg.seed)?;
            let path = bdp::simulate_bdp(&env, s.t_max, cfg.seed)?;
            let mut buf = Vec::new();
            path.write_csv(&mut buf)?;
            files.push(("path.csv".to_string(), String::from_utf8(buf).expect("csv output is UTF-8")));
            let (lo, hi) = min_max(&path.states);
            let mut buf = Vec::new();
            env::io::write_rates_csv(&env, lo, hi, &mut buf)?;
            files.push(("environment.csv".to_string(), String::from_utf8(buf).expect("csv output is UTF-8")));
            let mut result = json!({
                "t_max": s.t_max,
                "events": path.states.len() - 1,
                "final_state": path.final_state(),
                "min_state": lo,
                "max_state": hi,
            });
            if let Some(h) = s.h {
                let skel = bdp::extract_skeleton(&path, h)?;
                files.push((
                    "skeleton.csv".to_string(),
                    csv_text(
                        &["k", "t", "x"],
                        skel.xs.iter().enumerate().map(|(k, x)| vec![k.to_string(), f(k as f64 * h), x.to_string()]),
                    ),
                ));
                result["skeleton_h"] = json!(h);
                result["skeleton_velocity_over_h"] = json!(bdp::skeleton_velocity(&skel) / h);
            }
            result
        }
        Law::Rwre(spec) => {
            let env = Environment::new(spec.clone(), cfg.seed)?;
            let traj = rwre::run_walk(&env, s.n_steps, cfg.seed)?;
            let mart = rwre::martingale_residual(&env, &traj)?;
            let mut buf = Vec::new();
            traj.write_csv(&mut buf)?;
            files.push(("path.csv".to_string(), String::from_utf8(buf).expect("csv output is UTF-8")));
            files.push((
                "martingale.csv".to_string(),
                csv_text(
                    &["step", "m", "drift_sum"],
                    mart.m.iter().zip(&mart.drift_sums).enumerate().map(|(n, (m, d))| vec![n.to_string(), f(*m), f(*d)]),
                ),
            ));
            let (lo, hi) = min_max(&traj.states);
            let mut buf = Vec::new();
            env::io::write_laws_csv(&env, lo, hi, &mut buf)?;
            files.push(("environment.csv".to_string(), String::from_utf8(buf).expect("csv output is UTF-8")));
            json!({
                "n_steps": s.n_steps,
                "final_state": traj.states.last(),
                "min_state": lo,
                "max_state": hi,
                "final_martingale": mart.m.last(),
            })
        }
    };
    let mut out = Outcome::new(result);
    out.files = files;
    Ok(out)
}

fn min_max(xs: &[i64]) -> (i64, i64) {
    xs.iter().fold((i64::MAX, i64::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}
