//! Experiment configuration: the JSON schema, its defaults, and the
//! translation into engine environment specs.
//!
//! A parsed config is "resolved" before anything runs: every default is
//! written back into the struct, CSV-backed environments are inlined, and the
//! master seed is fixed. The resolved value is what reports embed, so feeding
//! a report back in reruns exactly the same experiment.

use std::fs::File;
use std::path::{Path, PathBuf};

use ergwalk::env::{self, EnvSpec, Mode, RwreSiteLaw, SiteRates};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate: Option<ValidateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classify: Option<ClassifyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<VelocityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tailcheck: Option<TailConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hconsistency: Option<HConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Bdp,
    Rwre,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    Homogeneous,
    Periodic,
    Iid,
    IidUniform,
    Markov,
    Explicit,
    Growing,
}

/// One site: ordered rates `(mu^L, ..., mu^1, lambda^1, ..., lambda^R)` for
/// the birth-death model, `[offset, probability]` pairs for the walk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SiteEntry {
    Rates(Vec<f64>),
    Law(Vec<(i64, f64)>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Uniform {
    pub low: f64,
    pub high: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub big_m: Option<f64>,
    /// Weak bounds: `lambda^1 > kappa` and total rate `< K`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub big_k: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tail {
    #[serde(rename = "D")]
    pub d: f64,
    pub eps0: f64,
    /// Truncation radius; laws reaching further are folded onto `+-J`.
    #[serde(rename = "J", default, skip_serializing_if = "Option::is_none")]
    pub j: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub model: Model,
    pub mode: ModeName,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sites: Vec<SiteEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniform: Option<Uniform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
    /// Index of the first listed site in explicit mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first: Option<i64>,
    /// CSV file with an explicit environment; inlined on resolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<Tail>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub window: (i64, i64),
    pub nonexplosion_depth: usize,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig { window: (-100, 100), nonexplosion_depth: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub n_products: usize,
    pub burn_in: usize,
    /// Index of the deciding exponent; `R` when absent.
    pub index: Option<usize>,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig { n_products: 100_000, burn_in: 1_000, index: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    McBdp,
    McRwre,
    Theorem51,
    Corollary,
}

impl MethodName {
    pub fn model(self) -> Model {
        match self {
            MethodName::McBdp | MethodName::Theorem51 => Model::Bdp,
            MethodName::McRwre | MethodName::Corollary => Model::Rwre,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityConfig {
    pub method: Option<MethodName>,
    pub replicas: usize,
    /// Horizon of the continuous-time simulation.
    pub t_max: f64,
    /// Steps of the discrete-time simulation.
    pub n_steps: usize,
    /// Fresh environment per replica.
    pub annealed: bool,
    /// Environment draws for exact methods on random environments.
    pub env_samples: usize,
    pub tol: f64,
    pub k_max: usize,
    pub depth_k: usize,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        VelocityConfig {
            method: None,
            replicas: 200,
            t_max: 1e4,
            n_steps: 100_000,
            annealed: true,
            env_samples: 200,
            tol: 1e-10,
            k_max: ergwalk::exact2::DEFAULT_K_MAX,
            depth_k: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub methods: (MethodName, MethodName),
    pub threshold: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig { methods: (MethodName::Theorem51, MethodName::McBdp), threshold: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailConfig {
    pub h: f64,
    pub steps: usize,
    pub replicas: usize,
    pub m_max: u32,
    pub lambda_bar: f64,
}

impl Default for TailConfig {
    fn default() -> Self {
        TailConfig { h: 0.1, steps: 1_000_000, replicas: 64, m_max: 10, lambda_bar: -20.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HConfig {
    pub h: Vec<f64>,
    pub t_max: f64,
    pub replicas: usize,
    /// Meshes at which to estimate the rates from one-step frequencies.
    pub rates_h: Vec<f64>,
    pub rates_trials: usize,
}

impl Default for HConfig {
    fn default() -> Self {
        HConfig { h: vec![0.1, 0.05, 0.01], t_max: 100.0, replicas: 400, rates_h: Vec::new(), rates_trials: 200_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub t_max: f64,
    pub n_steps: usize,
    /// Skeleton mesh; no skeleton is written when absent.
    pub h: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { t_max: 100.0, n_steps: 1_000, h: None }
    }
}

/// Environment law of either model.
pub enum Law {
    Bdp(EnvSpec<SiteRates>),
    Rwre(EnvSpec<RwreSiteLaw>),
}

fn schema(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Reads a config file. A previously written report is accepted too: its
/// embedded `config` is used.
pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| schema(format!("cannot read {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| schema(format!("{}: {e}", path.display())))?;
    if value.get("command").is_some() && value.get("result").is_some() {
        value = value["config"].take();
    }
    let mut config: ExperimentConfig = serde_json::from_value(value).map_err(|e| schema(format!("{}: {e}", path.display())))?;
    if let Some(csv) = &config.environment.csv {
        if csv.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            config.environment.csv = Some(base.join(csv));
        }
    }
    Ok(config)
}

impl ExperimentConfig {
    /// Fills defaults, inlines CSV environments and checks the environment
    /// block. Only the block of `command` is kept.
    pub fn resolve(mut self, command: &str, seed: Option<u64>) -> Result<(ExperimentConfig, Law), CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.environment.resolve()?;
        let law = self.environment.law()?;
        let keep = |name: &str| command == name;
        self.validate = keep("validate").then(|| self.validate.take().unwrap_or_default());
        self.classify = keep("classify").then(|| self.classify.take().unwrap_or_default());
        let velocity = self.velocity.take();
        self.velocity = (keep("velocity") || keep("compare")).then(|| velocity.unwrap_or_default());
        self.compare = keep("compare").then(|| self.compare.take().unwrap_or_default());
        self.tailcheck = keep("tailcheck").then(|| self.tailcheck.take().unwrap_or_default());
        self.hconsistency = keep("hconsistency").then(|| self.hconsistency.take().unwrap_or_default());
        self.simulate = keep("simulate").then(|| self.simulate.take().unwrap_or_default());
        if let Some(v) = &mut self.velocity {
            if keep("velocity") && v.method.is_none() {
                v.method = Some(match self.environment.model {
                    Model::Bdp => MethodName::McBdp,
                    Model::Rwre => MethodName::McRwre,
                });
            }
        }
        Ok((self, law))
    }
}

impl EnvConfig {
    fn resolve(&mut self) -> Result<(), CliError> {
        if let Some(path) = self.csv.take() {
            if self.mode != ModeName::Explicit || !self.sites.is_empty() {
                return Err(schema("a csv environment needs mode \"explicit\" and no inline sites"));
            }
            let file = File::open(&path).map_err(|e| schema(format!("cannot read {}: {e}", path.display())))?;
            let (first, sites) = match self.model {
                Model::Bdp => match env::io::read_rates_csv(file)?.mode {
                    Mode::Explicit { first, sites } => (first, sites.iter().map(|s| SiteEntry::Rates(s.ordered())).collect()),
                    _ => unreachable!("csv environments are explicit"),
                },
                Model::Rwre => match env::io::read_laws_csv(file)?.mode {
                    Mode::Explicit { first, sites } => (first, sites.iter().map(|s| SiteEntry::Law(s.support().collect())).collect()),
                    _ => unreachable!("csv environments are explicit"),
                },
            };
            self.first = Some(first);
            self.sites = sites;
        }
        if let Some(b) = &self.bounds {
            if let (Some(e), Some(m)) = (b.epsilon, b.big_m) {
                if !(e < m) {
                    return Err(schema(format!("bounds need epsilon < M, got epsilon = {e}, M = {m}")));
                }
            }
            if let (Some(k), Some(big)) = (b.kappa, b.big_k) {
                if !(k < big) {
                    return Err(schema(format!("bounds need kappa < K, got kappa = {k}, K = {big}")));
                }
            }
        }
        if let Some(t) = &mut self.tail {
            if !(t.d > 0.0 && t.eps0 > 0.0) {
                return Err(schema("tail parameters need D > 0 and eps0 > 0"));
            }
            if t.j.is_none() {
                t.j = Some(env::default_truncation(t.d, t.eps0, 1e-6));
            }
        }
        match self.model {
            Model::Bdp => {
                let width = self.sites.iter().find_map(|s| match s {
                    SiteEntry::Rates(v) => Some(v.len()),
                    SiteEntry::Law(_) => None,
                });
                match (self.l, self.r, width) {
                    (Some(_), Some(_), _) => {}
                    (None, None, Some(w)) if w % 2 == 0 => {
                        self.l = Some(w / 2);
                        self.r = Some(w / 2);
                    }
                    _ => return Err(schema("set L and R for the birth-death model")),
                }
            }
            Model::Rwre => {
                if self.l.is_some() || self.r.is_some() {
                    return Err(schema("L and R belong to the birth-death model; walk laws carry their own support"));
                }
            }
        }
        if self.mode == ModeName::Iid && self.weights.is_none() && !self.sites.is_empty() {
            self.weights = Some(vec![1.0 / self.sites.len() as f64; self.sites.len()]);
        }
        if self.first.is_none() && self.mode == ModeName::Explicit {
            self.first = Some(0);
        }
        Ok(())
    }

    fn rates(&self) -> Result<Vec<SiteRates>, CliError> {
        let (l, r) = (self.l.unwrap_or(0), self.r.unwrap_or(0));
        self.sites
            .iter()
            .enumerate()
            .map(|(i, s)| match s {
                SiteEntry::Rates(v) if v.len() == l + r => Ok(SiteRates::from_ordered(l, r, v)?),
                SiteEntry::Rates(v) => Err(schema(format!("site {i} has {} rates, expected L + R = {}", v.len(), l + r))),
                SiteEntry::Law(_) => Err(schema(format!("site {i} is a jump law, expected a rate list"))),
            })
            .collect()
    }

    fn laws(&self) -> Result<Vec<RwreSiteLaw>, CliError> {
        self.sites
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let pairs = match s {
                    SiteEntry::Law(p) => p.clone(),
                    // `[]` parses as an empty rate list
                    SiteEntry::Rates(v) if v.is_empty() => Vec::new(),
                    SiteEntry::Rates(_) => return Err(schema(format!("site {i} is a rate list, expected [offset, prob] pairs"))),
                };
                let law = RwreSiteLaw::new(pairs)?;
                match self.tail.and_then(|t| t.j) {
                    Some(j) if law.max_left().max(law.max_right()) > j => Ok(RwreSiteLaw::folded(|k| law.prob(k), j)?),
                    _ => Ok(law),
                }
            })
            .collect()
    }

    /// Engine spec for the resolved block.
    pub fn law(&self) -> Result<Law, CliError> {
        let limit = self.limit.unwrap_or(env::DEFAULT_LIMIT);
        match self.model {
            Model::Bdp => {
                let sites = self.rates()?;
                let template = || -> Result<SiteRates, CliError> {
                    let (l, r) = (self.l.unwrap_or(0), self.r.unwrap_or(0));
                    match sites.first() {
                        Some(s) => Ok(s.clone()),
                        None => Ok(SiteRates::new(vec![1.0; l], vec![1.0; r])?),
                    }
                };
                let mode = self.mode(sites.clone(), template)?;
                Ok(Law::Bdp(EnvSpec::new(mode)?.with_limit(limit)))
            }
            Model::Rwre => {
                let sites = self.laws()?;
                let template = || sites.first().cloned().ok_or_else(|| schema("at least one site is required"));
                let mode = self.mode(sites.clone(), template)?;
                Ok(Law::Rwre(EnvSpec::new(mode)?.with_limit(limit)))
            }
        }
    }

    fn mode<S>(&self, sites: Vec<S>, template: impl FnOnce() -> Result<S, CliError>) -> Result<Mode<S>, CliError> {
        let need_sites = |what: &str| -> Result<(), CliError> {
            if sites.is_empty() {
                Err(schema(format!("{what} mode needs at least one site")))
            } else {
                Ok(())
            }
        };
        Ok(match self.mode {
            ModeName::Homogeneous => {
                if sites.len() != 1 {
                    return Err(schema("homogeneous mode takes exactly one site"));
                }
                Mode::Homogeneous(sites.into_iter().next().unwrap())
            }
            ModeName::Periodic => {
                need_sites("periodic")?;
                Mode::Periodic(sites)
            }
            ModeName::Iid => {
                need_sites("iid")?;
                let weights = self.weights.clone().ok_or_else(|| schema("iid mode needs weights"))?;
                Mode::Iid { sites, weights }
            }
            ModeName::IidUniform => {
                let u = self.uniform.ok_or_else(|| schema("iid-uniform mode needs \"uniform\": {low, high}"))?;
                Mode::IidUniform { template: template()?, low: u.low, high: u.high }
            }
            ModeName::Markov => {
                need_sites("markov")?;
                let transition = self.transition.clone().ok_or_else(|| schema("markov mode needs a transition matrix"))?;
                Mode::Markov { sites, transition }
            }
            ModeName::Explicit => {
                need_sites("explicit")?;
                Mode::Explicit { first: self.first.unwrap_or(0), sites }
            }
            ModeName::Growing => {
                let exponent = self.exponent.ok_or_else(|| schema("growing mode needs an exponent"))?;
                Mode::Growing { base: template()?, exponent }
            }
        })
    }
}
