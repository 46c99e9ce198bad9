use std::sync::{Arc, RwLock};

use rand::Rng;

use super::site::Site;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Default bound on `|x|` for materialized sites.
pub const DEFAULT_LIMIT: i64 = 1 << 26;

/// How the sites of an environment are generated.
#[derive(Clone, Debug, PartialEq)]
pub enum Mode<S> {
    /// The same site everywhere.
    Homogeneous(S),
    /// `site(x) = sites[x mod p]`.
    Periodic(Vec<S>),
    /// I.i.d. draws from a finite mixture.
    Iid { sites: Vec<S>, weights: Vec<f64> },
    /// I.i.d. sites shaped like `template`, every parameter uniform on `[low, high]`.
    IidUniform { template: S, low: f64, high: f64 },
    /// Sites driven by a stationary finite-state Markov chain along the lattice.
    Markov { sites: Vec<S>, transition: Vec<Vec<f64>> },
    /// A finite, explicitly listed window starting at site `first`.
    Explicit { first: i64, sites: Vec<S> },
    /// Non-stationary: `base` scaled by `(1 + |x|)^exponent`. Only useful for
    /// exercising the non-explosion diagnostics.
    Growing { base: S, exponent: f64 },
}

/// A validated environment law together with the materialization bound.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec<S> {
    pub mode: Mode<S>,
    pub limit: i64,
}

impl<S: Site> EnvSpec<S> {
    pub fn new(mode: Mode<S>) -> Result<Self> {
        let spec = EnvSpec { mode, limit: DEFAULT_LIMIT };
        spec.validate()?;
        Ok(spec)
    }

    pub fn homogeneous(site: S) -> Self {
        Self::new(Mode::Homogeneous(site)).expect("homogeneous spec from a checked site")
    }

    pub fn with_limit(mut self, limit: i64) -> Self {
        self.limit = limit;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.limit < 1 {
            return Err(Error::config("materialization limit must be positive"));
        }
        let check_all = |sites: &[S]| -> Result<()> {
            if sites.is_empty() {
                return Err(Error::config("site list is empty"));
            }
            sites.iter().enumerate().try_for_each(|(i, s)| s.check(i as i64))
        };
        match &self.mode {
            Mode::Homogeneous(s) => s.check(0),
            Mode::Periodic(sites) | Mode::Explicit { sites, .. } => check_all(sites),
            Mode::Iid { sites, weights } => {
                check_all(sites)?;
                check_weights(weights, sites.len())
            }
            Mode::IidUniform { template, low, high } => {
                template.check(0)?;
                if !(low.is_finite() && high.is_finite() && *low > 0.0 && low < high) {
                    return Err(Error::config(format!("uniform bounds need 0 < low < high, got [{low}, {high}]")));
                }
                let mut probe = rng::stream(0, 0);
                if template.uniform_like(*low, *high, &mut probe).is_none() {
                    return Err(Error::config("uniform i.i.d. mode is not available for this site kind"));
                }
                Ok(())
            }
            Mode::Markov { sites, transition } => {
                check_all(sites)?;
                if transition.len() != sites.len() {
                    return Err(Error::config("transition matrix size must match the number of sites"));
                }
                transition.iter().try_for_each(|row| check_weights(row, sites.len()))
            }
            Mode::Growing { base, exponent } => {
                base.check(0)?;
                if !exponent.is_finite() {
                    return Err(Error::config("growth exponent must be finite"));
                }
                if base.scaled(1.0).is_none() {
                    return Err(Error::config("growing mode is not available for this site kind"));
                }
                Ok(())
            }
        }
    }

    /// True when different seeds give different environments.
    pub fn is_random(&self) -> bool {
        matches!(self.mode, Mode::Iid { .. } | Mode::IidUniform { .. } | Mode::Markov { .. })
    }

    /// Period of a deterministic stationary environment (1 for homogeneous).
    pub fn period(&self) -> Option<usize> {
        match &self.mode {
            Mode::Homogeneous(_) => Some(1),
            Mode::Periodic(sites) => Some(sites.len()),
            _ => None,
        }
    }

    /// Every site kind the law can produce, for modes with a finite catalog.
    pub fn catalog(&self) -> Option<&[S]> {
        match &self.mode {
            Mode::Homogeneous(s) => Some(std::slice::from_ref(s)),
            Mode::Periodic(sites) | Mode::Iid { sites, .. } | Mode::Markov { sites, .. } | Mode::Explicit { sites, .. } => Some(sites),
            Mode::IidUniform { .. } | Mode::Growing { .. } => None,
        }
    }
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::config(format!("expected {n} weights, got {}", weights.len())));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::config("weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("weights sum to {total}, expected 1")));
    }
    Ok(())
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut c: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    if let Some(last) = c.last_mut() {
        *last = f64::INFINITY;
    }
    c
}

fn pick(cdf: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Stationary law of a finite chain by power iteration on its lazy version.
fn stationary(transition: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = transition.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; n];
        for (i, row) in transition.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                next[j] += 0.5 * pi[i] * p;
            }
            next[i] += 0.5 * pi[i];
        }
        let change: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if change < 1e-15 {
            return Ok(pi);
        }
    }
    Err(Error::config("environment Markov chain has no unique stationary law"))
}

struct MarkovAux {
    initial: Vec<f64>,
    forward: Vec<Vec<f64>>,
    backward: Vec<Vec<f64>>,
}

impl MarkovAux {
    fn new(transition: &[Vec<f64>]) -> Result<Self> {
        let pi = stationary(transition)?;
        if pi.iter().any(|&p| p <= 0.0) {
            return Err(Error::config("environment Markov chain must be irreducible"));
        }
        let n = pi.len();
        let backward = (0..n).map(|i| cumulative(&(0..n).map(|j| pi[j] * transition[j][i] / pi[i]).collect::<Vec<_>>())).collect();
        Ok(MarkovAux { initial: cumulative(&pi), forward: transition.iter().map(|row| cumulative(row)).collect(), backward })
    }
}

/// Materialized sites `[lo, lo + sites.len())` in absolute coordinates.
#[derive(Debug)]
pub struct Window<S> {
    lo: i64,
    sites: Vec<Arc<S>>,
    states: Vec<usize>,
}

impl<S> Window<S> {
    fn hi(&self) -> i64 {
        self.lo + self.sites.len() as i64 - 1
    }
}

struct Inner<S> {
    spec: EnvSpec<S>,
    seed: u64,
    catalog: Vec<Arc<S>>,
    markov: Option<MarkovAux>,
    window: RwLock<Arc<Window<S>>>,
}

/// One realization of an environment law, materialized lazily per site and
/// memoized. Cloning and shifting share the memo.
///
/// Site `x` is a pure function of `(spec, seed, x)`, whatever order sites are
/// requested in.
pub struct Environment<S> {
    inner: Arc<Inner<S>>,
    origin: i64,
}

impl<S> Clone for Environment<S> {
    fn clone(&self) -> Self {
        Environment { inner: Arc::clone(&self.inner), origin: self.origin }
    }
}

impl<S: Site> std::fmt::Debug for Environment<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Environment")
            .field("mode", &self.inner.spec.mode)
            .field("seed", &self.inner.seed)
            .field("origin", &self.origin)
            .finish()
    }
}

impl<S: Site> Environment<S> {
    pub fn new(spec: EnvSpec<S>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let catalog = spec.catalog().map(|c| c.iter().cloned().map(Arc::new).collect()).unwrap_or_default();
        let markov = match &spec.mode {
            Mode::Markov { transition, .. } => Some(MarkovAux::new(transition)?),
            _ => None,
        };
        let first = match &spec.mode {
            Mode::Explicit { first, .. } => *first,
            _ => 0,
        };
        let mut inner = Inner {
            spec,
            seed,
            catalog,
            markov,
            window: RwLock::new(Arc::new(Window { lo: first, sites: Vec::new(), states: Vec::new() })),
        };
        let (site, state) = inner.generate(first, None, true);
        inner.window = RwLock::new(Arc::new(Window { lo: first, sites: vec![site], states: vec![state] }));
        Ok(Environment { inner: Arc::new(inner), origin: 0 })
    }

    pub fn spec(&self) -> &EnvSpec<S> {
        &self.inner.spec
    }

    pub fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Offset accumulated by [`Environment::shift`].
    pub fn origin(&self) -> i64 {
        self.origin
    }

    /// The shifted environment `theta^x`: its site `y` is site `y + x` here.
    pub fn shift(&self, x: i64) -> Environment<S> {
        Environment { inner: Arc::clone(&self.inner), origin: self.origin + x }
    }

    /// Site `x`, materializing it if needed.
    pub fn site(&self, x: i64) -> Result<Arc<S>> {
        let view = self.view(x, x)?;
        Ok(Arc::clone(view.get_arc(x).expect("materialized")))
    }

    /// Snapshot covering at least `[a, b]`.
    pub fn view(&self, a: i64, b: i64) -> Result<EnvView<S>> {
        let (a, b) = (a.min(b), a.max(b));
        let window = self.inner.ensure(a + self.origin, b + self.origin).map_err(|e| match e {
            Error::WindowExhausted { position, limit } => Error::WindowExhausted { position: position - self.origin, limit },
            other => other,
        })?;
        Ok(EnvView { window, origin: self.origin })
    }

    /// Cursor that extends its snapshot on demand.
    pub fn cursor(&self) -> SiteCursor<'_, S> {
        let window = Arc::clone(&self.inner.window.read().expect("window lock"));
        SiteCursor { env: self, view: EnvView { window, origin: self.origin } }
    }

    /// Sites `a..=b` as owned values.
    pub fn sites(&self, a: i64, b: i64) -> Result<Vec<S>> {
        let view = self.view(a, b)?;
        Ok((a..=b).map(|x| view.get(x).expect("materialized").clone()).collect())
    }
}

impl<S: Site> Inner<S> {
    fn generate(&self, x: i64, neighbor_state: Option<usize>, forward: bool) -> (Arc<S>, usize) {
        match &self.spec.mode {
            Mode::Homogeneous(_) => (Arc::clone(&self.catalog[0]), 0),
            Mode::Periodic(sites) => {
                let i = x.rem_euclid(sites.len() as i64) as usize;
                (Arc::clone(&self.catalog[i]), i)
            }
            Mode::Iid { weights, .. } => {
                let mut rng = rng::site_rng(self.seed, x);
                let i = pick(&cumulative(weights), &mut rng);
                (Arc::clone(&self.catalog[i]), i)
            }
            Mode::IidUniform { template, low, high } => {
                let mut rng = rng::site_rng(self.seed, x);
                let site = template.uniform_like(*low, *high, &mut rng).expect("validated");
                (Arc::new(site), 0)
            }
            Mode::Markov { .. } => {
                let aux = self.markov.as_ref().expect("markov aux");
                let mut rng = rng::site_rng(self.seed, x);
                let cdf = match neighbor_state {
                    None => &aux.initial,
                    Some(s) if forward => &aux.forward[s],
                    Some(s) => &aux.backward[s],
                };
                let i = pick(cdf, &mut rng);
                (Arc::clone(&self.catalog[i]), i)
            }
            Mode::Explicit { first, .. } => {
                let i = (x - first) as usize;
                (Arc::clone(&self.catalog[i]), i)
            }
            Mode::Growing { base, exponent } => {
                let factor = (1.0 + x.unsigned_abs() as f64).powf(*exponent);
                (Arc::new(base.scaled(factor).expect("validated")), 0)
            }
        }
    }

    fn bounds(&self) -> (i64, i64) {
        match &self.spec.mode {
            Mode::Explicit { first, sites } => (*first, first + sites.len() as i64 - 1),
            _ => (-self.spec.limit, self.spec.limit),
        }
    }

    /// Extends the memo to cover `[a, b]` (absolute coordinates).
    fn ensure(&self, a: i64, b: i64) -> Result<Arc<Window<S>>> {
        {
            let w = self.window.read().expect("window lock");
            if w.lo <= a && b <= w.hi() {
                return Ok(Arc::clone(&w));
            }
        }
        let (min, max) = self.bounds();
        if a < min {
            return Err(Error::WindowExhausted { position: a, limit: self.spec.limit });
        }
        if b > max {
            return Err(Error::WindowExhausted { position: b, limit: self.spec.limit });
        }
        let mut guard = self.window.write().expect("window lock");
        let cur = Arc::clone(&guard);
        if cur.lo <= a && b <= cur.hi() {
            return Ok(cur);
        }
        let grow = cur.sites.len().max(64) as i64;
        let new_lo = if a < cur.lo { a.min(cur.lo - grow).max(min) } else { cur.lo };
        let new_hi = if b > cur.hi() { b.max(cur.hi() + grow).min(max) } else { cur.hi() };

        let left_len = (cur.lo - new_lo) as usize;
        let mut left = Vec::with_capacity(left_len);
        let mut state = cur.states[0];
        for x in (new_lo..cur.lo).rev() {
            let (site, s) = self.generate(x, Some(state), false);
            state = s;
            left.push((site, s));
        }
        left.reverse();
        let mut sites = Vec::with_capacity((new_hi - new_lo + 1) as usize);
        let mut states = Vec::with_capacity(sites.capacity());
        for (site, s) in left {
            sites.push(site);
            states.push(s);
        }
        sites.extend(cur.sites.iter().cloned());
        states.extend(cur.states.iter().copied());
        let mut state = *cur.states.last().expect("nonempty window");
        for x in cur.hi() + 1..=new_hi {
            let (site, s) = self.generate(x, Some(state), true);
            state = s;
            sites.push(site);
            states.push(s);
        }
        let next = Arc::new(Window { lo: new_lo, sites, states });
        *guard = Arc::clone(&next);
        Ok(next)
    }
}

/// Immutable snapshot of materialized sites, indexed in the coordinates of
/// the environment it came from.
pub struct EnvView<S> {
    window: Arc<Window<S>>,
    origin: i64,
}

impl<S> EnvView<S> {
    #[inline]
    pub fn get(&self, x: i64) -> Option<&S> {
        self.get_arc(x).map(|a| a.as_ref())
    }

    #[inline]
    fn get_arc(&self, x: i64) -> Option<&Arc<S>> {
        let i = x + self.origin - self.window.lo;
        if i < 0 {
            return None;
        }
        self.window.sites.get(i as usize)
    }

    pub fn covers(&self, a: i64, b: i64) -> bool {
        self.get(a).is_some() && self.get(b).is_some()
    }
}

/// Site access that grows the underlying memo when a walk leaves the snapshot.
pub struct SiteCursor<'a, S> {
    env: &'a Environment<S>,
    view: EnvView<S>,
}

impl<S: Site> SiteCursor<'_, S> {
    #[inline]
    pub fn site(&mut self, x: i64) -> Result<&S> {
        if self.view.get(x).is_none() {
            self.view = self.env.view(x, x)?;
        }
        Ok(self.view.get(x).expect("materialized"))
    }
}

/// Materializes `[a, b]` of a fresh realization of `spec` keyed by `seed`.
pub fn sample_environment<S: Site>(spec: &EnvSpec<S>, seed: u64, window: (i64, i64)) -> Result<Environment<S>> {
    if window.0 > window.1 {
        return Err(Error::config(format!("empty window [{}, {}]", window.0, window.1)));
    }
    let env = Environment::new(spec.clone(), seed)?;
    env.view(window.0, window.1)?;
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::SiteRates;
    use proptest::prelude::*;

    fn rates(v: [f64; 4]) -> SiteRates {
        SiteRates::from_ordered(2, 2, &v).unwrap()
    }

    fn uniform_spec() -> EnvSpec<SiteRates> {
        EnvSpec::new(Mode::IidUniform { template: rates([1.0; 4]), low: 0.5, high: 3.0 }).unwrap()
    }

    #[test]
    fn homogeneous_sites_are_identical() {
        let env = sample_environment(&EnvSpec::homogeneous(rates([1.0, 1.0, 1.0, 2.0])), 99, (-5, 5)).unwrap();
        for s in env.sites(-5, 5).unwrap() {
            assert_eq!(s.ordered(), vec![1.0, 1.0, 1.0, 2.0]);
        }
    }

    #[test]
    fn periodic_sites_repeat() {
        let (a, b) = (rates([1.0; 4]), rates([2.0; 4]));
        let env = Environment::new(EnvSpec::new(Mode::Periodic(vec![a.clone(), b.clone()])).unwrap(), 0).unwrap();
        assert_eq!(*env.site(0).unwrap(), a);
        assert_eq!(*env.site(1).unwrap(), b);
        assert_eq!(*env.site(2).unwrap(), a);
        assert_eq!(*env.site(-1).unwrap(), b);
        let shifted = env.shift(2);
        assert_eq!(shifted.sites(-4, 4).unwrap(), env.sites(-4, 4).unwrap());
    }

    #[test]
    fn iid_is_deterministic_in_seed_and_window() {
        let spec = uniform_spec();
        let a = sample_environment(&spec, 7, (-5, 5)).unwrap().sites(-5, 5).unwrap();
        let b = sample_environment(&spec, 7, (-5, 5)).unwrap().sites(-5, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 11);
        // materializing a larger window first does not change the sites
        let c = sample_environment(&spec, 7, (-500, 300)).unwrap().sites(-5, 5).unwrap();
        assert_eq!(a, c);
        let d = sample_environment(&spec, 8, (-5, 5)).unwrap().sites(-5, 5).unwrap();
        assert_ne!(a, d);
        for s in &a {
            assert!(s.ordered().iter().all(|v| (0.5..=3.0).contains(v)));
        }
    }

    #[test]
    fn markov_sites_do_not_depend_on_growth_order() {
        let spec = EnvSpec::new(Mode::Markov {
            sites: vec![rates([1.0; 4]), rates([2.0; 4]), rates([3.0; 4])],
            transition: vec![vec![0.8, 0.1, 0.1], vec![0.3, 0.4, 0.3], vec![0.2, 0.2, 0.6]],
        })
        .unwrap();
        let one = Environment::new(spec.clone(), 3).unwrap();
        let reference = one.sites(-300, 300).unwrap();
        let two = Environment::new(spec, 3).unwrap();
        two.view(250, 260).unwrap();
        two.view(-20, -10).unwrap();
        two.view(-300, -299).unwrap();
        assert_eq!(two.sites(-300, 300).unwrap(), reference);
    }

    #[test]
    fn window_limit_is_enforced() {
        let spec = EnvSpec::homogeneous(rates([1.0; 4])).with_limit(100);
        let env = Environment::new(spec, 0).unwrap();
        assert!(env.view(-100, 100).is_ok());
        assert!(matches!(env.view(0, 101), Err(Error::WindowExhausted { .. })));
        let explicit = Environment::new(EnvSpec::new(Mode::Explicit { first: -1, sites: vec![rates([1.0; 4]); 3] }).unwrap(), 0).unwrap();
        assert!(explicit.view(-1, 1).is_ok());
        assert!(explicit.view(-2, 0).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(EnvSpec::new(Mode::Iid { sites: vec![rates([1.0; 4])], weights: vec![0.5] }).is_err());
        assert!(EnvSpec::new(Mode::IidUniform { template: rates([1.0; 4]), low: 3.0, high: 0.5 }).is_err());
        assert!(EnvSpec::<SiteRates>::new(Mode::Periodic(vec![])).is_err());
        assert!(sample_environment(&EnvSpec::homogeneous(rates([1.0; 4])), 0, (3, 2)).is_err());
    }

    #[test]
    fn concurrent_extension_is_consistent() {
        let env = Environment::new(uniform_spec(), 11).unwrap();
        let reference = Environment::new(uniform_spec(), 11).unwrap().sites(-2000, 2000).unwrap();
        std::thread::scope(|s| {
            for t in 0..8i64 {
                let env = env.clone();
                s.spawn(move || {
                    for k in 0..50 {
                        let x = (t * 97 + k * 31) % 2000 * if k % 2 == 0 { 1 } else { -1 };
                        env.view(x, x).unwrap();
                    }
                });
            }
        });
        assert_eq!(env.sites(-2000, 2000).unwrap(), reference);
    }

    proptest! {
        #[test]
        fn shift_group_law(a in -50i64..50, b in -50i64..50, seed in 0u64..1000) {
            let env = Environment::new(uniform_spec(), seed).unwrap();
            let ab = env.shift(a).shift(b);
            let direct = env.shift(a + b);
            prop_assert_eq!(ab.sites(-20, 20).unwrap(), direct.sites(-20, 20).unwrap());
            prop_assert_eq!(env.shift(a).shift(-a).sites(-5, 5).unwrap(), env.sites(-5, 5).unwrap());
            for y in -5..=5 {
                prop_assert_eq!(env.shift(a).site(y).unwrap(), env.site(y + a).unwrap());
            }
        }
    }
}
