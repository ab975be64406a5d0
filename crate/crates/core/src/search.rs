//! Hyper-parameter spaces and the two searchers: random search and TPE.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("invalid domain {name:?}: {msg}")]
    Domain { name: String, msg: String },
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("number of configurations must be at least 1")]
    NoConfigs,
    #[error("invalid searcher settings: {0}")]
    Searcher(String),
}

pub type Result<T> = std::result::Result<T, SearchError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Choice { values: Vec<String> },
    IntChoice { values: Vec<i64> },
}

impl Domain {
    fn validate(&self, name: &str) -> Result<()> {
        let err = |msg: &str| Err(SearchError::Domain { name: name.into(), msg: msg.into() });
        match self {
            Domain::Uniform { lo, hi } | Domain::LogUniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return err("need finite lo < hi");
                }
                if matches!(self, Domain::LogUniform { .. }) && *lo <= 0.0 {
                    return err("log_uniform needs lo > 0");
                }
            }
            Domain::Choice { values } if values.is_empty() => return err("empty choice list"),
            Domain::IntChoice { values } if values.is_empty() => return err("empty choice list"),
            _ => {}
        }
        Ok(())
    }

    pub fn contains(&self, v: &ParamValue) -> bool {
        match (self, v) {
            (Domain::Uniform { lo, hi } | Domain::LogUniform { lo, hi }, ParamValue::Float(x)) => lo <= x && x <= hi,
            (Domain::Choice { values }, ParamValue::Str(s)) => values.contains(s),
            (Domain::IntChoice { values }, ParamValue::Int(i)) => values.contains(i),
            _ => false,
        }
    }

    /// Continuous domains map to the space the density lives in.
    fn to_unit(&self, x: f64) -> f64 {
        match self {
            Domain::LogUniform { .. } => x.ln(),
            _ => x,
        }
    }

    fn bounds(&self) -> Option<(f64, f64)> {
        match *self {
            Domain::Uniform { lo, hi } => Some((lo, hi)),
            Domain::LogUniform { lo, hi } => Some((lo.ln(), hi.ln())),
            _ => None,
        }
    }

    fn arity(&self) -> usize {
        match self {
            Domain::Choice { values } => values.len(),
            Domain::IntChoice { values } => values.len(),
            _ => 0,
        }
    }

    fn from_unit(&self, u: f64) -> ParamValue {
        match *self {
            Domain::Uniform { lo, hi } => ParamValue::Float(u.clamp(lo, hi)),
            Domain::LogUniform { lo, hi } => ParamValue::Float(u.exp().clamp(lo, hi)),
            _ => unreachable!("continuous domains only"),
        }
    }

    fn arm(&self, i: usize) -> ParamValue {
        match self {
            Domain::Choice { values } => ParamValue::Str(values[i].clone()),
            Domain::IntChoice { values } => ParamValue::Int(values[i]),
            _ => unreachable!("categorical domains only"),
        }
    }

    fn arm_index(&self, v: &ParamValue) -> Option<usize> {
        match (self, v) {
            (Domain::Choice { values }, ParamValue::Str(s)) => values.iter().position(|x| x == s),
            (Domain::IntChoice { values }, ParamValue::Int(i)) => values.iter().position(|x| x == i),
            _ => None,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> ParamValue {
        match self.bounds() {
            Some((lo, hi)) => self.from_unit(rng.random_range(lo..hi)),
            None => self.arm(rng.random_range(0..self.arity())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            ParamValue::Float(x) => Some(x),
            ParamValue::Int(i) => Some(i as f64),
            ParamValue::Str(_) => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Float(x) => write!(f, "{x}"),
            ParamValue::Str(s) => f.write_str(s),
        }
    }
}

/// Named domains, kept in name order.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
#[serde(transparent)]
pub struct ParamSpace {
    pub domains: BTreeMap<String, Domain>,
}

impl<'de> Deserialize<'de> for ParamSpace {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct SpaceVisitor;
        impl<'de> Visitor<'de> for SpaceVisitor {
            type Value = ParamSpace;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of parameter names to domains")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<ParamSpace, A::Error> {
                let mut domains = BTreeMap::new();
                while let Some((name, dom)) = map.next_entry::<String, Domain>()? {
                    if domains.contains_key(&name) {
                        return Err(serde::de::Error::custom(SearchError::DuplicateName(name)));
                    }
                    domains.insert(name, dom);
                }
                Ok(ParamSpace { domains })
            }
        }
        d.deserialize_map(SpaceVisitor)
    }
}

impl ParamSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, domain: Domain) -> Result<Self> {
        domain.validate(name)?;
        if self.domains.insert(name.to_string(), domain).is_some() {
            return Err(SearchError::DuplicateName(name.into()));
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.domains.iter().try_for_each(|(n, d)| d.validate(n))
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    /// True when every domain is assigned a value inside it and nothing else is.
    pub fn contains(&self, c: &ConfigSample) -> bool {
        c.values.len() == self.domains.len()
            && self.domains.iter().all(|(n, d)| c.values.get(n).is_some_and(|v| d.contains(v)))
    }

    /// The MLP search space for tabular data.
    pub fn tabular() -> Self {
        let sizes = vec![150, 200, 250, 300];
        Self::new()
            .with("lr", Domain::LogUniform { lo: 0.001, hi: 0.01 })
            .and_then(|s| s.with("optimizer", Domain::Choice { values: vec!["adam".into(), "sgd".into()] }))
            .and_then(|s| {
                s.with("lr_schedule", Domain::Choice { values: vec!["none".into(), "cosine".into(), "step".into()] })
            })
            .and_then(|s| s.with("h1", Domain::IntChoice { values: sizes.clone() }))
            .and_then(|s| s.with("h2", Domain::IntChoice { values: sizes }))
            .and_then(|s| s.with("batch_size", Domain::IntChoice { values: vec![16, 32, 64] }))
            .expect("preset space is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Random,
    /// TPE before enough observations exist (or with nothing to rank).
    TpePrior,
    /// TPE candidate maximizing the density ratio.
    TpeEi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSample {
    pub values: BTreeMap<String, ParamValue>,
    pub provenance: Provenance,
}

impl ConfigSample {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.values.get(name)
    }

    pub fn f64(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(ParamValue::as_f64)
    }

    pub fn int(&self, name: &str) -> Option<i64> {
        match self.get(name)? {
            ParamValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn str(&self, name: &str) -> Option<&str> {
        match self.get(name)? {
            ParamValue::Str(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub config: ConfigSample,
    /// Minimized.
    pub score: f64,
    pub resource: f64,
}

/// Append-only list of finished evaluations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationHistory {
    observations: Vec<Observation>,
}

impl ObservationHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Non-finite scores (failed trials) are not recorded; returns whether the
    /// observation was kept.
    pub fn push(&mut self, config: ConfigSample, score: f64, resource: f64) -> bool {
        if !score.is_finite() {
            return false;
        }
        self.observations.push(Observation { config, score, resource });
        true
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }
}

/// History shared between concurrently finishing trials.
#[derive(Debug, Clone, Default)]
pub struct SharedHistory(Arc<RwLock<ObservationHistory>>);

impl SharedHistory {
    pub fn push(&self, config: ConfigSample, score: f64, resource: f64) -> bool {
        self.0.write().expect("history lock poisoned").push(config, score, resource)
    }

    pub fn snapshot(&self) -> ObservationHistory {
        self.0.read().expect("history lock poisoned").clone()
    }
}

pub fn sample_random(space: &ParamSpace, seed: u64) -> ConfigSample {
    let mut r = rng::rng_from(seed);
    let values = space.domains.iter().map(|(n, d)| (n.clone(), d.sample(&mut r))).collect();
    ConfigSample { values, provenance: Provenance::Random }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeConfig {
    /// Fraction of observations forming the good group.
    pub gamma: f64,
    pub n_candidates: usize,
    /// Below this many observations suggestions are random.
    pub min_obs: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self { gamma: 0.25, n_candidates: 24, min_obs: 10 }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || self.n_candidates == 0 {
            return Err(SearchError::Searcher("need gamma in (0, 1] and n_candidates >= 1".into()));
        }
        Ok(())
    }
}

/// `ceil(gamma * n)`, the size of the good group.
pub fn good_group_size(n: usize, gamma: f64) -> usize {
    ((gamma * n as f64) - 1e-12).ceil().max(0.0) as usize
}

/// Observation indices split into (good, rest) by score, ties by position.
pub fn split_history(history: &ObservationHistory, gamma: f64) -> (Vec<usize>, Vec<usize>) {
    let obs = history.observations();
    let mut order: Vec<usize> = (0..obs.len()).collect();
    order.sort_by(|&a, &b| obs[a].score.total_cmp(&obs[b].score).then(a.cmp(&b)));
    let n_good = good_group_size(obs.len(), gamma).min(obs.len());
    let rest = order.split_off(n_good);
    (order, rest)
}

/// Mixture of Gaussian kernels plus a uniform prior component in the
/// (possibly log-transformed) coordinate of a continuous domain.
struct Kde {
    centers: Vec<f64>,
    bandwidths: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl Kde {
    /// Each kernel is as wide as the larger gap to its neighbours (domain
    /// ends count as neighbours), clipped to `[width / min(100, n + 1), width]`.
    /// The lower clip never drops below 1% of the width.
    fn fit(points: Vec<f64>, lo: f64, hi: f64) -> Self {
        let width = hi - lo;
        let min_bw = width / (points.len() as f64 + 1.0).min(100.0);
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a].total_cmp(&points[b]));
        let mut bandwidths = vec![0.0; points.len()];
        for (k, &i) in order.iter().enumerate() {
            let left = if k == 0 { points[i] - lo } else { points[i] - points[order[k - 1]] };
            let right = if k + 1 == order.len() { hi - points[i] } else { points[order[k + 1]] - points[i] };
            bandwidths[i] = left.max(right).clamp(min_bw, width);
        }
        Self { centers: points, bandwidths, lo, hi }
    }

    fn weight(&self) -> f64 {
        1.0 / (self.centers.len() as f64 + 1.0)
    }

    fn density(&self, u: f64) -> f64 {
        let w = self.weight();
        let kernels: f64 = self
            .centers
            .iter()
            .zip(&self.bandwidths)
            .map(|(c, h)| (-0.5 * ((u - c) / h).powi(2)).exp() / (h * (2.0 * std::f64::consts::PI).sqrt()))
            .sum();
        w * (kernels + 1.0 / (self.hi - self.lo))
    }

    fn sample(&self, r: &mut ChaCha8Rng) -> f64 {
        let k = r.random_range(0..=self.centers.len());
        if k == self.centers.len() {
            return r.random_range(self.lo..self.hi);
        }
        let normal = Normal::new(self.centers[k], self.bandwidths[k]).expect("positive bandwidth");
        for _ in 0..64 {
            let u = normal.sample(r);
            if (self.lo..=self.hi).contains(&u) {
                return u;
            }
        }
        self.centers[k].clamp(self.lo, self.hi)
    }
}

/// Laplace-smoothed mass function over the arms of a categorical domain.
fn categorical_mass(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + counts.len() as f64;
    counts.iter().map(|c| (c + 1.0) / total).collect()
}

enum Density {
    Continuous { good: Kde, rest: Kde },
    Categorical { good: Vec<f64>, rest: Vec<f64> },
}

/// Suggests one configuration. With fewer than `min_obs` observations, or
/// when every score is equal, the draw is `sample_random(space, seed)`.
pub fn tpe_suggest(space: &ParamSpace, history: &ObservationHistory, cfg: &TpeConfig, seed: u64) -> ConfigSample {
    let obs = history.observations();
    let all_equal = obs.windows(2).all(|w| w[0].score == w[1].score);
    if obs.len() < cfg.min_obs.max(1) || all_equal {
        return ConfigSample { provenance: Provenance::TpePrior, ..sample_random(space, seed) };
    }
    let (good, rest) = split_history(history, cfg.gamma);

    let densities: Vec<(&String, &Domain, Density)> = space
        .domains
        .iter()
        .map(|(name, dom)| {
            let dens = match dom.bounds() {
                Some((lo, hi)) => {
                    let pts = |idx: &[usize]| {
                        idx.iter().filter_map(|&i| obs[i].config.f64(name)).map(|x| dom.to_unit(x)).collect()
                    };
                    Density::Continuous { good: Kde::fit(pts(&good), lo, hi), rest: Kde::fit(pts(&rest), lo, hi) }
                }
                None => {
                    let counts = |idx: &[usize]| {
                        let mut c = vec![0.0; dom.arity()];
                        for &i in idx {
                            if let Some(a) = obs[i].config.get(name).and_then(|v| dom.arm_index(v)) {
                                c[a] += 1.0;
                            }
                        }
                        c
                    };
                    Density::Categorical { good: categorical_mass(&counts(&good)), rest: categorical_mass(&counts(&rest)) }
                }
            };
            (name, dom, dens)
        })
        .collect();

    let mut r = rng::rng_from(seed);
    let mut best: Option<(f64, BTreeMap<String, ParamValue>)> = None;
    for _ in 0..cfg.n_candidates {
        let mut values = BTreeMap::new();
        let mut score = 0.0;
        for (name, dom, dens) in &densities {
            match dens {
                Density::Continuous { good, rest } => {
                    let u = good.sample(&mut r);
                    score += good.density(u).ln() - rest.density(u).ln();
                    values.insert((*name).clone(), dom.from_unit(u));
                }
                Density::Categorical { good, rest } => {
                    let a = sample_index(good, &mut r);
                    score += good[a].ln() - rest[a].ln();
                    values.insert((*name).clone(), dom.arm(a));
                }
            }
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, values));
        }
    }
    let (_, values) = best.expect("n_candidates >= 1");
    ConfigSample { values, provenance: Provenance::TpeEi }
}

fn sample_index(p: &[f64], r: &mut ChaCha8Rng) -> usize {
    let x: f64 = r.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if x < acc {
            return i;
        }
    }
    p.len() - 1
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Searcher {
    #[default]
    Random,
    Tpe(#[serde(default)] TpeConfig),
}

impl Searcher {
    pub fn name(&self) -> &'static str {
        match self {
            Searcher::Random => "random",
            Searcher::Tpe(_) => "tpe",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Searcher::Random => Ok(()),
            Searcher::Tpe(c) => c.validate(),
        }
    }

    /// The `index`-th suggestion of a run seeded with `seed`. Random search and
    /// TPE's startup phase draw identical configurations for the same index.
    pub fn suggest(&self, space: &ParamSpace, history: &ObservationHistory, index: usize, seed: u64) -> ConfigSample {
        let s = rng::stream_seed(seed, Stream::Searcher, &[index as u64]);
        match self {
            Searcher::Random => sample_random(space, s),
            Searcher::Tpe(cfg) => tpe_suggest(space, history, cfg, s),
        }
    }
}

/// Draws `n` configurations in order, asking `history` for the observations
/// available before each draw.
pub fn generate_configs(
    space: &ParamSpace,
    n: usize,
    searcher: &Searcher,
    seed: u64,
    mut history: impl FnMut(usize) -> ObservationHistory,
) -> Result<Vec<ConfigSample>> {
    if n == 0 {
        return Err(SearchError::NoConfigs);
    }
    space.validate()?;
    searcher.validate()?;
    Ok((0..n).map(|i| searcher.suggest(space, &history(i), i, seed)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lr_space() -> ParamSpace {
        ParamSpace::new().with("lr", Domain::LogUniform { lo: 0.001, hi: 0.01 }).unwrap()
    }

    #[test]
    fn json_shape_and_validation() {
        let s: ParamSpace = serde_json::from_str(
            r#"{"lr":{"kind":"log_uniform","lo":0.001,"hi":0.01},"opt":{"kind":"choice","values":["adam","sgd"]}}"#,
        )
        .unwrap();
        assert_eq!(s.len(), 2);
        s.validate().unwrap();
        let dup = serde_json::from_str::<ParamSpace>(
            r#"{"a":{"kind":"uniform","lo":0,"hi":1},"a":{"kind":"uniform","lo":0,"hi":2}}"#,
        );
        assert!(dup.unwrap_err().to_string().contains("duplicate"));
        let bad: ParamSpace = serde_json::from_str(r#"{"a":{"kind":"uniform","lo":1,"hi":1}}"#).unwrap();
        assert!(bad.validate().is_err());
        assert!(ParamSpace::new().with("c", Domain::Choice { values: vec![] }).is_err());
        assert!(ParamSpace::new().with("l", Domain::LogUniform { lo: 0.0, hi: 1.0 }).is_err());
    }

    #[test]
    fn random_draws_are_seeded() {
        let space = ParamSpace::tabular();
        assert_eq!(sample_random(&space, 9), sample_random(&space, 9));
        assert_ne!(sample_random(&space, 9), sample_random(&space, 10));
        assert!(space.contains(&sample_random(&space, 3)));
    }

    #[test]
    fn good_group_sizes() {
        assert_eq!(good_group_size(8, 0.25), 2);
        assert_eq!(good_group_size(30, 0.25), 8);
        assert_eq!(good_group_size(1, 0.25), 1);
        assert_eq!(good_group_size(4, 1.0), 4);
    }

    #[test]
    fn empty_history_falls_back_to_prior() {
        let c = tpe_suggest(&lr_space(), &ObservationHistory::new(), &TpeConfig::default(), 5);
        assert_eq!(c.provenance, Provenance::TpePrior);
        assert_eq!(c.values, sample_random(&lr_space(), 5).values);
    }

    #[test]
    fn kernel_widths_follow_neighbour_gaps() {
        let k = Kde::fit(vec![0.25, 0.2, 0.9], 0.0, 1.0);
        assert_eq!(k.bandwidths, vec![0.65, 0.25, 0.65]);
        // coincident points hit the lower clip, never below 1% of the width
        let k = Kde::fit(vec![0.5; 300], 0.0, 2.0);
        assert_eq!(k.bandwidths.iter().filter(|&&h| h == 0.02).count(), 298);
        assert_eq!(k.bandwidths.iter().copied().fold(f64::INFINITY, f64::min), 0.02);
        let k = Kde::fit(vec![0.5, 0.5], 0.0, 1.0);
        assert_eq!(k.bandwidths, vec![0.5, 0.5]);
    }

    #[test]
    fn tpe_concentrates_near_the_optimum() {
        let space = ParamSpace::new().with("x", Domain::Uniform { lo: 0.0, hi: 1.0 }).unwrap();
        let mut h = ObservationHistory::new();
        for i in 0..30 {
            let c = sample_random(&space, 1000 + i);
            let x = c.f64("x").unwrap();
            h.push(c, (x - 0.2).powi(2), 1.0);
        }
        let cfg = TpeConfig::default();
        let hits = (0..200)
            .filter(|&i| {
                let c = tpe_suggest(&space, &h, &cfg, i);
                assert_eq!(c.provenance, Provenance::TpeEi);
                (0.1..=0.3).contains(&c.f64("x").unwrap())
            })
            .count();
        assert!(hits as f64 / 200.0 >= 2.0 * 0.2, "{hits}/200");
    }

    #[test]
    fn generate_configs_counts() {
        let space = ParamSpace::tabular();
        assert_eq!(generate_configs(&space, 0, &Searcher::Random, 1, |_| ObservationHistory::new()), Err(SearchError::NoConfigs));
        let one = generate_configs(&space, 1, &Searcher::Random, 1, |_| ObservationHistory::new()).unwrap();
        assert_eq!(one.len(), 1);
        let c27 = generate_configs(&space, 27, &Searcher::Random, 1, |_| ObservationHistory::new()).unwrap();
        let distinct: std::collections::HashSet<String> = c27.iter().map(|c| serde_json::to_string(&c.values).unwrap()).collect();
        assert_eq!(distinct.len(), 27);
        let c54 = generate_configs(&space, 54, &Searcher::Tpe(TpeConfig::default()), 1, |_| ObservationHistory::new()).unwrap();
        assert_eq!(c54.len(), 54);
        // TPE's startup phase matches random search draw for draw.
        assert!(c54.iter().zip(&c27).all(|(a, b)| a.values == b.values));
    }

    #[test]
    fn non_finite_scores_are_dropped() {
        let mut h = ObservationHistory::new();
        assert!(!h.push(sample_random(&lr_space(), 0), f64::INFINITY, 1.0));
        assert!(h.push(sample_random(&lr_space(), 0), 0.5, 1.0));
        assert_eq!(h.len(), 1);
        let shared = SharedHistory::default();
        shared.push(sample_random(&lr_space(), 1), 0.1, 1.0);
        assert_eq!(shared.snapshot().len(), 1);
    }

    proptest! {
        #[test]
        fn every_suggestion_stays_in_its_domain(seed in any::<u64>(), n_obs in 0usize..25, tpe in any::<bool>()) {
            let space = ParamSpace::tabular()
                .with("u", Domain::Uniform { lo: -3.0, hi: -2.5 }).unwrap();
            let mut h = ObservationHistory::new();
            for i in 0..n_obs {
                let c = sample_random(&space, seed ^ (i as u64 + 1));
                h.push(c, (i * 7 % 5) as f64, 1.0);
            }
            let searcher = if tpe { Searcher::Tpe(TpeConfig { min_obs: 3, ..TpeConfig::default() }) } else { Searcher::Random };
            for i in 0..5 {
                prop_assert!(space.contains(&searcher.suggest(&space, &h, i, seed)));
            }
        }

        #[test]
        fn split_sizes_follow_gamma(n in 1usize..60, gamma in 0.01f64..=1.0) {
            let mut h = ObservationHistory::new();
            for i in 0..n {
                h.push(sample_random(&lr_space(), i as u64), ((i * 31) % 17) as f64, 1.0);
            }
            let (good, rest) = split_history(&h, gamma);
            prop_assert_eq!(good.len(), (gamma * n as f64 - 1e-12).ceil() as usize);
            prop_assert_eq!(rest.len(), n - good.len());
            let worst_good = good.iter().map(|&i| h.observations()[i].score).fold(f64::MIN, f64::max);
            prop_assert!(rest.iter().all(|&i| h.observations()[i].score >= worst_good));
        }
    }
}
