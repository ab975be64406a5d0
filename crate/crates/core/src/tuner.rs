//! End-to-end tuning: configurations from a searcher, epochs from a
//! scheduler, training on coresets, then one full-data training of the
//! winner.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::coreset::{self, Coreset, SelectionConfig, SelectionError, SelectionRecord, Strategy, STANDARD_FRACTIONS};
use crate::dataio::{self, BatchPlan, DataError, DataSplits, Standardizer};
use crate::model::{
    self, CostMeter, LossReport, LrSchedule, MlpModel, ModelError, Optimizer, OptimizerConfig, OptimizerKind,
};
use crate::rng::{self, Stream};
use crate::scheduler::{self, JobResult, SchedulerConfig, SchedulerError, SchedulerKind, TraceEvent, TrialRunner};
use crate::search::{ConfigSample, ObservationHistory, ParamSpace, ParamValue, SearchError, Searcher};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("all {n} trials failed; last trace event: {last}")]
    AllFailed { n: usize, last: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl TuneError {
    /// Whether the failure stems from the experiment description rather than the run.
    pub fn is_config_error(&self) -> bool {
        matches!(self, TuneError::Config(_) | TuneError::Search(_) | TuneError::Scheduler(_))
            || matches!(self, TuneError::Selection(SelectionError::Config(_)))
            || matches!(self, TuneError::Model(ModelError::BadOptimizer(_)))
    }
}

pub type Result<T> = std::result::Result<T, TuneError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TuneError + '_ {
    move |source| TuneError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: PathBuf,
    #[serde(default)]
    pub validation: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
    #[serde(default = "default_test_frac")]
    pub test_frac: f64,
    #[serde(default)]
    pub standardize: bool,
    /// Prefix of a binary cache written on first load.
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

fn default_val_frac() -> f64 {
    0.1
}

fn default_test_frac() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: Strategy,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Warm-start fraction; defaults to 0.35 under ASHA and 0 otherwise.
    #[serde(default)]
    pub kappa: Option<f64>,
    /// Start from a random subset and first select at epoch `R` instead of
    /// selecting right after warm start.
    #[serde(default)]
    pub random_initial_subset: bool,
}

fn default_fraction() -> f64 {
    0.1
}

fn default_epsilon() -> f64 {
    1e-10
}

impl StrategyConfig {
    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig { strategy: self.kind, fraction: self.fraction, lambda: self.lambda, epsilon: self.epsilon }
    }
}

/// Hyper-parameter values used when the space does not mention them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDefaults {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub h1: usize,
    pub h2: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub step_gamma: f64,
    pub step_period: usize,
}

impl Default for ModelDefaults {
    fn default() -> Self {
        Self {
            lr: 0.01,
            optimizer: OptimizerKind::Sgd,
            h1: 200,
            h2: 200,
            batch_size: 32,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 5e-4,
            step_gamma: 0.05,
            step_period: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `1 - accuracy` on the validation split.
    #[default]
    ValError,
    ValLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FractionPreset {
    /// 1%, 5%, 10% and 30%.
    #[serde(rename = "paper-fractions")]
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Fractions {
    Preset(FractionPreset),
    List(Vec<f64>),
}

impl Fractions {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Fractions::Preset(FractionPreset::Standard) => STANDARD_FRACTIONS.to_vec(),
            Fractions::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub strategies: Vec<Strategy>,
    pub fractions: Fractions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "ParamSpace::tabular")]
    pub space: ParamSpace,
    #[serde(default)]
    pub searcher: Searcher,
    pub scheduler: SchedulerConfig,
    pub n_configs: usize,
    pub strategy: StrategyConfig,
    /// `T`.
    pub epochs: usize,
    /// `R`.
    pub selection_interval: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub metric: Metric,
    #[serde(default)]
    pub model: ModelDefaults,
    #[serde(default)]
    pub compare: Option<CompareConfig>,
    /// Write `selections.jsonl` next to the report.
    #[serde(default)]
    pub selection_log: bool,
}

fn default_workers() -> usize {
    1
}

/// Sets `path` (dotted) inside `root` to `raw`, parsed as JSON when possible
/// and as a string otherwise. Missing objects along the path are created.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| TuneError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(TuneError::Config(format!("bad override path {path:?}")));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        if !node.is_object() {
            return Err(TuneError::Config(format!("override path {path:?} crosses a non-object")));
        }
        node = node.as_object_mut().unwrap().entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(TuneError::Config(format!("override path {path:?} crosses a non-object"))),
    }
}

impl ExperimentConfig {
    /// Parses a config, applying `overrides` in order (last one wins) and
    /// resolving relative dataset paths against `base`.
    pub fn from_json(text: &str, overrides: &[String], base: Option<&Path>) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| TuneError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| TuneError::Config(e.to_string()))?;
        if let Some(base) = base {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut cfg.dataset.train);
            cfg.dataset.validation.as_mut().map(fix);
            cfg.dataset.test.as_mut().map(fix);
            cfg.dataset.cache.as_mut().map(fix);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text, overrides, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TuneError::Config(m));
        self.space.validate()?;
        self.searcher.validate()?;
        self.scheduler.validate()?;
        self.strategy.selection().validate()?;
        if self.n_configs == 0 {
            return bad("n_configs must be >= 1".into());
        }
        if self.epochs == 0 || self.selection_interval == 0 || self.workers == 0 {
            return bad("epochs, selection_interval and workers must be >= 1".into());
        }
        if let Some(k) = self.strategy.kappa {
            if !(0.0..=1.0).contains(&k) {
                return bad(format!("kappa {k} not in [0, 1]"));
            }
        }
        if self.scheduler.max_resource > self.epochs {
            return bad(format!("scheduler R_max {} exceeds epochs {}", self.scheduler.max_resource, self.epochs));
        }
        if let Some(c) = &self.compare {
            if c.fractions.values().iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
                return bad("compare fractions must lie in (0, 1]".into());
            }
        }
        Ok(())
    }

    pub fn kappa(&self) -> f64 {
        self.strategy.kappa.unwrap_or(if self.scheduler.kind == SchedulerKind::Asha { 0.35 } else { 0.0 })
    }

    pub fn schedule(&self) -> TrialSchedule {
        TrialSchedule {
            total_epochs: self.epochs,
            selection_interval: self.selection_interval,
            warm_frac: self.kappa(),
            fraction: self.strategy.fraction,
        }
    }

    /// Same experiment under another strategy and fraction.
    pub fn with_strategy(&self, kind: Strategy, fraction: f64) -> Self {
        let mut c = self.clone();
        c.strategy.kind = kind;
        c.strategy.fraction = fraction;
        c
    }
}

pub fn load_data(cfg: &DatasetConfig, seed: u64) -> Result<DataSplits> {
    if let Some(prefix) = &cfg.cache {
        if prefix.with_extension("json").exists() {
            debug!("reading cache {}", prefix.display());
            return Ok(dataio::read_cache(prefix)?);
        }
    }
    let mut splits = dataio::load_splits(
        &cfg.train,
        cfg.validation.as_deref(),
        cfg.test.as_deref(),
        cfg.val_frac,
        cfg.test_frac,
        rng::stream_seed(seed, Stream::Split, &[]),
    )?;
    if cfg.standardize {
        Standardizer::apply_all(&mut splits);
    }
    if let Some(prefix) = &cfg.cache {
        dataio::write_cache(prefix, &splits)?;
    }
    Ok(splits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSchedule {
    /// `T`.
    pub total_epochs: usize,
    /// `R`.
    pub selection_interval: usize,
    /// `kappa`.
    pub warm_frac: f64,
    /// `k / N`.
    pub fraction: f64,
}

impl TrialSchedule {
    pub fn warmup_epochs(&self) -> usize {
        warmstart_epochs(self.warm_frac, self.total_epochs, self.fraction)
    }
}

/// `T_w = round(kappa T k / N)`, clamped to `[0, T]`.
pub fn warmstart_epochs(kappa: f64, total_epochs: usize, fraction: f64) -> usize {
    let tw = (kappa * total_epochs as f64 * fraction).round();
    (tw.max(0.0) as usize).min(total_epochs)
}

/// Optimizer and architecture for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSpec {
    pub dims: Vec<usize>,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

fn as_bool(v: &ParamValue) -> Option<bool> {
    match v {
        ParamValue::Str(s) => s.parse().ok(),
        ParamValue::Int(i) => Some(*i != 0),
        ParamValue::Float(_) => None,
    }
}

fn as_usize(c: &ConfigSample, name: &str, default: usize) -> Result<usize> {
    match c.get(name) {
        None => Ok(default),
        Some(ParamValue::Int(i)) if *i > 0 => Ok(*i as usize),
        Some(v) => Err(TuneError::Config(format!("{name} = {v} is not a positive integer"))),
    }
}

/// Maps a sampled configuration onto the MLP and its optimizer.
pub fn trial_spec(c: &ConfigSample, defaults: &ModelDefaults, input_dim: usize, n_classes: usize, epochs: usize) -> Result<TrialSpec> {
    let f = |name: &str, d: f64| c.f64(name).unwrap_or(d);
    let kind = match c.str("optimizer") {
        None => defaults.optimizer,
        Some("sgd") => OptimizerKind::Sgd,
        Some("adam") => OptimizerKind::Adam,
        Some(o) => return Err(TuneError::Config(format!("unknown optimizer {o:?}"))),
    };
    let step_gamma = f("step_gamma", defaults.step_gamma);
    let step_period = as_usize(c, "step_period", defaults.step_period)?;
    let schedule = match c.str("lr_schedule").unwrap_or("none") {
        "none" => LrSchedule::None,
        "cosine" => LrSchedule::Cosine { total_epochs: epochs },
        "step" => LrSchedule::Step { gamma: step_gamma, period: step_period },
        s => return Err(TuneError::Config(format!("unknown lr_schedule {s:?}"))),
    };
    let optimizer = OptimizerConfig {
        kind,
        lr: f("lr", defaults.lr),
        momentum: f("momentum", defaults.momentum),
        nesterov: c.get("nesterov").and_then(as_bool).unwrap_or(defaults.nesterov),
        weight_decay: f("weight_decay", defaults.weight_decay),
        schedule,
        ..OptimizerConfig::default()
    };
    optimizer.validate()?;
    Ok(TrialSpec {
        dims: vec![input_dim, as_usize(c, "h1", defaults.h1)?, as_usize(c, "h2", defaults.h2)?, n_classes],
        batch_size: as_usize(c, "batch_size", defaults.batch_size)?,
        optimizer,
    })
}

/// One configuration under evaluation.
#[derive(Debug, Clone)]
pub struct Trial {
    pub id: usize,
    pub config: ConfigSample,
    pub spec: TrialSpec,
    pub model: MlpModel,
    pub optimizer: Optimizer,
    pub epochs_done: usize,
    pub grants: Vec<usize>,
    pub last_eval: Option<f64>,
    pub meter: CostMeter,
    /// Forward-equivalent units charged for gradient-based selection.
    pub selection_units: u64,
    pub coreset: Option<(BatchPlan, Coreset)>,
    pub selection_epochs: Vec<usize>,
    pub selection_records: Vec<SelectionRecord>,
    pub failed: bool,
}

impl Trial {
    pub fn new(id: usize, config: ConfigSample, cfg: &ExperimentConfig, data: &DataSplits) -> Result<Self> {
        let spec = trial_spec(&config, &cfg.model, data.train.dim(), data.train.n_classes, cfg.epochs)?;
        let model = MlpModel::init(&spec.dims, rng::stream_seed(cfg.seed, Stream::Init, &[id as u64]))?;
        let optimizer = Optimizer::new(spec.optimizer)?;
        Ok(Self {
            id,
            config,
            spec,
            model,
            optimizer,
            epochs_done: 0,
            grants: Vec::new(),
            last_eval: None,
            meter: CostMeter::default(),
            selection_units: 0,
            coreset: None,
            selection_epochs: Vec::new(),
            selection_records: Vec::new(),
            failed: false,
        })
    }

    /// Sample-gradient evaluations plus selection charges.
    pub fn cost(&self) -> u64 {
        self.meter.sample_grads + self.selection_units
    }
}

/// Trains over `batches` in the given order, scaling each batch's mean-loss
/// gradient by its factor; zero-factor batches are skipped.
fn train_batches(
    model: &mut MlpModel,
    opt: &mut Optimizer,
    data: &DataSplits,
    batches: &[(&[usize], f64)],
    epoch: usize,
    meter: &mut CostMeter,
) -> Result<bool> {
    for &(batch, factor) in batches {
        if factor <= 0.0 {
            continue;
        }
        let (x, y) = data.train.gather(batch);
        let ones = vec![1.0; y.len()];
        let (report, mut grad) = model::loss_and_grad(model, x.view(), &y, &ones, meter)?;
        if !report.mean_loss.is_finite() {
            return Ok(false);
        }
        if factor != 1.0 {
            grad.scale(factor);
        }
        match opt.step(model, &grad, epoch) {
            Ok(()) => {}
            Err(ModelError::NonFiniteGradient { .. }) => return Ok(false),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(model.is_finite())
}

/// One full pass over the training data with a fresh shuffle.
fn full_epoch(trial: &mut Trial, cfg: &ExperimentConfig, data: &DataSplits, epoch: usize) -> Result<bool> {
    let plan = BatchPlan::new(
        data.train.len(),
        trial.spec.batch_size.min(data.train.len()),
        rng::stream_seed(cfg.seed, Stream::Batch, &[trial.id as u64, epoch as u64]),
    )?;
    let batches: Vec<(&[usize], f64)> = plan.batches.iter().map(|b| (b.as_slice(), 1.0)).collect();
    train_batches(&mut trial.model, &mut trial.optimizer, data, &batches, epoch, &mut trial.meter)
}

/// Picks a new coreset for `trial` at `epoch`.
fn reselect(trial: &mut Trial, cfg: &ExperimentConfig, data: &DataSplits, epoch: usize, random: bool) -> Result<()> {
    let n = data.train.len();
    let plan = BatchPlan::new(
        n,
        trial.spec.batch_size.min(n),
        rng::stream_seed(cfg.seed, Stream::Batch, &[trial.id as u64, epoch as u64, 1]),
    )?;
    let mut sel = cfg.strategy.selection();
    if random {
        sel.strategy = Strategy::Random;
    }
    let seed = rng::stream_seed(cfg.seed, Stream::Selection, &[trial.id as u64, epoch as u64]);
    let mut scratch = CostMeter::default();
    let cs = coreset::select_coreset(&trial.model, &data.train, &plan, &sel, seed, &mut scratch)?;
    trial.meter.forwards += scratch.forwards;
    if sel.strategy == Strategy::Gss {
        trial.selection_units += plan.n_batches() as u64;
    }
    trial.selection_epochs.push(epoch);
    if cfg.selection_log {
        trial.selection_records.push(SelectionRecord {
            trial: trial.id,
            epoch,
            selected: cs.batch_indices.clone(),
            weights: cs.weights.clone(),
            residual_norm: cs.residual_norm,
        });
    }
    trial.coreset = Some((plan, cs));
    Ok(())
}

/// Batch-level step multipliers `rho_l = w_l / mean sample weight`, so an
/// epoch over the coreset applies the same total sample weight as an
/// unweighted pass over the same samples.
pub fn step_factors(plan: &BatchPlan, cs: &Coreset) -> Vec<f64> {
    let sizes: Vec<f64> = cs.batch_indices.iter().map(|&b| plan.batches[b].len() as f64).collect();
    let mass: f64 = cs.weights.iter().zip(&sizes).map(|(w, s)| w * s).sum();
    let count: f64 = sizes.iter().sum();
    if mass <= 0.0 {
        return vec![0.0; sizes.len()];
    }
    cs.weights.iter().map(|w| w * count / mass).collect()
}

/// Trains `trial` until it has `target` epochs, then evaluates it on the
/// validation split. Returns the score (`+inf` when the trial diverged) and
/// the cost of this grant.
pub fn run_trial_grant(trial: &mut Trial, cfg: &ExperimentConfig, data: &DataSplits, target: usize) -> Result<(f64, u64)> {
    let before = trial.cost();
    let grant = target.saturating_sub(trial.epochs_done);
    trial.grants.push(grant);
    if trial.failed {
        return Ok((f64::INFINITY, 0));
    }
    let sched = cfg.schedule();
    let warm = sched.warmup_epochs();
    let r = sched.selection_interval;
    let full = cfg.strategy.kind == Strategy::Full;
    for t in trial.epochs_done..target {
        let ok = if full || t < warm {
            full_epoch(trial, cfg, data, t)?
        } else {
            if trial.coreset.is_none() {
                let literal_random = cfg.strategy.random_initial_subset && !(t % r == 0 && t > 0);
                reselect(trial, cfg, data, t, literal_random)?;
            } else if t % r == 0 {
                reselect(trial, cfg, data, t, false)?;
            }
            let (plan, cs) = trial.coreset.as_ref().expect("coreset just selected");
            let factors = step_factors(plan, cs);
            let mut order: Vec<(&[usize], f64)> =
                cs.batch_indices.iter().zip(factors).map(|(&b, f)| (plan.batches[b].as_slice(), f)).collect();
            order.shuffle(&mut rng::stream_rng(cfg.seed, Stream::Batch, &[trial.id as u64, t as u64, 2]));
            let order: Vec<(Vec<usize>, f64)> = order.into_iter().map(|(b, f)| (b.to_vec(), f)).collect();
            let refs: Vec<(&[usize], f64)> = order.iter().map(|(b, f)| (b.as_slice(), *f)).collect();
            train_batches(&mut trial.model, &mut trial.optimizer, data, &refs, t, &mut trial.meter)?
        };
        trial.epochs_done = t + 1;
        if !ok {
            trial.failed = true;
            break;
        }
    }
    let score = if trial.failed {
        f64::INFINITY
    } else {
        let rep = model::evaluate(&trial.model, &data.validation, &mut trial.meter)?;
        match cfg.metric {
            Metric::ValError => 1.0 - rep.accuracy,
            Metric::ValLoss => rep.mean_loss,
        }
    };
    trial.last_eval = Some(score);
    Ok((score, trial.cost() - before))
}

/// Runner handed to the virtual scheduler.
struct TuneRunner<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a DataSplits,
    trials: Vec<Trial>,
    history: ObservationHistory,
    error: Option<TuneError>,
}

impl TrialRunner for TuneRunner<'_> {
    fn spawn(&mut self, id: usize) {
        let config = self.cfg.searcher.suggest(&self.cfg.space, &self.history, id, self.cfg.seed);
        debug!("trial {id}: {:?}", config.values);
        match Trial::new(id, config, self.cfg, self.data) {
            Ok(t) => {
                debug_assert_eq!(self.trials.len(), id);
                self.trials.push(t);
            }
            Err(e) => panic!("trial {id} could not be built from a validated space: {e}"),
        }
    }

    fn run(&mut self, id: usize, epochs: usize) -> JobResult {
        if self.error.is_some() {
            return JobResult { score: f64::INFINITY, cost: 0.0 };
        }
        match run_trial_grant(&mut self.trials[id], self.cfg, self.data, epochs) {
            Ok((score, cost)) => JobResult { score, cost: cost as f64 },
            Err(e) => {
                self.error = Some(e);
                JobResult { score: f64::INFINITY, cost: 0.0 }
            }
        }
    }

    fn on_result(&mut self, id: usize, epochs: usize, score: f64) {
        self.history.push(self.trials[id].config.clone(), score, epochs as f64);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Sample gradients spent training trials.
    pub tuning_sample_grads: u64,
    pub selection_units: u64,
    pub final_train_sample_grads: u64,
    pub total: u64,
    /// Forward passes for evaluation and selection; not part of `total`.
    pub forwards: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub strategy: Strategy,
    pub fraction: f64,
    pub best_trial: usize,
    pub best_config: BTreeMap<String, ParamValue>,
    pub best_score: f64,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub cost: CostBreakdown,
    pub makespan: f64,
    pub n_trials: usize,
    pub n_failed: usize,
    /// `cost(full) / cost(this)`, filled in by comparisons.
    pub speedup: Option<f64>,
    /// Test error minus full-data tuning's, in percentage points.
    pub relative_test_error_pct: Option<f64>,
    pub config: ExperimentConfig,
}

/// One row of `trials.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: usize,
    pub bracket: usize,
    pub config: BTreeMap<String, ParamValue>,
    pub rung: usize,
    pub epochs: usize,
    pub eval: f64,
    pub cost: u64,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub report: TuneReport,
    pub trials: Vec<TrialRecord>,
    pub trace: Vec<TraceEvent>,
    pub selections: Vec<SelectionRecord>,
    /// Internal per-trial state, for inspection.
    pub trial_states: Vec<Trial>,
}

/// Trains `config` on all training data for `T` epochs and reports test
/// performance.
pub fn final_train(config: &ConfigSample, cfg: &ExperimentConfig, data: &DataSplits) -> Result<(MlpModel, LossReport, CostMeter)> {
    let final_id = u32::MAX as usize;
    let mut trial = Trial::new(final_id, config.clone(), cfg, data)?;
    for t in 0..cfg.epochs {
        if !full_epoch(&mut trial, cfg, data, t)? {
            info!("final training diverged at epoch {t}");
            break;
        }
    }
    let mut meter = trial.meter;
    let rep = if trial.model.is_finite() {
        model::evaluate(&trial.model, &data.test, &mut meter)?
    } else {
        LossReport { mean_loss: f64::INFINITY, accuracy: 0.0 }
    };
    Ok((trial.model, rep, meter))
}

pub fn tune(cfg: &ExperimentConfig) -> Result<TuneOutcome> {
    let data = load_data(&cfg.dataset, cfg.seed)?;
    tune_on(cfg, &data)
}

/// Runs the tuning loop on already loaded data.
pub fn tune_on(cfg: &ExperimentConfig, data: &DataSplits) -> Result<TuneOutcome> {
    cfg.validate()?;
    let mut runner = TuneRunner { cfg, data, trials: Vec::new(), history: ObservationHistory::new(), error: None };
    let ex = scheduler::run_virtual(&cfg.scheduler, cfg.n_configs, cfg.workers, &mut runner)?;
    if let Some(e) = runner.error.take() {
        return Err(e);
    }
    let best = ex.best().ok_or_else(|| TuneError::AllFailed {
        n: ex.trials.len(),
        last: ex.trace.last().map(|e| serde_json::to_string(e).unwrap_or_default()).unwrap_or_default(),
    })?;
    let best_trial = &runner.trials[best.id];
    info!("{} @ {}: best trial {} score {:.4}", cfg.strategy.kind.name(), cfg.strategy.fraction, best.id, best.score);

    let tuning: u64 = runner.trials.iter().map(|t| t.meter.sample_grads).sum();
    let selection: u64 = runner.trials.iter().map(|t| t.selection_units).sum();
    let mut forwards: u64 = runner.trials.iter().map(|t| t.meter.forwards).sum();
    let (test, final_grads) = if cfg.strategy.kind == Strategy::Full {
        let mut m = CostMeter::default();
        let rep = model::evaluate(&best_trial.model, &data.test, &mut m)?;
        forwards += m.forwards;
        (rep, 0)
    } else {
        let (_, rep, m) = final_train(&best_trial.config, cfg, data)?;
        forwards += m.forwards;
        (rep, m.sample_grads)
    };

    let trials: Vec<TrialRecord> = ex
        .trials
        .iter()
        .map(|s| TrialRecord {
            id: s.id,
            bracket: s.bracket,
            config: runner.trials[s.id].config.values.clone(),
            rung: s.rung,
            epochs: s.epochs,
            eval: s.score,
            cost: runner.trials[s.id].cost(),
            failed: s.failed,
        })
        .collect();
    let report = TuneReport {
        strategy: cfg.strategy.kind,
        fraction: if cfg.strategy.kind == Strategy::Full { 1.0 } else { cfg.strategy.fraction },
        best_trial: best.id,
        best_config: best_trial.config.values.clone(),
        best_score: best.score,
        final_test_accuracy: test.accuracy,
        final_test_loss: test.mean_loss,
        cost: CostBreakdown {
            tuning_sample_grads: tuning,
            selection_units: selection,
            final_train_sample_grads: final_grads,
            total: tuning + selection + final_grads,
            forwards,
        },
        makespan: ex.makespan,
        n_trials: ex.trials.len(),
        n_failed: ex.trials.iter().filter(|t| t.failed).count(),
        speedup: None,
        relative_test_error_pct: None,
        config: cfg.clone(),
    };
    Ok(TuneOutcome { report, trials, trace: ex.trace, selections: runner.trials.iter().flat_map(|t| t.selection_records.iter().cloned()).collect(), trial_states: runner.trials })
}

/// Fills `speedup` and `relative_test_error_pct` against a full-data run.
pub fn attach_baseline(report: &mut TuneReport, full: &TuneReport) {
    report.speedup = Some(full.cost.total as f64 / report.cost.total.max(1) as f64);
    report.relative_test_error_pct = Some(100.0 * (full.final_test_accuracy - report.final_test_accuracy));
}

/// Runs full-data tuning plus every requested (strategy, fraction) pair with
/// the same seed. The full run comes first.
pub fn compare_strategies(cfg: &ExperimentConfig, data: &DataSplits, strategies: &[Strategy], fractions: &[f64]) -> Result<Vec<TuneOutcome>> {
    if fractions.is_empty() || strategies.iter().all(|s| *s == Strategy::Full) {
        return Err(TuneError::Config("compare needs at least one subset strategy and fraction".into()));
    }
    let mut full = tune_on(&cfg.with_strategy(Strategy::Full, 1.0), data)?;
    let baseline = full.report.clone();
    attach_baseline(&mut full.report, &baseline);
    let mut out = vec![full];
    for &s in strategies.iter().filter(|s| **s != Strategy::Full) {
        for &f in fractions {
            let mut o = tune_on(&cfg.with_strategy(s, f), data)?;
            attach_baseline(&mut o.report, &baseline);
            out.push(o);
        }
    }
    Ok(out)
}

/// One row of `scatter.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub strategy: Strategy,
    pub fraction: f64,
    pub speedup: f64,
    pub relative_test_error_pct: f64,
}

pub fn scatter_rows(outcomes: &[TuneOutcome]) -> Vec<ScatterRow> {
    outcomes
        .iter()
        .map(|o| ScatterRow {
            strategy: o.report.strategy,
            fraction: o.report.fraction,
            speedup: o.report.speedup.unwrap_or(1.0),
            relative_test_error_pct: o.report.relative_test_error_pct.unwrap_or(0.0),
        })
        .collect()
}

/// Rows of the same strategy whose speedup does not grow as the fraction shrinks.
pub fn ordering_violations(rows: &[ScatterRow]) -> Vec<(Strategy, f64, f64)> {
    let mut out = Vec::new();
    for a in rows {
        for b in rows {
            if a.strategy == b.strategy && a.strategy != Strategy::Full && a.fraction < b.fraction && a.speedup < b.speedup {
                out.push((a.strategy, a.fraction, b.fraction));
            }
        }
    }
    out
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(io_err(path))
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> TuneError {
    TuneError::Format { path: path.to_path_buf(), msg: e.to_string() }
}

pub fn write_report(path: &Path, report: &TuneReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| format_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<TuneReport> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

fn value_cell(v: &ParamValue) -> String {
    match v {
        ParamValue::Float(x) => format!("{x:?}"),
        other => other.to_string(),
    }
}

fn parse_cell(s: &str) -> ParamValue {
    if let Ok(i) = s.parse::<i64>() {
        ParamValue::Int(i)
    } else if let Ok(x) = s.parse::<f64>() {
        ParamValue::Float(x)
    } else {
        ParamValue::Str(s.to_string())
    }
}

const TRIAL_FIXED: [&str; 2] = ["id", "bracket"];
const TRIAL_TAIL: [&str; 5] = ["rung", "epochs", "eval", "cost", "failed"];

pub fn write_trials_csv(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    let names: Vec<String> = trials.first().map(|t| t.config.keys().cloned().collect()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(create(path)?);
    let header: Vec<String> = TRIAL_FIXED
        .iter()
        .map(|s| s.to_string())
        .chain(names.iter().map(|n| format!("config.{n}")))
        .chain(TRIAL_TAIL.iter().map(|s| s.to_string()))
        .collect();
    w.write_record(&header).map_err(|e| format_err(path, e))?;
    for t in trials {
        let mut row = vec![t.id.to_string(), t.bracket.to_string()];
        row.extend(names.iter().map(|n| t.config.get(n).map(value_cell).unwrap_or_default()));
        row.extend([t.rung.to_string(), t.epochs.to_string(), format!("{:?}", t.eval), t.cost.to_string(), t.failed.to_string()]);
        w.write_record(&row).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_trials_csv(path: &Path) -> Result<Vec<TrialRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let header = r.headers().map_err(|e| format_err(path, e))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| format_err(path, format!("missing column {name}")));
    let idx: Vec<usize> = TRIAL_FIXED.iter().chain(TRIAL_TAIL.iter()).map(|n| col(n)).collect::<Result<_>>()?;
    let config_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix("config.").map(|n| (i, n.to_string())))
        .collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| format_err(path, e))?;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let num = |i: usize| get(i).parse::<u64>().map_err(|e| format_err(path, e));
        out.push(TrialRecord {
            id: num(0)? as usize,
            bracket: num(1)? as usize,
            config: config_cols.iter().map(|(i, n)| (n.clone(), parse_cell(rec.get(*i).unwrap_or("")))).collect(),
            rung: num(2)? as usize,
            epochs: num(3)? as usize,
            eval: get(4).parse().map_err(|e| format_err(path, e))?,
            cost: num(5)?,
            failed: get(6).parse().map_err(|e| format_err(path, e))?,
        });
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item).map_err(|e| format_err(path, e))?;
        f.write_all(b"\n").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(io_err(path))?;
            serde_json::from_str(&l).map_err(|e| format_err(path, e))
        })
        .collect()
}

pub fn write_scatter_csv(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| format_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_scatter_csv(path: &Path) -> Result<Vec<ScatterRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| format_err(path, e))).collect()
}

/// Writes `report.json`, `trials.csv`, `trace.jsonl` (and `selections.jsonl`
/// when enabled) into `dir`.
pub fn write_outcome(dir: &Path, outcome: &TuneOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_report(&dir.join("report.json"), &outcome.report)?;
    write_trials_csv(&dir.join("trials.csv"), &outcome.trials)?;
    write_jsonl(&dir.join("trace.jsonl"), &outcome.trace)?;
    if outcome.report.config.selection_log {
        write_jsonl(&dir.join("selections.jsonl"), &outcome.selections)?;
    }
    Ok(())
}
