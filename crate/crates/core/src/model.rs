//! Multi-layer perceptron with softmax cross-entropy and hand-written
//! backpropagation.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{BatchPlan, Dataset};
use crate::rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("layer dims must have at least two entries, all >= 1 (got {0:?})")]
    BadDims(Vec<usize>),
    #[error("expected {expected} sample weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("sample weights must be finite, non-negative and not all zero")]
    BadWeights,
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid optimizer config: {0}")]
    BadOptimizer(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Counts sample-gradient evaluations and forward-only passes separately.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostMeter {
    pub sample_grads: u64,
    pub forwards: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean cross-entropy in nats.
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// One affine map `x W + b`; `weights` is `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weights: Array2::zeros((fan_in, fan_out)), bias: Array1::zeros(fan_out) }
    }
}

/// Parameter-shaped tensors: used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

impl Gradient {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model.layers.iter().map(|l| Layer::zeros(l.weights.nrows(), l.weights.ncols())).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().chain(l.bias.iter()).map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// ReLU MLP; the final layer emits class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub dims: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Activations kept for backprop: `inputs[l]` feeds layer `l`, `pre[l]` is its
/// affine output.
struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

/// Row-wise log-softmax.
fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl MlpModel {
    /// Fan-in scaled uniform weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(ModelError::BadDims(dims.to_vec()));
        }
        let mut rng = rng::rng_from(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..bound)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { dims: dims.to_vec(), layers })
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn n_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(ModelError::Shape(format!(
                "model expects {} features, batch has {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, x: ArrayView2<f64>) -> ForwardCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weights) + &layer.bias;
            let next = if i + 1 < self.layers.len() { relu(&z) } else { z.clone() };
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        ForwardCache { inputs, pre }
    }

    /// Class logits for a batch.
    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weights) + &layer.bias;
            a = if i + 1 < self.layers.len() { relu(&z) } else { z };
        }
        a
    }

    /// Pre-activations of every hidden unit, row per sample.
    pub fn hidden_preactivations(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut cache = self.forward_cached(x);
        cache.pre.pop();
        cache.pre
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    /// Inverse of [`MlpModel::flatten`].
    pub fn from_flat(dims: &[usize], flat: &[f64]) -> Result<Self> {
        let mut model = Self::init(dims, 0)?;
        if flat.len() != model.n_params() {
            return Err(ModelError::Shape(format!(
                "{} parameters for dims {dims:?}, expected {}",
                flat.len(),
                model.n_params()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut model.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
        Ok(model)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

fn one_hot_residual(log_probs: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let mut d = log_probs.mapv(f64::exp);
    for (mut row, &y) in d.outer_iter_mut().zip(labels) {
        row[y] -= 1.0;
    }
    d
}

fn count_correct(logits: &Array2<f64>, labels: &[usize]) -> usize {
    logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.as_slice().expect("standard layout")) == y)
        .count()
}

/// Weighted mean cross-entropy `sum_j w_j CE_j / sum_j w_j` and its gradient.
pub fn loss_and_grad(
    model: &MlpModel,
    x: ArrayView2<f64>,
    labels: &[usize],
    weights: &[f64],
    meter: &mut CostMeter,
) -> Result<(LossReport, Gradient)> {
    model.check_input(&x)?;
    let n = x.nrows();
    if labels.len() != n || weights.len() != n {
        return Err(ModelError::WeightCount { expected: n, got: weights.len().min(labels.len()) });
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || total <= 0.0 {
        return Err(ModelError::BadWeights);
    }
    meter.sample_grads += n as u64;

    let cache = model.forward_cached(x);
    let logits = cache.pre.last().unwrap();
    let log_probs = log_softmax(logits);
    let loss = labels
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(j, (&y, &w))| -w * log_probs[[j, y]])
        .sum::<f64>()
        / total;

    let mut delta = one_hot_residual(&log_probs, labels);
    for (mut row, &w) in delta.outer_iter_mut().zip(weights) {
        row *= w / total;
    }

    let mut grads: Vec<Layer> = Vec::with_capacity(model.layers.len());
    for l in (0..model.layers.len()).rev() {
        let input = &cache.inputs[l];
        grads.push(Layer { weights: input.t().dot(&delta), bias: delta.sum_axis(Axis(0)) });
        if l > 0 {
            let mut back = delta.dot(&model.layers[l].weights.t());
            Zip::from(&mut back).and(&cache.pre[l - 1]).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            delta = back;
        }
    }
    grads.reverse();

    let report = LossReport { mean_loss: loss, accuracy: count_correct(logits, labels) as f64 / n as f64 };
    Ok((report, Gradient { layers: grads }))
}

const EVAL_CHUNK: usize = 1024;

/// Unweighted mean loss and top-1 accuracy over a dataset.
pub fn evaluate(model: &MlpModel, ds: &Dataset, meter: &mut CostMeter) -> Result<LossReport> {
    model.check_input(&ds.features.view())?;
    if ds.is_empty() {
        return Err(ModelError::Shape("cannot evaluate an empty dataset".into()));
    }
    meter.forwards += ds.len() as u64;
    let mut loss = 0.0;
    let mut correct = 0;
    for (start, chunk) in ds.features.axis_chunks_iter(Axis(0), EVAL_CHUNK).enumerate() {
        let labels = &ds.labels[start * EVAL_CHUNK..start * EVAL_CHUNK + chunk.nrows()];
        let logits = model.logits(chunk);
        let lp = log_softmax(&logits);
        loss -= labels.iter().enumerate().map(|(j, &y)| lp[[j, y]]).sum::<f64>();
        correct += count_correct(&logits, labels);
    }
    let n = ds.len() as f64;
    Ok(LossReport { mean_loss: loss / n, accuracy: correct as f64 / n })
}

/// Batch-summed loss gradients with respect to the final linear layer.
///
/// Each vector is the `h x C` weight gradient flattened row-major followed by
/// the `C` bias gradient. The second value is the full-data gradient, the
/// sum of all batch vectors.
pub fn per_batch_last_layer_gradients(
    model: &MlpModel,
    plan: &BatchPlan,
    ds: &Dataset,
    meter: &mut CostMeter,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    model.check_input(&ds.features.view())?;
    let last = model.layers.last().unwrap();
    let dim = last.weights.len() + last.bias.len();
    let mut full = vec![0.0; dim];
    let mut out = Vec::with_capacity(plan.n_batches());
    for batch in &plan.batches {
        let (x, y) = ds.gather(batch);
        meter.forwards += batch.len() as u64;
        let cache = model.forward_cached(x.view());
        let delta = one_hot_residual(&log_softmax(cache.pre.last().unwrap()), &y);
        let gw = cache.inputs.last().unwrap().t().dot(&delta);
        let gb = delta.sum_axis(Axis(0));
        let v: Vec<f64> = gw.iter().chain(gb.iter()).copied().collect();
        for (f, g) in full.iter_mut().zip(&v) {
            *f += g;
        }
        out.push(v);
    }
    Ok((out, full))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    None,
    /// `lr * (1 + cos(pi t / total_epochs)) / 2`
    Cosine { total_epochs: usize },
    /// `lr * gamma^floor(t / period)`
    Step { gamma: f64, period: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 5e-4,
            schedule: LrSchedule::None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::BadOptimizer(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0,1) and weight_decay >= 0");
        }
        match self.schedule {
            LrSchedule::Step { gamma, period } if !(gamma > 0.0 && gamma < 1.0) || period == 0 => {
                bad("step schedule needs gamma in (0,1) and period >= 1")
            }
            LrSchedule::Cosine { total_epochs: 0 } => bad("cosine schedule needs total_epochs >= 1"),
            _ => Ok(()),
        }
    }

    /// Learning rate in effect during epoch `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        match self.schedule {
            LrSchedule::None => self.lr,
            LrSchedule::Cosine { total_epochs } => {
                let t = t.min(total_epochs) as f64;
                self.lr * (1.0 + (PI * t / total_epochs as f64).cos()) / 2.0
            }
            LrSchedule::Step { gamma, period } => self.lr * gamma.powi((t / period) as i32),
        }
    }
}

/// Optimizer with its moment buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Option<Gradient>,
    second: Option<Gradient>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, first: None, second: None, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with the schedule's learning rate for epoch `epoch`.
    /// Weight decay is added to the gradient (L2 form).
    pub fn step(&mut self, model: &mut MlpModel, grad: &Gradient, epoch: usize) -> Result<()> {
        if grad.layers.len() != model.layers.len() {
            return Err(ModelError::Shape("gradient layer count differs from model".into()));
        }
        for (i, (g, p)) in grad.layers.iter().zip(&model.layers).enumerate() {
            if g.weights.dim() != p.weights.dim() || g.bias.dim() != p.bias.dim() {
                return Err(ModelError::Shape(format!("layer {i} gradient shape")));
            }
            if !g.weights.iter().chain(g.bias.iter()).all(|v| v.is_finite()) {
                return Err(ModelError::NonFiniteGradient { layer: i });
            }
        }
        let cfg = self.config;
        let lr = cfg.lr_at(epoch);
        self.steps += 1;
        let first = self.first.get_or_insert_with(|| Gradient::zeros_like(model));
        match cfg.kind {
            OptimizerKind::Sgd => {
                let mu = cfg.momentum;
                let update = |w: &mut f64, dg: f64, v: &mut f64| {
                    let d = dg + cfg.weight_decay * *w;
                    *v = mu * *v + d;
                    *w -= lr * if cfg.nesterov { d + mu * *v } else { *v };
                };
                for ((p, g), m) in model.layers.iter_mut().zip(&grad.layers).zip(&mut first.layers) {
                    Zip::from(&mut p.weights)
                        .and(&g.weights)
                        .and(&mut m.weights)
                        .for_each(|w, &dg, v| update(w, dg, v));
                    Zip::from(&mut p.bias).and(&g.bias).and(&mut m.bias).for_each(|w, &dg, v| update(w, dg, v));
                }
            }
            OptimizerKind::Adam => {
                let second = self.second.get_or_insert_with(|| Gradient::zeros_like(model));
                let (b1, b2) = (cfg.beta1, cfg.beta2);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for (((p, g), m), v) in model
                    .layers
                    .iter_mut()
                    .zip(&grad.layers)
                    .zip(&mut first.layers)
                    .zip(&mut second.layers)
                {
                    let update = |w: &mut f64, dg: f64, m: &mut f64, v: &mut f64| {
                        let d = dg + cfg.weight_decay * *w;
                        *m = b1 * *m + (1.0 - b1) * d;
                        *v = b2 * *v + (1.0 - b2) * d * d;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                    };
                    Zip::from(&mut p.weights)
                        .and(&g.weights)
                        .and(&mut m.weights)
                        .and(&mut v.weights)
                        .for_each(|w, &dg, m, v| update(w, dg, m, v));
                    Zip::from(&mut p.bias)
                        .and(&g.bias)
                        .and(&mut m.bias)
                        .and(&mut v.bias)
                        .for_each(|w, &dg, m, v| update(w, dg, m, v));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    dims: Vec<usize>,
    n_params: usize,
    dtype: String,
}

/// Writes `<prefix>.json` (shape header) and `<prefix>.bin` (little-endian
/// f64 parameters in [`MlpModel::flatten`] order).
pub fn save_checkpoint(model: &MlpModel, prefix: &Path) -> Result<()> {
    let err = |path: &Path, e: std::io::Error| ModelError::Checkpoint { path: path.into(), msg: e.to_string() };
    let header = CheckpointHeader { dims: model.dims.clone(), n_params: model.n_params(), dtype: "f64le".into() };
    let hp = prefix.with_extension("json");
    let bp = prefix.with_extension("bin");
    fs::write(&hp, serde_json::to_vec(&header).expect("header serializes")).map_err(|e| err(&hp, e))?;
    let body: Vec<u8> = model.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bp, body).map_err(|e| err(&bp, e))
}

pub fn load_checkpoint(prefix: &Path) -> Result<MlpModel> {
    let hp = prefix.with_extension("json");
    let bp = prefix.with_extension("bin");
    let err = |path: &Path, msg: String| ModelError::Checkpoint { path: path.into(), msg };
    let text = fs::read_to_string(&hp).map_err(|e| err(&hp, e.to_string()))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| err(&hp, e.to_string()))?;
    let body = fs::read(&bp).map_err(|e| err(&bp, e.to_string()))?;
    if header.dtype != "f64le" || body.len() != header.n_params * 8 {
        return Err(err(&bp, "size or dtype does not match header".into()));
    }
    let flat: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    MlpModel::from_flat(&header.dims, &flat)
}
