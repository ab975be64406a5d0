//! Per-batch gradient matching.
//!
//! Given batch gradients `g_1..g_bN` and the full gradient `g = sum_l g_l`,
//! pick at most `b_k` batches and weights `w >= 0` minimizing
//! `||sum_l w_l g_l - g||^2 + lambda ||w||^2`. The greedy picker is
//! orthogonal matching pursuit; every refit is a non-negative least squares
//! solve by projected gradient.

use log::warn;
use ndarray::Array2;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{BatchPlan, Dataset};
use crate::model::{self, CostMeter, MlpModel, ModelError};
use crate::rng;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("invalid selection config: {0}")]
    Config(String),
    #[error("non-finite gradient for batch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SelectionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Gradient-based subset selection (OMP).
    Gss,
    Random,
    Full,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Gss => "gss",
            Strategy::Random => "random",
            Strategy::Full => "full",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gss" => Ok(Strategy::Gss),
            "random" => Ok(Strategy::Random),
            "full" => Ok(Strategy::Full),
            _ => Err(format!("unknown strategy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    /// `k / N`, in `(0, 1]`.
    pub fraction: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-10
}

/// Fractions used for the speedup/accuracy sweeps.
pub const STANDARD_FRACTIONS: [f64; 4] = [0.01, 0.05, 0.10, 0.30];

impl SelectionConfig {
    pub fn new(strategy: Strategy, fraction: f64) -> Self {
        Self { strategy, fraction, lambda: 0.0, epsilon: default_epsilon() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(SelectionError::Config(format!("fraction {} not in (0, 1]", self.fraction)));
        }
        if !(self.lambda >= 0.0 && self.epsilon >= 0.0) {
            return Err(SelectionError::Config("lambda and epsilon must be >= 0".into()));
        }
        Ok(())
    }

    /// `max(1, floor(fraction * b_N))`.
    pub fn batches_to_select(&self, n_batches: usize) -> usize {
        ((self.fraction * n_batches as f64 + 1e-9).floor() as usize).clamp(1, n_batches.max(1))
    }
}

/// Selected batches with their weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coreset {
    /// Indices into the [`BatchPlan`] the selection was made on.
    pub batch_indices: Vec<usize>,
    /// Training weights; for GSS they are calibrated so that
    /// `sum_l weights_l * |batch_l| = N`.
    pub weights: Vec<f64>,
    /// Weights of the gradient fit itself (before calibration).
    pub fit_weights: Vec<f64>,
    /// `||sum_l fit_weights_l g_l - g||_2`.
    pub residual_norm: f64,
    /// Fit objective after each greedy pick.
    #[serde(default)]
    pub objective_trace: Vec<f64>,
}

impl Coreset {
    pub fn len(&self) -> usize {
        self.batch_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch_indices.is_empty()
    }

    /// Samples covered by batches with positive weight.
    pub fn n_samples(&self, plan: &BatchPlan) -> usize {
        self.batch_indices
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&b, _)| plan.batches[b].len())
            .sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fit objective `||A w - b||^2 + lambda ||w||^2` evaluated directly.
pub fn fit_objective(columns: &[&[f64]], target: &[f64], weights: &[f64], lambda: f64) -> f64 {
    residual(columns, target, weights).iter().map(|r| r * r).sum::<f64>()
        + lambda * weights.iter().map(|w| w * w).sum::<f64>()
}

/// `A w - b`.
pub fn residual(columns: &[&[f64]], target: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = target.iter().map(|t| -t).collect();
    for (col, &w) in columns.iter().zip(weights) {
        if w != 0.0 {
            r.iter_mut().zip(col.iter()).for_each(|(ri, ci)| *ri += w * ci);
        }
    }
    r
}

pub const NNLS_MAX_ITER: usize = 10_000;
pub const NNLS_KKT_TOL: f64 = 1e-8;

/// NNLS in Gram form: minimize `w'Gw - 2c'w + lambda w'w` over `w >= 0`.
#[derive(Debug, Clone)]
struct GramProblem {
    gram: Array2<f64>,
    corr: Vec<f64>,
    lambda: f64,
}

impl GramProblem {
    fn from_columns(columns: &[&[f64]], target: &[f64], lambda: f64) -> Self {
        let m = columns.len();
        let gram = Array2::from_shape_fn((m, m), |(i, j)| dot(columns[i], columns[j]));
        let corr = columns.iter().map(|c| dot(c, target)).collect();
        Self { gram, corr, lambda }
    }

    fn m(&self) -> usize {
        self.corr.len()
    }

    /// Objective without the constant `||b||^2`.
    fn value(&self, w: &[f64]) -> f64 {
        let mut v = 0.0;
        for i in 0..self.m() {
            let gw: f64 = (0..self.m()).map(|j| self.gram[[i, j]] * w[j]).sum();
            v += w[i] * gw - 2.0 * self.corr[i] * w[i] + self.lambda * w[i] * w[i];
        }
        v
    }

    /// Half gradient `G w - c + lambda w`.
    fn half_grad(&self, w: &[f64], out: &mut [f64]) {
        for i in 0..self.m() {
            let gw: f64 = (0..self.m()).map(|j| self.gram[[i, j]] * w[j]).sum();
            out[i] = gw - self.corr[i] + self.lambda * w[i];
        }
    }

    /// Largest eigenvalue of the Gram matrix, never underestimated: power
    /// iteration padded by 0.1% and capped by the trace.
    fn lipschitz(&self) -> f64 {
        let m = self.m();
        let trace: f64 = (0..m).map(|i| self.gram[[i, i]]).sum();
        if m == 1 {
            return trace + self.lambda;
        }
        let mut v = vec![1.0 / (m as f64).sqrt(); m];
        let mut est = 0.0;
        for _ in 0..500 {
            let next: Vec<f64> = (0..m).map(|i| (0..m).map(|j| self.gram[[i, j]] * v[j]).sum()).collect();
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            let new_est = dot(&v, &next);
            v = next.into_iter().map(|x| x / norm).collect();
            if (new_est - est).abs() <= 1e-12 * new_est.abs() {
                est = new_est;
                break;
            }
            est = new_est;
        }
        (est * 1.001).min(trace).max(est) + self.lambda
    }

    fn kkt_violation(&self, w: &[f64], grad: &[f64]) -> f64 {
        w.iter()
            .zip(grad)
            .map(|(&wi, &gi)| if wi > 0.0 { gi.abs() } else { (-gi).max(0.0) })
            .fold(0.0, f64::max)
    }

    /// Solves `(G_PP + lambda I) w_P = c_P` on the positive support and keeps
    /// the result if it is feasible and not worse (up to rounding).
    fn polish(&self, w: &mut [f64]) {
        let support: Vec<usize> = (0..self.m()).filter(|&i| w[i] > 0.0).collect();
        if support.is_empty() {
            return;
        }
        let k = support.len();
        let mut a = Array2::from_shape_fn((k, k), |(i, j)| {
            self.gram[[support[i], support[j]]] + if i == j { self.lambda } else { 0.0 }
        });
        let mut rhs: Vec<f64> = support.iter().map(|&i| self.corr[i]).collect();
        let Some(sol) = solve_dense(&mut a, &mut rhs) else { return };
        if sol.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return;
        }
        let mut cand = vec![0.0; self.m()];
        support.iter().zip(&sol).for_each(|(&i, &x)| cand[i] = x);
        let (new, old) = (self.value(&cand), self.value(w));
        // the support solve is exact; allow for rounding in the comparison
        if new <= old + 1e-12 * (old.abs() + 1.0) {
            w.copy_from_slice(&cand);
        }
    }

    /// Projected gradient from `w`, step `1 / (||A||_2^2 + lambda)`; stops on
    /// KKT violation below tolerance (relative to `max(1, |c|_inf)`).
    fn solve_from(&self, w: &mut [f64]) -> usize {
        let m = self.m();
        let step = 1.0 / self.lipschitz();
        if !step.is_finite() {
            w.iter_mut().for_each(|x| *x = 0.0);
            return 0;
        }
        let tol = NNLS_KKT_TOL * self.corr.iter().fold(1.0f64, |a, c| a.max(c.abs()));
        let mut grad = vec![0.0; m];
        let mut iters = 0;
        while iters < NNLS_MAX_ITER {
            self.half_grad(w, &mut grad);
            if self.kkt_violation(w, &grad) <= tol {
                break;
            }
            for i in 0..m {
                w[i] = (w[i] - step * grad[i]).max(0.0);
            }
            iters += 1;
        }
        self.polish(w);
        iters
    }
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_dense(a: &mut Array2<f64>, b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))?;
        if a[[piv, col]].abs() <= 1e-12 * scale {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap([piv, k], [col, k]);
            }
            b.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[[row, col]] / a[[col, col]];
            for k in col..n {
                a[[row, k]] -= f * a[[col, k]];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[[i, k]] * x[k]).sum();
        x[i] = (b[i] - s) / a[[i, i]];
    }
    Some(x)
}

/// `argmin_{w >= 0} ||A w - b||^2 + lambda ||w||^2`, with `A` given by
/// columns. Always returns the best iterate.
pub fn nnls_solve(columns: &[&[f64]], target: &[f64], lambda: f64) -> Vec<f64> {
    assert!(!columns.is_empty(), "nnls_solve needs at least one column");
    let problem = GramProblem::from_columns(columns, target, lambda);
    let mut w = vec![0.0; columns.len()];
    problem.solve_from(&mut w);
    w
}

/// Greedy OMP over batch gradients.
///
/// Each round scores the unselected batches by the exact objective decrease a
/// single non-negative weight could buy against the current residual,
/// `max(0, g_j'r) / sqrt(||g_j||^2 + lambda)`, adds the best one (lowest index
/// on ties), refits all weights by NNLS warm-started from the previous
/// solution, and stops at `b_k` picks, when the objective drops to `epsilon`,
/// or when no batch correlates positively with the residual (the current fit
/// is then optimal over all batches).
pub fn omp_select(batch_grads: &[Vec<f64>], full_grad: &[f64], b_k: usize, lambda: f64, epsilon: f64) -> Result<Coreset> {
    for (i, g) in batch_grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) || g.len() != full_grad.len() {
            return Err(SelectionError::NonFinite(i));
        }
    }
    if b_k == 0 {
        return Err(SelectionError::Config("b_k must be at least 1".into()));
    }
    let b_n = batch_grads.len();
    let k = if b_k > b_n {
        warn!("b_k = {b_k} exceeds the {b_n} available batches; clamping");
        b_n
    } else {
        b_k
    };
    let target_sq = dot(full_grad, full_grad);
    let norms: Vec<f64> = batch_grads.iter().map(|g| dot(g, g)).collect();

    let mut selected: Vec<usize> = Vec::with_capacity(k);
    let mut weights: Vec<f64> = Vec::with_capacity(k);
    let mut objective = target_sq;
    let mut trace = Vec::with_capacity(k);
    let mut resid: Vec<f64> = full_grad.to_vec(); // g - A w

    while selected.len() < k && objective > epsilon {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..b_n {
            if selected.contains(&j) {
                continue;
            }
            let denom = (norms[j] + lambda).sqrt();
            if denom == 0.0 {
                continue;
            }
            let score = dot(&batch_grads[j], &resid) / denom;
            if score > 0.0 && best.is_none_or(|(_, s)| score > s) {
                best = Some((j, score));
            }
        }
        let Some((pick, _)) = best else { break };
        selected.push(pick);
        weights.push(0.0);

        let cols: Vec<&[f64]> = selected.iter().map(|&i| batch_grads[i].as_slice()).collect();
        let problem = GramProblem::from_columns(&cols, full_grad, lambda);
        let previous = weights.clone();
        problem.solve_from(&mut weights);
        let mut value = problem.value(&weights) + target_sq;
        let prev_value = problem.value(&previous) + target_sq;
        if value > prev_value {
            weights = previous;
            value = prev_value;
        }
        objective = value.max(0.0);
        trace.push(objective);
        resid = residual(&cols, full_grad, &weights).iter().map(|r| -r).collect();
    }

    let residual_norm = dot(&resid, &resid).sqrt();
    Ok(Coreset {
        batch_indices: selected,
        weights: weights.clone(),
        fit_weights: weights,
        residual_norm,
        objective_trace: trace,
    })
}

/// Rescales weights so `sum_l w_l |batch_l| = n`.
fn calibrate(coreset: &mut Coreset, plan: &BatchPlan, n: usize) {
    let mass: f64 = coreset
        .batch_indices
        .iter()
        .zip(&coreset.fit_weights)
        .map(|(&b, &w)| w * plan.batches[b].len() as f64)
        .sum();
    if mass > 0.0 {
        let s = n as f64 / mass;
        coreset.weights = coreset.fit_weights.iter().map(|w| w * s).collect();
    }
}

/// Picks a coreset of batches from `plan` according to `cfg`.
pub fn select_coreset(
    model: &MlpModel,
    ds: &Dataset,
    plan: &BatchPlan,
    cfg: &SelectionConfig,
    seed: u64,
    meter: &mut CostMeter,
) -> Result<Coreset> {
    cfg.validate()?;
    let b_n = plan.n_batches();
    let b_k = cfg.batches_to_select(b_n);
    match cfg.strategy {
        Strategy::Full => Ok(Coreset {
            batch_indices: (0..b_n).collect(),
            weights: vec![1.0; b_n],
            fit_weights: vec![1.0; b_n],
            residual_norm: 0.0,
            objective_trace: Vec::new(),
        }),
        Strategy::Random => {
            let mut picks = index::sample(&mut rng::rng_from(seed), b_n, b_k).into_vec();
            picks.sort_unstable();
            let (grads, full) = model::per_batch_last_layer_gradients(model, plan, ds, meter)?;
            let cols: Vec<&[f64]> = picks.iter().map(|&i| grads[i].as_slice()).collect();
            let ones = vec![1.0; b_k];
            let r = residual(&cols, &full, &ones);
            Ok(Coreset {
                batch_indices: picks,
                weights: ones.clone(),
                fit_weights: ones,
                residual_norm: dot(&r, &r).sqrt(),
                objective_trace: Vec::new(),
            })
        }
        Strategy::Gss => {
            let (grads, full) = model::per_batch_last_layer_gradients(model, plan, ds, meter)?;
            let mut coreset = omp_select(&grads, &full, b_k, cfg.lambda, cfg.epsilon)?;
            if coreset.is_empty() {
                // zero gradient everywhere: nothing to match, fall back to the first batch
                coreset.batch_indices = vec![0];
                coreset.fit_weights = vec![1.0];
                coreset.weights = vec![1.0];
            }
            calibrate(&mut coreset, plan, ds.len());
            Ok(coreset)
        }
    }
}

/// One line of the optional selection log (JSONL).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub trial: usize,
    pub epoch: usize,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub residual_norm: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::SplitTag;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, prop_oneof, proptest, Just};
    use proptest::strategy::Strategy as _;

    fn cols(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn nnls_clips_negative_coordinate() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let w = nnls_solve(&cols(&a), &[3.0, -1.0], 0.0);
        assert!((w[0] - 3.0).abs() < 1e-9 && w[1] == 0.0, "{w:?}");
    }

    #[test]
    fn nnls_exact_single_column() {
        let a = vec![vec![0.3, -1.2, 2.0]];
        let w = nnls_solve(&cols(&a), &a[0].clone(), 0.0);
        assert!((w[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nnls_ridge_single_column_closed_form() {
        let a = vec![vec![1.0, 2.0]];
        // w = c / (||a||^2 + lambda) = 5 / 6
        let w = nnls_solve(&cols(&a), &[1.0, 2.0], 1.0);
        assert!((w[0] - 5.0 / 6.0).abs() < 1e-12);
    }

    /// Every C(4,2) pair, each fitted by the exact 2x2 normal equations.
    #[test]
    fn omp_hits_exhaustive_pair_optimum() {
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        let full = [3.0, 2.0];
        let cs = omp_select(&g, &full, 2, 0.0, 1e-10).unwrap();
        let omp_obj = cs.residual_norm.powi(2);
        let mut best = f64::INFINITY;
        for i in 0..4 {
            for j in i + 1..4 {
                let w = nnls_solve(&[g[i].as_slice(), g[j].as_slice()], &full, 0.0);
                best = best.min(fit_objective(&[g[i].as_slice(), g[j].as_slice()], &full, &w, 0.0));
            }
        }
        assert!(best.abs() < 1e-12);
        assert!(omp_obj <= best + 1e-12);
        assert!(cs.len() <= 2);
    }

    #[test]
    fn omp_single_batch_identity() {
        let g = vec![vec![0.4, -0.7, 1.1]];
        let cs = omp_select(&g, &g[0].clone(), 1, 0.0, 1e-10).unwrap();
        assert_eq!(cs.batch_indices, vec![0]);
        assert!((cs.fit_weights[0] - 1.0).abs() < 1e-9);
        assert!(cs.residual_norm <= 1e-8);
    }

    #[test]
    fn omp_clamps_b_k() {
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let cs = omp_select(&g, &[1.0, 1.0], 5, 0.0, 1e-10).unwrap();
        assert_eq!(cs.len(), 2);
        assert!(cs.residual_norm < 1e-9);
    }

    #[test]
    fn batches_to_select_rule() {
        let c = SelectionConfig::new(Strategy::Gss, 0.1);
        assert_eq!(c.batches_to_select(50), 5);
        assert_eq!(c.batches_to_select(5), 1);
        assert_eq!(SelectionConfig::new(Strategy::Gss, 0.3).batches_to_select(10), 3);
        assert_eq!(SelectionConfig::new(Strategy::Gss, 1.0).batches_to_select(44), 44);
        assert!(SelectionConfig::new(Strategy::Gss, 0.0).validate().is_err());
        assert!(SelectionConfig::new(Strategy::Gss, 1.5).validate().is_err());
    }

    fn toy_data(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut r = rng::rng_from(seed);
        let x = Array2::from_shape_simple_fn((n, 4), || r.random_range(-1.0..1.0));
        let y = (0..n).map(|i| i % 3).collect();
        Dataset::new(x, y, 3, SplitTag::Train).unwrap()
    }

    #[test]
    fn full_and_random_strategies() {
        let ds = toy_data(100, 1);
        let model = MlpModel::init(&[4, 6, 3], 2).unwrap();
        let plan = BatchPlan::new(100, 2, 3).unwrap();
        let mut m = CostMeter::default();
        let full = select_coreset(&model, &ds, &plan, &SelectionConfig::new(Strategy::Full, 0.1), 0, &mut m).unwrap();
        assert_eq!(full.batch_indices, (0..50).collect::<Vec<_>>());
        assert!(full.weights.iter().all(|&w| w == 1.0));
        assert_eq!(full.residual_norm, 0.0);

        let cfg = SelectionConfig::new(Strategy::Random, 0.1);
        let a = select_coreset(&model, &ds, &plan, &cfg, 42, &mut m).unwrap();
        let b = select_coreset(&model, &ds, &plan, &cfg, 42, &mut m).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert!(a.weights.iter().all(|&w| w == 1.0));
        assert!(a.residual_norm > 0.0);
    }

    #[test]
    fn gss_weights_are_calibrated_to_n() {
        let ds = toy_data(90, 4);
        let model = MlpModel::init(&[4, 6, 3], 5).unwrap();
        let plan = BatchPlan::new(90, 20, 6).unwrap();
        let cs = select_coreset(&model, &ds, &plan, &SelectionConfig::new(Strategy::Gss, 0.5), 0, &mut CostMeter::default())
            .unwrap();
        assert!(cs.len() <= 2);
        let mass: f64 = cs.batch_indices.iter().zip(&cs.weights).map(|(&b, &w)| w * plan.batches[b].len() as f64).sum();
        assert!((mass - 90.0).abs() < 1e-9);

        let (grads, full) = model::per_batch_last_layer_gradients(&model, &plan, &ds, &mut CostMeter::default()).unwrap();
        let sel: Vec<&[f64]> = cs.batch_indices.iter().map(|&i| grads[i].as_slice()).collect();
        let r = residual(&sel, &full, &cs.fit_weights);
        assert!((dot(&r, &r).sqrt() - cs.residual_norm).abs() <= 1e-8);
    }

    /// A batch whose gradient is exactly the mean direction wins the first pick.
    #[test]
    fn mean_gradient_batch_is_picked_first() {
        let mut grads = vec![vec![3.0, -1.0, 0.5], vec![-0.5, 2.0, 1.0], vec![0.2, 0.2, -3.0], vec![4.0, 0.0, 1.0]];
        let full: Vec<f64> = (0..3).map(|k| grads.iter().map(|g| g[k]).sum()).collect();
        grads.push(full.iter().map(|v| v / 5.0).collect());
        let full: Vec<f64> = (0..3).map(|k| grads.iter().map(|g| g[k]).sum()).collect();
        let cs = omp_select(&grads, &full, 2, 0.0, 1e-10).unwrap();
        assert_eq!(cs.batch_indices[0], 4);
    }

    type Instance = (Vec<Vec<f64>>, Vec<f64>, bool);

    fn grads_strategy() -> impl proptest::strategy::Strategy<Value = Instance> {
        (1usize..=8, 1usize..=4).prop_flat_map(|(bn, dim)| {
            (
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), bn),
                prop::collection::vec(-1.0f64..1.0, dim),
                any::<bool>(),
            )
        })
    }

    proptest! {
        #[test]
        fn omp_objective_never_increases((grads, noise, summed) in grads_strategy(), b_k in 1usize..=3, lambda in prop_oneof![Just(0.0), 0.0f64..0.5]) {
            let full: Vec<f64> = if summed {
                (0..noise.len()).map(|k| grads.iter().map(|g| g[k]).sum::<f64>()).collect()
            } else { noise.clone() };
            let cs = omp_select(&grads, &full, b_k, lambda, 1e-10).unwrap();
            let mut prev = dot(&full, &full);
            for &o in &cs.objective_trace {
                prop_assert!(o <= prev + 1e-12 * prev.max(1.0));
                prev = o;
            }
            prop_assert!(cs.fit_weights.iter().all(|&w| w >= 0.0));
            prop_assert!(cs.len() <= b_k);
            let mut idx = cs.batch_indices.clone();
            idx.dedup();
            prop_assert_eq!(idx.len(), cs.len());
        }

        /// With one pick the refit is exactly the best single-batch fit.
        #[test]
        fn omp_first_pick_is_best_single_batch((grads, noise, _s) in grads_strategy(), lambda in prop_oneof![Just(0.0), 0.0f64..0.5]) {
            let cs = omp_select(&grads, &noise, 1, lambda, 1e-10).unwrap();
            let omp = cs.objective_trace.last().copied().unwrap_or(dot(&noise, &noise));
            let best = grads.iter().map(|g| {
                let c = dot(g, &noise).max(0.0);
                let w = if c > 0.0 { c / (dot(g, g) + lambda) } else { 0.0 };
                fit_objective(&[g.as_slice()], &noise, &[w], lambda)
            }).fold(dot(&noise, &noise), f64::min);
            prop_assert!(omp <= best * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn larger_lambda_shrinks_weights(
            cols_v in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..4),
            target in prop::collection::vec(-2.0f64..2.0, 4),
            lambda in 0.01f64..1.0,
        ) {
            let c = cols(&cols_v);
            let n = |w: &[f64]| dot(w, w).sqrt();
            let w0 = nnls_solve(&c, &target, 0.0);
            let w1 = nnls_solve(&c, &target, lambda);
            let w2 = nnls_solve(&c, &target, 2.0 * lambda);
            prop_assert!(n(&w2) <= n(&w1) * (1.0 + 1e-6) + 1e-9);
            let max = |w: &[f64]| w.iter().cloned().fold(0.0, f64::max);
            prop_assert!(max(&w1) <= max(&w0) * (1.0 + 1e-6) + 1e-9);
        }
    }
}
