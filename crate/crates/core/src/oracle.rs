//! Brute-force cross-checks of the numerical kernels and schedulers.
//!
//! Each suite draws seeded random instances, solves them with the library
//! and with an independent, deliberately naive method, and counts agreement.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coreset::{self, fit_objective};
use crate::model::{self, CostMeter, MlpModel};
use crate::rng::{self, Stream};
use crate::scheduler::{self, JobResult, SchedulerConfig, SchedulerKind, TrialRunner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Omp,
    Nnls,
    Hyperband,
    Asha,
    Gradient,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Omp, Suite::Nnls, Suite::Hyperband, Suite::Asha, Suite::Gradient];

    pub fn default_instances(self) -> usize {
        match self {
            Suite::Omp => 200,
            Suite::Nnls => 100,
            Suite::Hyperband => 12,
            Suite::Asha => 50,
            Suite::Gradient => 50,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Suite::Omp => "omp",
            Suite::Nnls => "nnls",
            Suite::Hyperband => "hyperband",
            Suite::Asha => "asha",
            Suite::Gradient => "gradient",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| format!("unknown suite {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub instances: usize,
    pub passed: usize,
    /// Worst disagreement observed (suite-specific units).
    pub max_error: f64,
    /// Hash of every generated instance; equal seeds give equal fingerprints.
    pub fingerprint: u64,
    /// Up to five failing instances, described.
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.passed == self.instances
    }
}

/// Folds numbers into a running hash.
#[derive(Default)]
struct Fingerprint(u64);

impl Fingerprint {
    fn add(&mut self, xs: impl IntoIterator<Item = f64>) {
        for x in xs {
            self.0 = rng::derive(self.0, &[x.to_bits()]);
        }
    }
}

struct Tally {
    report: SuiteReport,
    fp: Fingerprint,
}

impl Tally {
    fn new(suite: Suite) -> Self {
        Self {
            report: SuiteReport { suite, instances: 0, passed: 0, max_error: 0.0, fingerprint: 0, failures: Vec::new() },
            fp: Fingerprint::default(),
        }
    }

    fn record(&mut self, ok: bool, err: f64, describe: impl FnOnce() -> String) {
        self.report.instances += 1;
        if ok {
            self.report.passed += 1;
        } else if self.report.failures.len() < 5 {
            self.report.failures.push(describe());
        }
        if err.is_nan() || err > self.report.max_error {
            self.report.max_error = err;
        }
    }

    fn finish(mut self) -> SuiteReport {
        self.report.fingerprint = self.fp.0;
        self.report
    }
}

pub fn run_suite(suite: Suite, instances: Option<usize>, seed: u64) -> SuiteReport {
    let n = instances.unwrap_or(suite.default_instances());
    let mut r = rng::stream_rng(seed, Stream::Oracle, &[suite as u64]);
    match suite {
        Suite::Omp => omp_suite(n, &mut r),
        Suite::Nnls => nnls_suite(n, &mut r),
        Suite::Hyperband => hyperband_suite(n),
        Suite::Asha => asha_suite(n, &mut r),
        Suite::Gradient => gradient_suite(n, &mut r),
    }
}

/// Least squares on a support by Gaussian elimination; `None` if singular.
fn support_ls(cols: &[&[f64]], target: &[f64], lambda: f64) -> Option<Vec<f64>> {
    let k = cols.len();
    let mut m: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            let mut row: Vec<f64> = (0..k)
                .map(|j| cols[i].iter().zip(cols[j]).map(|(a, b)| a * b).sum::<f64>() + if i == j { lambda } else { 0.0 })
                .collect();
            row.push(cols[i].iter().zip(target).map(|(a, b)| a * b).sum());
            row
        })
        .collect();
    for c in 0..k {
        let p = (c..k).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))?;
        if m[p][c].abs() < 1e-10 {
            return None;
        }
        m.swap(p, c);
        for r in 0..k {
            if r != c {
                let f = m[r][c] / m[c][c];
                for j in c..=k {
                    m[r][j] -= f * m[c][j];
                }
            }
        }
    }
    Some((0..k).map(|i| m[i][k] / m[i][i]).collect())
}

/// Global optimum of `min_{w >= 0} ||A w - b||^2 + lambda ||w||^2` by
/// enumerating supports whose unconstrained fit is non-negative.
pub fn exhaustive_nnls(cols: &[&[f64]], target: &[f64], lambda: f64) -> f64 {
    let m = cols.len();
    let mut best: f64 = target.iter().map(|t| t * t).sum();
    for mask in 1u32..(1 << m) {
        let idx: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        let sub: Vec<&[f64]> = idx.iter().map(|&i| cols[i]).collect();
        if let Some(w) = support_ls(&sub, target, lambda) {
            if w.iter().all(|&x| x >= 0.0) {
                best = best.min(fit_objective(&sub, target, &w, lambda));
            }
        }
    }
    best
}

fn omp_suite(n: usize, r: &mut ChaCha8Rng) -> SuiteReport {
    let mut t = Tally::new(Suite::Omp);
    for i in 0..n {
        let b_n = r.random_range(1..=8);
        let dim = r.random_range(1..=4);
        let grads: Vec<Vec<f64>> = (0..b_n).map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let full: Vec<f64> = if i % 2 == 0 {
            (0..dim).map(|k| grads.iter().map(|g| g[k]).sum()).collect()
        } else {
            (0..dim).map(|_| r.random_range(-2.0..2.0)).collect()
        };
        let lambda = if r.random_bool(0.5) { 0.0 } else { r.random_range(0.0..0.5) };
        t.fp.add(grads.iter().flatten().copied().chain(full.iter().copied()).chain([lambda]));

        let cols: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let cs = coreset::omp_select(&grads, &full, b_n, lambda, 1e-10).expect("finite instance");
        let omp = fit_objective(
            &cs.batch_indices.iter().map(|&j| cols[j]).collect::<Vec<_>>(),
            &full,
            &cs.fit_weights,
            lambda,
        );
        let opt = exhaustive_nnls(&cols, &full, lambda);
        let gap = (omp - opt).abs();
        let mut prev = full.iter().map(|x| x * x).sum::<f64>();
        let mut monotone = true;
        for &o in &cs.objective_trace {
            monotone &= o <= prev + 1e-12 * prev.max(1.0);
            prev = o;
        }
        let nonneg = cs.fit_weights.iter().all(|&w| w >= 0.0);
        t.record(gap <= 1e-6 && monotone && nonneg, gap, || {
            format!("instance {i}: b_N={b_n} dim={dim} lambda={lambda:.3} omp={omp:.3e} opt={opt:.3e} monotone={monotone}")
        });
    }
    t.finish()
}

fn nnls_suite(n: usize, r: &mut ChaCha8Rng) -> SuiteReport {
    const STEP: f64 = 1e-3;
    const LAMBDA: f64 = 0.1;
    let mut t = Tally::new(Suite::Nnls);
    for i in 0..n {
        // well-scaled 3x2 system whose optimum lies inside the grid box
        let (a, b) = loop {
            let a: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| r.random_range(-0.5..0.5)).collect()).collect();
            let b: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let cols: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
            let w = coreset::nnls_solve(&cols, &b, LAMBDA);
            if w.iter().all(|&x| x < 4.5) {
                break (a, b);
            }
        };
        t.fp.add(a.iter().flatten().copied().chain(b.iter().copied()));
        let cols: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
        let w = coreset::nnls_solve(&cols, &b, LAMBDA);
        let pg = fit_objective(&cols, &b, &w, LAMBDA);

        // quadratic form of the objective, scanned on the grid
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let (g11, g12, g22) = (dot(&a[0], &a[0]) + LAMBDA, dot(&a[0], &a[1]), dot(&a[1], &a[1]) + LAMBDA);
        let (c1, c2, bb) = (dot(&a[0], &b), dot(&a[1], &b), dot(&b, &b));
        let steps = (5.0 / STEP).round() as usize;
        let mut grid = f64::INFINITY;
        for p in 0..=steps {
            let x = p as f64 * STEP;
            let base = g11 * x * x - 2.0 * c1 * x + bb;
            let lin = 2.0 * g12 * x - 2.0 * c2;
            for q in 0..=steps {
                let y = q as f64 * STEP;
                let v = base + y * (lin + g22 * y);
                if v < grid {
                    grid = v;
                }
            }
        }
        let gap = (pg - grid).abs();
        t.record(gap <= 1e-6, gap, || format!("instance {i}: pg={pg:.9} grid={grid:.9} w={w:?}"));
    }
    t.finish()
}

/// Hyperband table computed in floating point, straight from the formulas.
pub fn hyperband_closed_form(max_resource: usize, eta: usize) -> Vec<(usize, usize)> {
    let (rm, e) = (max_resource as f64, eta as f64);
    let s_max = (rm.ln() / e.ln() + 1e-9).floor() as i32;
    (0..=s_max)
        .rev()
        .map(|s| {
            let n = ((s_max + 1) as f64 / (s + 1) as f64 * e.powi(s) - 1e-9).ceil() as usize;
            let r = (rm * e.powi(-s)).round().max(1.0) as usize;
            (n, r)
        })
        .collect()
}

fn hyperband_suite(n: usize) -> SuiteReport {
    let mut t = Tally::new(Suite::Hyperband);
    let cases: Vec<(usize, usize)> =
        [(81, 3), (27, 3), (50, 3), (9, 3), (3, 3), (16, 2), (64, 4), (100, 4), (243, 3), (200, 5), (8, 2), (1000, 10)]
            .into_iter()
            .cycle()
            .take(n)
            .collect();
    for (i, &(rm, eta)) in cases.iter().enumerate() {
        t.fp.add([rm as f64, eta as f64]);
        let lib: Vec<(usize, usize)> = scheduler::hyperband_brackets(rm, eta)
            .map(|b| b.iter().map(|x| (x.n(), x.r())).collect())
            .unwrap_or_default();
        let oracle = hyperband_closed_form(rm, eta);
        let mismatches = lib.iter().zip(&oracle).filter(|(a, b)| a != b).count() + lib.len().abs_diff(oracle.len());
        t.record(mismatches == 0, mismatches as f64, || format!("case {i}: R_max={rm} eta={eta}: {lib:?} vs {oracle:?}"));
    }
    t.finish()
}

/// Fixed score per trial; each job costs the epochs it adds.
#[derive(Debug, Clone)]
pub struct ScoreTableRunner {
    pub scores: Vec<f64>,
    pub epochs: Vec<usize>,
}

impl ScoreTableRunner {
    pub fn new(scores: Vec<f64>) -> Self {
        let n = scores.len();
        Self { scores, epochs: vec![0; n] }
    }
}

impl TrialRunner for ScoreTableRunner {
    fn spawn(&mut self, _trial: usize) {}

    fn run(&mut self, trial: usize, epochs: usize) -> JobResult {
        let grant = epochs.saturating_sub(self.epochs[trial]);
        self.epochs[trial] = epochs;
        JobResult { score: self.scores[trial], cost: grant as f64 }
    }
}

/// `trial -> highest rung index reached`.
pub fn max_rungs(cfg: &SchedulerConfig, scores: &[f64], workers: usize) -> BTreeMap<usize, usize> {
    let ex = scheduler::run_virtual(cfg, scores.len(), workers, &mut ScoreTableRunner::new(scores.to_vec())).expect("valid config");
    ex.trials.iter().map(|s| (s.id, s.rung)).collect()
}

fn asha_suite(n: usize, r: &mut ChaCha8Rng) -> SuiteReport {
    let mut t = Tally::new(Suite::Asha);
    for i in 0..n {
        let eta: usize = r.random_range(2..=4);
        let levels = r.random_range(1..=3u32);
        let max_resource = eta.pow(levels);
        let n_trials = r.random_range(eta..=eta.pow(levels + 1));
        // best-first arrival order: scores increase with the trial id
        let mut acc = 0.0;
        let scores: Vec<f64> = (0..n_trials)
            .map(|_| {
                acc += r.random_range(0.01..1.0);
                acc
            })
            .collect();
        t.fp.add(scores.iter().copied().chain([eta as f64, max_resource as f64]));
        let sha = SchedulerConfig { kind: SchedulerKind::Sha, eta, min_resource: 1, max_resource };
        let asha = SchedulerConfig { kind: SchedulerKind::Asha, ..sha };
        let a = max_rungs(&sha, &scores, 1);
        let b = max_rungs(&asha, &scores, 1);
        let diff = a.iter().filter(|(k, v)| b.get(k) != Some(v)).count() + a.len().abs_diff(b.len());
        t.record(diff == 0, diff as f64, || format!("instance {i}: n={n_trials} eta={eta} R_max={max_resource}: {a:?} vs {b:?}"));
    }
    t.finish()
}

fn central_differences(m: &MlpModel, x: &Array2<f64>, y: &[usize], h: f64) -> Vec<f64> {
    let flat = m.flatten();
    let w = vec![1.0; y.len()];
    let loss = |p: &[f64]| {
        let mm = MlpModel::from_flat(&m.dims, p).expect("same shape");
        model::loss_and_grad(&mm, x.view(), y, &w, &mut CostMeter::default()).expect("valid batch").0.mean_loss
    };
    let mut p = flat.clone();
    (0..flat.len())
        .map(|i| {
            p[i] = flat[i] + h;
            let up = loss(&p);
            p[i] = flat[i] - h;
            let down = loss(&p);
            p[i] = flat[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error `||a - b|| / max(||a||, ||b||)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = n(a).max(n(b));
    if scale < 1e-12 { n(&diff) } else { n(&diff) / scale }
}

fn gradient_suite(n: usize, r: &mut ChaCha8Rng) -> SuiteReport {
    const H: f64 = 1e-5;
    let mut t = Tally::new(Suite::Gradient);
    let mut done = 0;
    while done < n {
        let dims: Vec<usize> = vec![r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=5), r.random_range(2..=4)];
        let model = MlpModel::init(&dims, r.random()).expect("positive dims");
        let rows = r.random_range(1..=6);
        let x = Array2::from_shape_simple_fn((rows, dims[0]), || r.random_range(-2.0..2.0));
        let y: Vec<usize> = (0..rows).map(|_| r.random_range(0..dims[3])).collect();
        // a perturbation of H may not move any pre-activation across zero
        let margin = model.hidden_preactivations(x.view()).iter().flat_map(|z| z.iter().map(|v| v.abs())).fold(f64::INFINITY, f64::min);
        if margin < 1e-3 {
            continue;
        }
        t.fp.add(model.flatten().into_iter().chain(x.iter().copied()));
        let w = vec![1.0; rows];
        let (_, g) = model::loss_and_grad(&model, x.view(), &y, &w, &mut CostMeter::default()).expect("valid batch");
        let fd = central_differences(&model, &x, &y, H);
        let err = relative_error(&g.flatten(), &fd);
        t.record(err <= 1e-4, err, || format!("instance {done}: dims={dims:?} rows={rows} rel_err={err:.3e}"));
        done += 1;
    }
    t.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_matches_textbook_example() {
        let g = [vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 0.0]];
        let cols: Vec<&[f64]> = g.iter().map(Vec::as_slice).collect();
        assert!(exhaustive_nnls(&cols, &[3.0, 2.0], 0.0) < 1e-20);
        assert!((exhaustive_nnls(&cols[..1], &[-1.0, 0.0], 0.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn closed_form_table() {
        assert_eq!(hyperband_closed_form(81, 3), vec![(81, 1), (34, 3), (15, 9), (8, 27), (5, 81)]);
    }

    #[test]
    fn small_suites_pass_and_are_seeded() {
        for s in [Suite::Omp, Suite::Hyperband, Suite::Asha, Suite::Gradient] {
            let a = run_suite(s, Some(10), 3);
            assert!(a.ok(), "{a:?}");
            assert_eq!(a.instances, 10);
            assert_eq!(a.fingerprint, run_suite(s, Some(10), 3).fingerprint);
        }
        assert_ne!(run_suite(Suite::Omp, Some(10), 3).fingerprint, run_suite(Suite::Omp, Some(10), 4).fingerprint);
        assert!("nope".parse::<Suite>().is_err());
        assert_eq!("nnls".parse::<Suite>(), Ok(Suite::Nnls));
    }
}
