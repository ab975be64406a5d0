use std::collections::BTreeMap;

use coretune::search::{
    self, ConfigSample, Domain, ObservationHistory, ParamSpace, ParamValue, Provenance, Searcher, TpeConfig,
};

/// Kolmogorov-Smirnov distance of `xs` to U(0, 1).
fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value.
fn ks_critical(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

const DRAWS: usize = 10_000;

fn draws(space: &ParamSpace, searcher: &Searcher, history: &ObservationHistory, seed: u64) -> Vec<ConfigSample> {
    (0..DRAWS).map(|i| searcher.suggest(space, history, i, seed)).collect()
}

#[test]
fn uniform_domain_passes_ks() {
    let space = ParamSpace::new().with("x", Domain::Uniform { lo: -2.0, hi: 6.0 }).unwrap();
    let xs: Vec<f64> = draws(&space, &Searcher::Random, &ObservationHistory::new(), 3)
        .iter()
        .map(|c| (c.f64("x").unwrap() + 2.0) / 8.0)
        .collect();
    let d = ks_uniform(xs);
    assert!(d < ks_critical(DRAWS), "D = {d}");
}

#[test]
fn log_uniform_is_uniform_in_log_space() {
    let space = ParamSpace::tabular();
    let (lo, hi) = (0.001f64.ln(), 0.01f64.ln());
    let xs: Vec<f64> = draws(&space, &Searcher::Random, &ObservationHistory::new(), 11)
        .iter()
        .map(|c| (c.f64("lr").unwrap().ln() - lo) / (hi - lo))
        .collect();
    assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
    let d = ks_uniform(xs);
    assert!(d < ks_critical(DRAWS), "D = {d}");
}

#[test]
fn choice_arms_are_equally_likely() {
    let space = ParamSpace::tabular();
    let samples = draws(&space, &Searcher::Random, &ObservationHistory::new(), 5);
    for (name, arms) in [("optimizer", 2usize), ("lr_schedule", 3), ("h1", 4), ("h2", 4), ("batch_size", 3)] {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in &samples {
            *counts.entry(c.get(name).unwrap().to_string()).or_default() += 1;
        }
        assert_eq!(counts.len(), arms, "{name}: {counts:?}");
        let p = 1.0 / arms as f64;
        // 4.5 binomial standard deviations
        let tol = 4.5 * (DRAWS as f64 * p * (1.0 - p)).sqrt();
        for (arm, &k) in &counts {
            assert!((k as f64 - DRAWS as f64 * p).abs() < tol, "{name}={arm}: {k} of {DRAWS}");
        }
    }
}

fn history_with(space: &ParamSpace, scores: impl Fn(usize, &ConfigSample) -> f64, n: usize) -> ObservationHistory {
    let mut h = ObservationHistory::new();
    for i in 0..n {
        let c = search::sample_random(space, 1000 + i as u64);
        let s = scores(i, &c);
        h.push(c, s, 1.0);
    }
    h
}

#[test]
fn tpe_with_tied_scores_samples_the_prior() {
    let space = ParamSpace::new().with("x", Domain::Uniform { lo: 0.0, hi: 1.0 }).unwrap();
    let history = history_with(&space, |_, _| 0.5, 40);
    let samples = draws(&space, &Searcher::Tpe(TpeConfig::default()), &history, 9);
    assert!(samples.iter().all(|c| c.provenance == Provenance::TpePrior));
    let d = ks_uniform(samples.iter().map(|c| c.f64("x").unwrap()).collect());
    assert!(d < ks_critical(DRAWS), "D = {d}");
}

#[test]
fn tpe_startup_matches_random_search() {
    let space = ParamSpace::tabular();
    let history = history_with(&space, |i, _| i as f64, 5);
    let tpe = Searcher::Tpe(TpeConfig::default());
    for i in 0..50 {
        let a = Searcher::Random.suggest(&space, &history, i, 21);
        let b = tpe.suggest(&space, &history, i, 21);
        assert_eq!(a.values, b.values);
        assert_eq!(b.provenance, Provenance::TpePrior);
    }
}

#[test]
fn tpe_model_phase_stays_in_domain_and_is_seeded() {
    let space = ParamSpace::tabular();
    let history = history_with(&space, |_, c| (c.f64("lr").unwrap() - 0.004).abs() + c.int("h1").unwrap() as f64 * 1e-4, 30);
    let tpe = Searcher::Tpe(TpeConfig::default());
    for i in 0..200 {
        let c = tpe.suggest(&space, &history, i, 4);
        assert_eq!(c.provenance, Provenance::TpeEi);
        assert!(space.contains(&c), "{:?}", c.values);
        assert_eq!(c, tpe.suggest(&space, &history, i, 4));
    }
}

#[test]
fn non_finite_scores_never_enter_the_history() {
    let space = ParamSpace::tabular();
    let mut h = ObservationHistory::new();
    assert!(!h.push(search::sample_random(&space, 0), f64::NAN, 1.0));
    assert!(!h.push(search::sample_random(&space, 1), f64::INFINITY, 1.0));
    assert!(h.push(search::sample_random(&space, 2), 0.3, 1.0));
    assert_eq!(h.len(), 1);
}

#[test]
fn int_choice_values_keep_their_type() {
    let space = ParamSpace::tabular();
    let c = search::sample_random(&space, 77);
    assert!(matches!(c.get("h1"), Some(ParamValue::Int(150 | 200 | 250 | 300))));
    assert!(matches!(c.get("batch_size"), Some(ParamValue::Int(16 | 32 | 64))));
}
