use coretune::oracle::{self, ScoreTableRunner};
use coretune::scheduler::{self, EventKind, SchedulerConfig, SchedulerKind};
use proptest::prelude::*;

fn sha(n_max: usize) -> SchedulerConfig {
    SchedulerConfig { kind: SchedulerKind::Sha, eta: 3, min_resource: 1, max_resource: n_max }
}

fn scores(n: usize, seed: u64) -> Vec<f64> {
    // a fixed permutation-like table without ties
    (0..n).map(|i| ((i as u64 * 7919 + seed * 104_729) % 1_000_003) as f64 / 1e6).collect()
}

#[test]
fn hyperband_matches_closed_form() {
    let lib: Vec<(usize, usize)> =
        scheduler::hyperband_brackets(81, 3).unwrap().iter().map(|b| (b.n(), b.r())).collect();
    assert_eq!(lib, oracle::hyperband_closed_form(81, 3));
    assert_eq!(lib, vec![(81, 1), (34, 3), (15, 9), (8, 27), (5, 81)]);
}

#[test]
fn two_workers_halve_the_makespan_of_balanced_rounds() {
    let cfg = sha(27);
    let s = scores(27, 1);
    let one = scheduler::run_virtual(&cfg, 27, 1, &mut ScoreTableRunner::new(s.clone())).unwrap();
    let two = scheduler::run_virtual(&cfg, 27, 2, &mut ScoreTableRunner::new(s)).unwrap();
    assert_eq!(one.total_cost, two.total_cost);
    assert_eq!(one.makespan, one.total_cost);
    assert!(two.makespan >= one.makespan / 2.0);
    assert!(two.makespan < one.makespan);
    // round sizes 27, 9, 3, 1 of equal jobs: ceil(n / 2) job lengths each
    assert_eq!(two.makespan, 14.0 * 1.0 + 5.0 * 2.0 + 2.0 * 6.0 + 1.0 * 18.0);
}

#[test]
fn asha_best_config_does_not_depend_on_worker_count() {
    for seed in 0..10 {
        let s = scores(40, seed);
        let cfg = SchedulerConfig { kind: SchedulerKind::Asha, eta: 3, min_resource: 1, max_resource: 27 };
        let w1 = scheduler::run_virtual(&cfg, 40, 1, &mut ScoreTableRunner::new(s.clone())).unwrap();
        let w4 = scheduler::run_virtual(&cfg, 40, 4, &mut ScoreTableRunner::new(s)).unwrap();
        assert_eq!(w1.best().unwrap().id, w4.best().unwrap().id, "seed {seed}");
        assert!(w4.makespan <= w1.makespan);
    }
}

#[test]
fn asha_serial_equals_sha_on_best_first_tables() {
    let s: Vec<f64> = (0..27).map(|i| i as f64).collect();
    let a = oracle::max_rungs(&sha(27), &s, 1);
    let b = oracle::max_rungs(&SchedulerConfig { kind: SchedulerKind::Asha, ..sha(27) }, &s, 1);
    assert_eq!(a, b);
}

#[test]
fn failed_trials_are_traced_and_never_best() {
    let mut s = scores(9, 2);
    s[0] = f64::NAN;
    s[1] = f64::NEG_INFINITY;
    let ex = scheduler::run_virtual(&sha(9), 9, 1, &mut ScoreTableRunner::new(s)).unwrap();
    let fails: Vec<usize> = ex.trace.iter().filter(|e| e.event == EventKind::Fail).map(|e| e.trial).collect();
    assert_eq!(fails, vec![0, 1]);
    let best = ex.best().unwrap();
    assert!(best.id > 1);
}

fn kinds() -> impl Strategy<Value = SchedulerKind> {
    prop_oneof![Just(SchedulerKind::Sha), Just(SchedulerKind::Hyperband), Just(SchedulerKind::Asha)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn virtual_runs_are_consistent(
        kind in kinds(),
        eta in 2usize..=4,
        levels in 1u32..=3,
        n in 1usize..40,
        workers in 1usize..5,
        table in proptest::collection::vec(0.0f64..1.0, 40),
    ) {
        let max_resource = eta.pow(levels);
        let cfg = SchedulerConfig { kind, eta, min_resource: 1, max_resource };
        let ex = scheduler::run_virtual(&cfg, n, workers, &mut ScoreTableRunner::new(table[..n].to_vec())).unwrap();
        // events are ordered in virtual time
        let finishes: Vec<f64> = ex.trace.iter().filter(|e| e.event != EventKind::Start).map(|e| e.t_virtual).collect();
        prop_assert!(finishes.windows(2).all(|w| w[0] <= w[1]));
        // no grant beyond R_max, no more than n trials
        prop_assert!(ex.trials.iter().all(|t| t.epochs <= max_resource));
        prop_assert!(ex.trials.len() <= n);
        // accounting
        let per_trial: f64 = ex.trials.iter().map(|t| t.cost).sum();
        prop_assert!((per_trial - ex.total_cost).abs() < 1e-9);
        prop_assert!(ex.makespan <= ex.total_cost + 1e-9);
        prop_assert!(ex.makespan * workers as f64 >= ex.total_cost - 1e-9);
        prop_assert!(ex.best().is_some());
    }
}
