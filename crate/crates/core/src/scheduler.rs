//! Successive halving, Hyperband and ASHA, executed against a simulated
//! worker pool whose clock advances in sample-gradient units.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("invalid scheduler config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, SchedulerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Sha,
    Hyperband,
    Asha,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    #[serde(default = "default_eta")]
    pub eta: usize,
    /// `r`, epochs at the base rung (ignored by Hyperband, which derives it per bracket).
    #[serde(default = "default_min_resource")]
    pub min_resource: usize,
    /// `R_max`, epochs.
    pub max_resource: usize,
}

fn default_eta() -> usize {
    3
}

fn default_min_resource() -> usize {
    1
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta < 2 {
            return Err(SchedulerError::Config(format!("eta = {} must be >= 2", self.eta)));
        }
        if self.min_resource < 1 || self.min_resource > self.max_resource {
            return Err(SchedulerError::Config(format!(
                "need 1 <= r ({}) <= R_max ({})",
                self.min_resource, self.max_resource
            )));
        }
        if self.kind == SchedulerKind::Hyperband && self.max_resource < self.eta {
            return Err(SchedulerError::Config("hyperband needs R_max >= eta".into()));
        }
        Ok(())
    }
}

/// One SHA round: `n` trials trained up to `r` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub n: usize,
    pub r: usize,
}

/// `n_{i+1} = floor(n_i / eta)`, `r_{i+1} = min(eta r_i, R_max)`; stops once
/// no trial survives or the `R_max` round has been planned.
pub fn sha_plan(n: usize, r: usize, eta: usize, max_resource: usize) -> Result<Vec<Round>> {
    if n == 0 || eta < 2 || r == 0 || r > max_resource {
        return Err(SchedulerError::Config(format!("sha_plan(n={n}, r={r}, eta={eta}, R_max={max_resource})")));
    }
    let mut rounds = vec![Round { n, r }];
    let (mut n, mut r) = (n, r);
    while r < max_resource {
        n /= eta;
        r = (r * eta).min(max_resource);
        if n == 0 {
            break;
        }
        rounds.push(Round { n, r });
    }
    Ok(rounds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: usize,
    pub rounds: Vec<Round>,
}

impl Bracket {
    pub fn n(&self) -> usize {
        self.rounds[0].n
    }

    pub fn r(&self) -> usize {
        self.rounds[0].r
    }

    /// `sum_i n_i r_i`.
    pub fn budget(&self) -> usize {
        self.rounds.iter().map(|x| x.n * x.r).sum()
    }
}

/// Largest `s` with `eta^s <= R_max`.
pub fn s_max(max_resource: usize, eta: usize) -> usize {
    let mut s = 0;
    let mut p = eta;
    while p <= max_resource {
        s += 1;
        p = p.saturating_mul(eta);
    }
    s
}

/// Brackets `s = s_max..=0` with `n_s = ceil((s_max+1) eta^s / (s+1))` and
/// `r_s = R_max / eta^s` (rounded, at least 1).
pub fn hyperband_brackets(max_resource: usize, eta: usize) -> Result<Vec<Bracket>> {
    if eta < 2 || max_resource < eta {
        return Err(SchedulerError::Config(format!("hyperband needs eta >= 2 and R_max >= eta (R_max={max_resource}, eta={eta})")));
    }
    let sm = s_max(max_resource, eta);
    (0..=sm)
        .rev()
        .map(|s| {
            let p = eta.pow(s as u32);
            let n = ((sm + 1) * p).div_ceil(s + 1);
            let r = ((max_resource as f64 / p as f64).round() as usize).max(1);
            Ok(Bracket { s, rounds: sha_plan(n, r, eta, max_resource)? })
        })
        .collect()
}

/// Spreads `n_configs` over the brackets in proportion to their `n_s`
/// (largest remainder, ties to the earlier bracket), then rebuilds each
/// bracket's plan for its share. Brackets with no share are dropped.
pub fn allocate_brackets(brackets: &[Bracket], n_configs: usize, eta: usize, max_resource: usize) -> Result<Vec<Bracket>> {
    let total: usize = brackets.iter().map(Bracket::n).sum();
    let exact: Vec<f64> = brackets.iter().map(|b| b.n() as f64 * n_configs as f64 / total as f64).collect();
    let mut share: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..brackets.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = n_configs - share.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        share[i] += 1;
    }
    brackets
        .iter()
        .zip(share)
        .filter(|(_, n)| *n > 0)
        .map(|(b, n)| Ok(Bracket { s: b.s, rounds: sha_plan(n, b.r(), eta, max_resource)? }))
        .collect()
}

/// `r_k = min(r eta^k, R_max)` up to and including the first rung at `R_max`.
pub fn asha_rungs(r: usize, eta: usize, max_resource: usize) -> Vec<usize> {
    let mut rungs = vec![r.min(max_resource)];
    while *rungs.last().unwrap() < max_resource {
        let next = (rungs.last().unwrap() * eta).min(max_resource);
        rungs.push(next);
    }
    rungs
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RungState {
    pub rung_index: usize,
    pub completed: Vec<(usize, f64)>,
    pub promoted: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AshaAction {
    Promote { trial: usize, rung: usize },
    Spawn,
}

fn rank_key(score: f64) -> f64 {
    if score.is_nan() { f64::INFINITY } else { score }
}

fn by_score(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    rank_key(a.1).total_cmp(&rank_key(b.1)).then(a.0.cmp(&b.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AshaState {
    pub eta: usize,
    pub rung_resources: Vec<usize>,
    pub rungs: Vec<RungState>,
}

impl AshaState {
    pub fn new(r: usize, eta: usize, max_resource: usize) -> Self {
        let rung_resources = asha_rungs(r, eta, max_resource);
        let rungs = (0..rung_resources.len()).map(|i| RungState { rung_index: i, ..Default::default() }).collect();
        Self { eta, rung_resources, rungs }
    }

    pub fn record(&mut self, trial: usize, rung: usize, score: f64) {
        self.rungs[rung].completed.push((trial, score));
    }

    /// Scans rungs from the top down for a completed, unpromoted trial inside
    /// its rung's top `floor(|completed| / eta)`; otherwise asks for a new
    /// base-rung configuration. Promotions are recorded immediately.
    pub fn next_action(&mut self) -> AshaAction {
        let top = self.rungs.len() - 1;
        for j in (0..top).rev() {
            let rung = &self.rungs[j];
            let k = rung.completed.len() / self.eta;
            if k == 0 {
                continue;
            }
            let mut ranked = rung.completed.clone();
            ranked.sort_by(by_score);
            if let Some(&(trial, _)) = ranked[..k].iter().find(|(t, _)| !rung.promoted.contains(t)) {
                self.rungs[j].promoted.insert(trial);
                return AshaAction::Promote { trial, rung: j + 1 };
            }
        }
        AshaAction::Spawn
    }
}

/// Records a finished job and returns the next action.
pub fn asha_step(state: &mut AshaState, trial: usize, rung: usize, score: f64) -> AshaAction {
    state.record(trial, rung, score);
    state.next_action()
}

/// Outcome of training a trial up to a resource level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JobResult {
    /// Minimized; non-finite means the trial failed.
    pub score: f64,
    /// Virtual time the job occupies a worker.
    pub cost: f64,
}

pub trait TrialRunner {
    /// Trial `trial` is about to receive its first job.
    fn spawn(&mut self, trial: usize);
    /// Trains `trial` until it has `epochs` epochs in total.
    fn run(&mut self, trial: usize, epochs: usize) -> JobResult;
    /// The job's result becomes visible at its virtual finish time.
    fn on_result(&mut self, _trial: usize, _epochs: usize, _score: f64) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Start,
    Finish,
    Fail,
}

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t_virtual: f64,
    pub event: EventKind,
    pub trial: usize,
    pub rung: usize,
    pub score: Option<f64>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub id: usize,
    pub bracket: usize,
    /// Highest rung index completed.
    pub rung: usize,
    pub epochs: usize,
    pub score: f64,
    pub cost: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub trace: Vec<TraceEvent>,
    pub trials: Vec<TrialSummary>,
    pub makespan: f64,
    pub total_cost: f64,
}

impl Execution {
    /// Lowest last score, ties to the lower id; failed trials never win.
    pub fn best(&self) -> Option<&TrialSummary> {
        self.trials
            .iter()
            .filter(|t| !t.failed && t.score.is_finite())
            .min_by(|a, b| a.score.total_cmp(&b.score).then(a.id.cmp(&b.id)))
    }
}

#[derive(Debug, Clone, Copy)]
struct Job {
    trial: usize,
    bracket: usize,
    rung: usize,
    epochs: usize,
    fresh: bool,
}

trait Policy {
    fn next_job(&mut self) -> Option<Job>;
    fn on_finish(&mut self, job: &Job, score: f64);
}

/// Synchronous SHA over one or more brackets run back to back, with a
/// barrier after each round.
struct SyncHalving {
    brackets: Vec<Bracket>,
    bracket: usize,
    round: usize,
    first_id: usize,
    queue: Vec<usize>,
    next: usize,
    outstanding: usize,
    results: Vec<(usize, f64)>,
}

impl SyncHalving {
    fn new(brackets: Vec<Bracket>) -> Self {
        let n0 = brackets.first().map_or(0, Bracket::n);
        Self { brackets, bracket: 0, round: 0, first_id: 0, queue: (0..n0).collect(), next: 0, outstanding: 0, results: Vec::new() }
    }
}

impl Policy for SyncHalving {
    fn next_job(&mut self) -> Option<Job> {
        let b = self.brackets.get(self.bracket)?;
        let trial = *self.queue.get(self.next)?;
        self.next += 1;
        self.outstanding += 1;
        Some(Job {
            trial,
            bracket: self.bracket,
            rung: self.round,
            epochs: b.rounds[self.round].r,
            fresh: self.round == 0,
        })
    }

    fn on_finish(&mut self, job: &Job, score: f64) {
        self.outstanding -= 1;
        self.results.push((job.trial, score));
        if self.outstanding > 0 || self.next < self.queue.len() {
            return;
        }
        let b = &self.brackets[self.bracket];
        if self.round + 1 < b.rounds.len() {
            self.results.sort_by(by_score);
            let keep = b.rounds[self.round + 1].n;
            let mut survivors: Vec<usize> = self.results.iter().take(keep).map(|r| r.0).collect();
            survivors.sort_unstable();
            self.queue = survivors;
            self.round += 1;
        } else {
            self.first_id += b.n();
            self.bracket += 1;
            self.round = 0;
            let n = self.brackets.get(self.bracket).map_or(0, Bracket::n);
            self.queue = (self.first_id..self.first_id + n).collect();
        }
        self.next = 0;
        self.results.clear();
    }
}

struct Asha {
    state: AshaState,
    max_configs: usize,
    spawned: usize,
}

impl Policy for Asha {
    fn next_job(&mut self) -> Option<Job> {
        match self.state.next_action() {
            AshaAction::Promote { trial, rung } => {
                Some(Job { trial, bracket: 0, rung, epochs: self.state.rung_resources[rung], fresh: false })
            }
            AshaAction::Spawn if self.spawned < self.max_configs => {
                self.spawned += 1;
                Some(Job { trial: self.spawned - 1, bracket: 0, rung: 0, epochs: self.state.rung_resources[0], fresh: true })
            }
            AshaAction::Spawn => None,
        }
    }

    fn on_finish(&mut self, job: &Job, score: f64) {
        self.state.record(job.trial, job.rung, score);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Pending finish events ordered by `(time, sequence)`.
#[derive(Debug, Default)]
pub struct VirtualClock {
    pub now: f64,
    seq: u64,
    queue: BinaryHeap<Reverse<(Time, u64, usize)>>,
}

impl VirtualClock {
    /// Schedules payload `id` to finish at `at`.
    pub fn schedule(&mut self, at: f64, id: usize) {
        self.queue.push(Reverse((Time(at), self.seq, id)));
        self.seq += 1;
    }

    /// Pops the earliest event and advances `now` to it.
    pub fn pop(&mut self) -> Option<(f64, usize)> {
        let Reverse((Time(t), _, id)) = self.queue.pop()?;
        assert!(t >= self.now, "virtual time went backwards");
        self.now = t;
        Some((t, id))
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

/// Runs `n_configs` trials under `cfg` on `workers` simulated workers.
pub fn run_virtual(cfg: &SchedulerConfig, n_configs: usize, workers: usize, runner: &mut dyn TrialRunner) -> Result<Execution> {
    cfg.validate()?;
    if workers == 0 || n_configs == 0 {
        return Err(SchedulerError::Config("need at least one worker and one configuration".into()));
    }
    let mut policy: Box<dyn Policy> = match cfg.kind {
        SchedulerKind::Sha => Box::new(SyncHalving::new(vec![Bracket {
            s: 0,
            rounds: sha_plan(n_configs, cfg.min_resource, cfg.eta, cfg.max_resource)?,
        }])),
        SchedulerKind::Hyperband => {
            let all = hyperband_brackets(cfg.max_resource, cfg.eta)?;
            Box::new(SyncHalving::new(allocate_brackets(&all, n_configs, cfg.eta, cfg.max_resource)?))
        }
        SchedulerKind::Asha => Box::new(Asha {
            state: AshaState::new(cfg.min_resource, cfg.eta, cfg.max_resource),
            max_configs: n_configs,
            spawned: 0,
        }),
    };

    let mut clock = VirtualClock::default();
    let mut trace = Vec::new();
    let mut trials: Vec<TrialSummary> = Vec::new();
    let mut running: Vec<(Job, JobResult)> = Vec::new();
    let mut idle = workers;
    let mut total_cost = 0.0;
    loop {
        while idle > 0 {
            let Some(job) = policy.next_job() else { break };
            if job.fresh {
                runner.spawn(job.trial);
                if trials.len() <= job.trial {
                    trials.resize_with(job.trial + 1, || TrialSummary {
                        id: 0,
                        bracket: 0,
                        rung: 0,
                        epochs: 0,
                        score: f64::INFINITY,
                        cost: 0.0,
                        failed: false,
                    });
                }
                trials[job.trial] = TrialSummary { id: job.trial, bracket: job.bracket, ..trials[job.trial].clone() };
            }
            assert!(job.epochs <= cfg.max_resource, "grant beyond R_max");
            trace.push(TraceEvent { t_virtual: clock.now, event: EventKind::Start, trial: job.trial, rung: job.rung, score: None, cost: 0.0 });
            let res = runner.run(job.trial, job.epochs);
            let cost = if res.cost.is_finite() && res.cost > 0.0 { res.cost } else { 0.0 };
            total_cost += cost;
            clock.schedule(clock.now + cost, running.len());
            running.push((job, JobResult { score: res.score, cost }));
            idle -= 1;
        }
        let Some((t, slot)) = clock.pop() else { break };
        idle += 1;
        let (job, res) = running[slot];
        let failed = !res.score.is_finite();
        let score = if failed { f64::INFINITY } else { res.score };
        trace.push(TraceEvent {
            t_virtual: t,
            event: if failed { EventKind::Fail } else { EventKind::Finish },
            trial: job.trial,
            rung: job.rung,
            score: (!failed).then_some(score),
            cost: res.cost,
        });
        let s = &mut trials[job.trial];
        s.rung = job.rung;
        s.epochs = job.epochs;
        s.score = score;
        s.cost += res.cost;
        s.failed |= failed;
        runner.on_result(job.trial, job.epochs, score);
        policy.on_finish(&job, score);
    }
    Ok(Execution { trace, trials, makespan: clock.now, total_cost })
}
