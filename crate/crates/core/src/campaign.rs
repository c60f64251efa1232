//! Campaign loop: program the rig, reset the target, classify, log.
//!
//! Every attempt gets a seed derived from `(campaign seed, worker, index)`,
//! so an attempt can be replayed on its own and a resumed campaign draws the
//! same randomness as an uninterrupted one.

use crate::boot::{run_boot, BootImage, BootOptions, BootResult, OutcomeKind, Personality, PROMPT};
use crate::machine::{Device, FaultModel, Machine};
use crate::rail::{GlitchPulse, RailConfig};
use crate::rig::{fire_pulse, Fire, RecordingBackend, Rig, RigConfig, RigError, RESET_HOLD_TICKS};
use crate::search::{ParamGrid, SearchError, Searcher, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, Write};
use thiserror::Error;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one worker's private streams (search order, rig jitter).
pub fn worker_seed(seed: u64, worker: u32) -> u64 {
    mix(mix(seed) ^ u64::from(worker))
}

/// Seed for the target's randomness in one attempt.
pub fn attempt_seed(seed: u64, worker: u32, index: u64) -> u64 {
    mix(worker_seed(seed, worker) ^ mix(index))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptOutcome {
    pub outcome: OutcomeKind,
    pub success: bool,
    /// Wall time the attempt occupies on the bench.
    pub cost_ns: u64,
}

/// Something a glitch can be thrown at.
pub trait Target {
    fn attempt(&mut self, fire: &Fire, seed: u64) -> AttemptOutcome;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    /// Attempts over all workers; split evenly, earlier workers taking the remainder.
    pub max_attempts: Option<u64>,
    /// Simulated bench time per worker.
    pub max_sim_ns: Option<u64>,
    /// Stop a worker after this many successes; `None` runs the budget out.
    pub stop_after_successes: Option<u64>,
    /// How long after the pulse the host waits for a prompt before resetting.
    pub observe_ns: u64,
    /// Extra time charged when the target crashed.
    pub crash_recovery_ns: u64,
    pub checkpoint_every: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_attempts: Some(1_000_000),
            max_sim_ns: None,
            stop_after_successes: Some(1),
            observe_ns: 100_000,
            crash_recovery_ns: 0,
            checkpoint_every: 10_000,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BudgetError {
    #[error("budget needs an attempt or time limit greater than zero")]
    Unbounded,
    #[error("checkpoint interval must be positive")]
    ZeroCheckpoint,
}

impl Budget {
    pub fn validate(&self) -> Result<(), BudgetError> {
        let bounded = self.max_attempts.is_some_and(|n| n > 0) || self.max_sim_ns.is_some_and(|n| n > 0);
        if !bounded {
            return Err(BudgetError::Unbounded);
        }
        if self.checkpoint_every == 0 {
            return Err(BudgetError::ZeroCheckpoint);
        }
        Ok(())
    }

    fn attempts_for(&self, worker: u32, workers: u32) -> Option<u64> {
        self.max_attempts.map(|n| {
            let w = u64::from(workers);
            n / w + u64::from(u64::from(worker) < n % w)
        })
    }
}

/// The full boot ROM as a target. Success is the UART prompt.
pub struct BootTarget<'a> {
    pub image: &'a BootImage,
    pub device: Device,
    pub rail: RailConfig,
    pub model: FaultModel,
    pub rig: RigConfig,
    pub observe_ns: u64,
    pub crash_recovery_ns: u64,
}

impl<'a> BootTarget<'a> {
    pub fn new(
        image: &'a BootImage,
        personality: &Personality,
        rail: RailConfig,
        model: FaultModel,
        rig: RigConfig,
        budget: &Budget,
    ) -> Self {
        BootTarget {
            image,
            device: image.device(personality),
            rail,
            model,
            rig,
            observe_ns: budget.observe_ns,
            crash_recovery_ns: budget.crash_recovery_ns,
        }
    }

    /// Runs one attempt and returns the machine afterwards, for exploitation.
    pub fn run(&self, fire: &Fire, seed: u64) -> (Machine, BootResult, u64) {
        let mut m = Machine::new(&self.device).expect("image sized by construction");
        let opts = BootOptions {
            model: self.model,
            jitter_ns: fire.jitter_ns,
            watchdog_ns: None,
        };
        let run = run_boot(&mut m, self.image, Some(&fire.pulse), &self.rail, seed, &opts);
        (m, run.result, run.end_ns)
    }
}

impl Target for BootTarget<'_> {
    fn attempt(&mut self, fire: &Fire, seed: u64) -> AttemptOutcome {
        let (_, result, end_ns) = self.run(fire, seed);
        let outcome = result.kind();
        let success = matches!(&result, BootResult::UartPrompt(out) if out.ends_with(PROMPT));
        let waited = end_ns.min(fire.jitter_ns + fire.pulse.end_ns() + self.observe_ns);
        let recovery = if outcome == OutcomeKind::Crashed {
            self.crash_recovery_ns
        } else {
            0
        };
        AttemptOutcome {
            outcome,
            success,
            cost_ns: u64::from(RESET_HOLD_TICKS) * self.rig.tick_ns + waited + recovery,
        }
    }
}

/// Independent trials with fixed success probability and cost.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BernoulliTarget {
    pub p: f64,
    pub cost_ns: u64,
}

impl Target for BernoulliTarget {
    fn attempt(&mut self, _fire: &Fire, seed: u64) -> AttemptOutcome {
        let success = ChaCha8Rng::seed_from_u64(seed).gen_bool(self.p);
        AttemptOutcome {
            outcome: if success {
                OutcomeKind::UartPrompt
            } else {
                OutcomeKind::NormalBoot
            },
            success,
            cost_ns: self.cost_ns,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub worker: u32,
    pub index: u64,
    pub offset_ns: u64,
    pub length_ns: u64,
    pub jitter_ns: u64,
    pub seed: u64,
    pub outcome: OutcomeKind,
    pub success: bool,
    pub cost_ns: u64,
    /// Worker bench time when the attempt finished.
    pub sim_time_ns: u64,
    /// Hex of the command frames sent to the rig for this attempt.
    pub rig: String,
}

impl Attempt {
    pub fn pulse(&self) -> GlitchPulse {
        GlitchPulse::new(self.offset_ns, self.length_ns)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub attempts: u64,
    pub successes: u64,
    pub crashes: u64,
    pub normals: u64,
    pub detects: u64,
    pub hangs: u64,
    pub sim_time_ns: u64,
    /// `(attempt index, bench time at its end)` of the first success.
    pub first_success: Option<(u64, u64)>,
}

impl Counters {
    fn add(&mut self, a: &Attempt) {
        self.attempts += 1;
        match a.outcome {
            OutcomeKind::Crashed => self.crashes += 1,
            OutcomeKind::NormalBoot => self.normals += 1,
            OutcomeKind::DetectShutdown => self.detects += 1,
            OutcomeKind::Hang => self.hangs += 1,
            OutcomeKind::UartPrompt => {}
        }
        if a.success {
            self.successes += 1;
            self.first_success.get_or_insert((a.index, a.sim_time_ns));
        }
        self.sim_time_ns = a.sim_time_ns;
    }
}

/// Everything a worker needs to continue where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    pub worker: u32,
    pub next_index: u64,
    pub counters: Counters,
    pub searcher: Searcher,
    pub rig: Rig,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub attempts: u64,
    pub successes: u64,
    pub crashes: u64,
    pub normals: u64,
    pub detects: u64,
    pub hangs: u64,
    pub success_rate: f64,
    pub time_to_first_success_ns: Option<u64>,
    pub attempts_to_first_success: Option<u64>,
    /// Bench time of the longest-running worker; workers run side by side.
    pub sim_time_ns: u64,
    pub attempts_per_simulated_second: f64,
}

impl CampaignStats {
    pub fn from_counters<'a>(workers: impl IntoIterator<Item = &'a Counters>) -> CampaignStats {
        let mut total = Counters::default();
        let mut first: Option<(u64, u64)> = None;
        for c in workers {
            total.attempts += c.attempts;
            total.successes += c.successes;
            total.crashes += c.crashes;
            total.normals += c.normals;
            total.detects += c.detects;
            total.hangs += c.hangs;
            total.sim_time_ns = total.sim_time_ns.max(c.sim_time_ns);
            if let Some((i, t)) = c.first_success {
                if first.is_none_or(|(_, ft)| t < ft) {
                    first = Some((i, t));
                }
            }
        }
        CampaignStats {
            attempts: total.attempts,
            successes: total.successes,
            crashes: total.crashes,
            normals: total.normals,
            detects: total.detects,
            hangs: total.hangs,
            success_rate: if total.attempts > 0 {
                total.successes as f64 / total.attempts as f64
            } else {
                0.0
            },
            time_to_first_success_ns: first.map(|f| f.1),
            attempts_to_first_success: first.map(|f| f.0 + 1),
            sim_time_ns: total.sim_time_ns,
            attempts_per_simulated_second: if total.sim_time_ns > 0 {
                total.attempts as f64 / (total.sim_time_ns as f64 * 1e-9)
            } else {
                0.0
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignHeader {
    pub seed: u64,
    pub workers: u32,
    pub grid: ParamGrid,
    pub strategy: Strategy,
    pub budget: Budget,
    pub rig: RigConfig,
}

/// One line of the JSONL campaign log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Header(CampaignHeader),
    Attempt(Attempt),
    Checkpoint(Box<WorkerState>),
    Summary(CampaignStats),
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error("budget: {0}")]
    Budget(#[from] BudgetError),
    #[error("workers must be at least 1")]
    NoWorkers,
    #[error("checkpoint belongs to a different campaign")]
    ResumeMismatch,
    #[error("log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CampaignResult {
    pub stats: CampaignStats,
    /// Header, then each worker's attempts and checkpoints, then the summary.
    pub records: Vec<LogRecord>,
    pub workers: Vec<WorkerState>,
}

impl CampaignResult {
    pub fn attempts(&self) -> impl Iterator<Item = &Attempt> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Attempt(a) => Some(a),
            _ => None,
        })
    }

    pub fn first_success(&self) -> Option<&Attempt> {
        self.attempts()
            .filter(|a| a.success)
            .min_by_key(|a| (a.sim_time_ns, a.worker, a.index))
    }
}

pub fn fresh_worker(header: &CampaignHeader, worker: u32) -> Result<WorkerState, CampaignError> {
    let ws = worker_seed(header.seed, worker);
    Ok(WorkerState {
        worker,
        next_index: 0,
        counters: Counters::default(),
        searcher: Searcher::new(header.grid.clone(), header.strategy, ws)?,
        rig: Rig::new(RigConfig {
            jitter_seed: header.rig.jitter_seed ^ ws,
            ..header.rig
        }),
        done: false,
    })
}

/// Runs one worker from `state` until its budget or stop condition.
pub fn run_worker<T: Target + ?Sized>(
    header: &CampaignHeader,
    mut state: WorkerState,
    target: &mut T,
) -> Result<(WorkerState, Vec<LogRecord>), CampaignError> {
    let budget = &header.budget;
    let max_attempts = budget.attempts_for(state.worker, header.workers);
    let mut out = Vec::new();
    loop {
        let c = &state.counters;
        if max_attempts.is_some_and(|n| c.attempts >= n)
            || budget.max_sim_ns.is_some_and(|n| c.sim_time_ns >= n)
            || budget.stop_after_successes.is_some_and(|n| c.successes >= n)
        {
            break;
        }
        let pulse = match state.searcher.next_pulse() {
            Ok(p) => p,
            Err(SearchError::Exhausted) => break,
            Err(e) => return Err(e.into()),
        };
        let mut backend = RecordingBackend::new(&mut state.rig);
        let fire = fire_pulse(&mut backend, &header.rig, &pulse)?;
        let frames: Vec<u8> = backend.transcript.concat();
        let index = state.next_index;
        let seed = attempt_seed(header.seed, state.worker, index);
        let r = target.attempt(&fire, seed);
        state.searcher.record(pulse, r.success);
        let a = Attempt {
            worker: state.worker,
            index,
            offset_ns: pulse.offset_ns,
            length_ns: pulse.length_ns,
            jitter_ns: fire.jitter_ns,
            seed,
            outcome: r.outcome,
            success: r.success,
            cost_ns: r.cost_ns,
            sim_time_ns: state.counters.sim_time_ns + r.cost_ns,
            rig: hex::encode(frames),
        };
        state.counters.add(&a);
        state.next_index += 1;
        out.push(LogRecord::Attempt(a));
        if state.next_index.is_multiple_of(budget.checkpoint_every) {
            out.push(LogRecord::Checkpoint(Box::new(state.clone())));
        }
    }
    state.done = true;
    out.push(LogRecord::Checkpoint(Box::new(state.clone())));
    Ok((state, out))
}

/// Runs a campaign, optionally continuing from an earlier log. Workers run
/// on separate threads; their records are merged in worker order.
pub fn run_campaign<T, F>(header: &CampaignHeader, make_target: F, resume: Option<&[LogRecord]>) -> Result<CampaignResult, CampaignError>
where
    T: Target + Send,
    F: Fn(u32) -> T + Sync,
{
    if header.workers == 0 {
        return Err(CampaignError::NoWorkers);
    }
    header.budget.validate()?;
    header.strategy.validate()?;
    header.grid.validate(header.rig.tick_ns)?;
    let mut starts = Vec::new();
    for w in 0..header.workers {
        starts.push((fresh_worker(header, w)?, Vec::new()));
    }
    if let Some(log) = resume {
        resume_states(header, log, &mut starts)?;
    }
    let run = |(state, kept): (WorkerState, Vec<LogRecord>)| -> Result<(WorkerState, Vec<LogRecord>), CampaignError> {
        let worker = state.worker;
        let (state, new) = if state.done {
            (state, Vec::new())
        } else {
            run_worker(header, state, &mut make_target(worker))?
        };
        Ok((state, kept.into_iter().chain(new).collect()))
    };
    let results: Vec<_> = if header.workers == 1 {
        starts.into_iter().map(run).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = starts.into_iter().map(|st| s.spawn(move || run(st))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let mut records = vec![LogRecord::Header(header.clone())];
    let mut workers = Vec::new();
    for r in results {
        let (state, recs) = r?;
        records.extend(recs);
        workers.push(state);
    }
    let stats = CampaignStats::from_counters(workers.iter().map(|w| &w.counters));
    records.push(LogRecord::Summary(stats.clone()));
    Ok(CampaignResult { stats, records, workers })
}

/// Restores each worker from its last checkpoint in `log`, keeping the
/// attempts it covers and dropping anything logged after it.
fn resume_states(header: &CampaignHeader, log: &[LogRecord], starts: &mut [(WorkerState, Vec<LogRecord>)]) -> Result<(), CampaignError> {
    match log.first() {
        Some(LogRecord::Header(h)) if h == header => {}
        _ => return Err(CampaignError::ResumeMismatch),
    }
    for (state, kept) in starts.iter_mut() {
        let w = state.worker;
        let last = log.iter().rev().find_map(|r| match r {
            LogRecord::Checkpoint(c) if c.worker == w => Some(c),
            _ => None,
        });
        if let Some(cp) = last {
            *state = (**cp).clone();
            kept.extend(
                log.iter()
                    .filter(|r| match r {
                        LogRecord::Attempt(a) => a.worker == w && a.index < cp.next_index,
                        LogRecord::Checkpoint(c) => c.worker == w && c.next_index <= cp.next_index,
                        _ => false,
                    })
                    .cloned(),
            );
        }
    }
    Ok(())
}

pub fn write_jsonl<W: Write>(records: &[LogRecord], mut w: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<LogRecord>, CampaignError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CampaignError::Log {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Attempts in a log, in (worker, index) order.
pub fn log_attempts(records: &[LogRecord]) -> Vec<&Attempt> {
    let mut v: Vec<&Attempt> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Attempt(a) => Some(a),
            _ => None,
        })
        .collect();
    v.sort_by_key(|a| (a.worker, a.index));
    v
}

/// Stats recomputed from the attempt records alone.
pub fn stats_from_attempts<'a>(attempts: impl IntoIterator<Item = &'a Attempt>) -> CampaignStats {
    let mut per: std::collections::BTreeMap<u32, Counters> = Default::default();
    for a in attempts {
        per.entry(a.worker).or_default().add(a);
    }
    CampaignStats::from_counters(per.values())
}
