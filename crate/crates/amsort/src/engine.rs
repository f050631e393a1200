//! Shared engine harness: spawns one control thread per rank on a fresh
//! fabric, generates each rank's keys (untimed), runs the iteration loop
//! with a collective barrier before each timed iteration, and assembles the
//! per-rank outputs. The two sort engines plug in via a setup closure (run
//! once per rank, e.g. to register handlers) and an iteration closure.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amnet::{Fabric, TransportConfig, TransportError};
use crate::collectives::{CollectiveContext, CollectiveError};
use crate::workload::{self, ProblemSpec, WorkloadError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("key {key} outside owned range [{lo}, {hi})")]
    KeyOutOfRange { key: u64, lo: u64, hi: u64 },
    #[error("redistribution stalled at {received} of {expected} expected keys (lost message or wrong expected count)")]
    RedistributionStalled { received: u64, expected: u64 },
    #[error("rank thread panicked: {0}")]
    RankPanicked(String),
}

/// Everything a rank's control thread owns for the duration of a run.
pub struct RankHarness {
    pub ep: Arc<crate::amnet::Endpoint>,
    pub ctx: CollectiveContext,
    pub keys: Vec<u64>,
    pub spec: ProblemSpec,
    pub num_ranks: usize,
}

impl RankHarness {
    pub fn rank(&self) -> usize {
        self.ep.rank()
    }
}

/// What one iteration produces on one rank.
pub struct IterationOutcome {
    pub key_range: (u64, u64),
    pub global_offset: u64,
    /// Rank of each key value in the owned range, in global coordinates.
    pub rank_array: Vec<u64>,
    /// Frequency of each key value in the owned range.
    pub histogram: Vec<u64>,
    /// Keys this rank held after redistribution.
    pub total_local_keys: u64,
    pub computation_seconds: f64,
    pub communication_seconds: f64,
    pub step_seconds: Vec<(&'static str, f64)>,
}

/// Per-rank results of a full engine run (all iterations).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankOutput {
    pub rank: usize,
    pub key_range: (u64, u64),
    pub global_offset: u64,
    /// Final iteration's rank array over the owned key range.
    pub rank_array: Vec<u64>,
    /// Final iteration's key-frequency histogram over the owned key range.
    pub histogram: Vec<u64>,
    /// Keys received in the final iteration's redistribution.
    pub total_local_keys: u64,
    /// Wall time of each iteration as seen by this rank.
    pub iteration_seconds: Vec<f64>,
    /// Computational-step time summed over all iterations.
    pub computation_seconds: f64,
    /// Non-computational (exchange) step time summed over all iterations.
    pub communication_seconds: f64,
    /// Per-step wall time summed over all iterations.
    pub step_seconds: BTreeMap<String, f64>,
}

/// One engine execution: `iterations` sorts of the same generated keys.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EngineRun {
    pub num_ranks: usize,
    pub threads_per_rank: usize,
    pub iterations: u32,
    pub ranks: Vec<RankOutput>,
}

impl EngineRun {
    /// Per-iteration wall time, taking the slowest rank for each iteration.
    pub fn iteration_maxes(&self) -> Vec<f64> {
        let iterations = self.iterations as usize;
        (0..iterations)
            .map(|i| {
                self.ranks
                    .iter()
                    .map(|r| r.iteration_seconds[i])
                    .fold(0.0f64, f64::max)
            })
            .collect()
    }

    /// The run's time: maximum iteration time across iterations.
    pub fn run_seconds(&self) -> f64 {
        self.iteration_maxes().iter().fold(0.0f64, |a, &b| a.max(b))
    }

    pub fn total_received(&self) -> u64 {
        self.ranks.iter().map(|r| r.total_local_keys).sum()
    }

    /// Stitch the per-rank rank arrays into one array over the whole key
    /// space, in rank order.
    pub fn stitched_rank_array(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for rank in &self.ranks {
            out.extend_from_slice(&rank.rank_array);
        }
        out
    }

    /// Stitch the per-rank histograms into one array over the key space.
    pub fn stitched_histogram(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for rank in &self.ranks {
            out.extend_from_slice(&rank.histogram);
        }
        out
    }

    pub fn rank_ranges(&self) -> Vec<(u64, u64)> {
        self.ranks.iter().map(|r| r.key_range).collect()
    }
}

/// Contiguous static chunk `[start, end)` of `len` items for thread `tid`
/// of `threads`; the first `len % threads` chunks take one extra item.
pub fn chunk_bounds(len: usize, threads: usize, tid: usize) -> (usize, usize) {
    let base = len / threads;
    let extra = len % threads;
    let start = tid * base + tid.min(extra);
    let end = start + base + usize::from(tid < extra);
    (start, end)
}

pub(crate) fn validate_run(
    spec: &ProblemSpec,
    num_ranks: usize,
) -> Result<(), EngineError> {
    spec.validate()?;
    spec.keys_per_rank(num_ranks)?;
    if num_ranks as u64 > spec.num_buckets {
        return Err(EngineError::Config(format!(
            "{num_ranks} ranks exceed {} buckets; the bucket map cannot feed every rank",
            spec.num_buckets
        )));
    }
    Ok(())
}

/// Spawn `num_ranks` control threads over a fresh fabric and run
/// `iterations` timed iterations on each. `setup` runs once per rank before
/// the first iteration (handler registration); `iteration` is the engine
/// body. Key generation happens before timing starts.
pub(crate) fn run_engine<S, Setup, Iter>(
    spec: &ProblemSpec,
    num_ranks: usize,
    threads_per_rank: usize,
    transport: TransportConfig,
    iterations: u32,
    setup: Setup,
    iteration: Iter,
) -> Result<EngineRun, EngineError>
where
    S: Send,
    Setup: Fn(&RankHarness) -> Result<S, EngineError> + Sync,
    Iter: Fn(&RankHarness, &mut S) -> Result<IterationOutcome, EngineError> + Sync,
{
    validate_run(spec, num_ranks)?;
    if iterations == 0 {
        return Err(EngineError::Config("iterations must be at least 1".into()));
    }
    let fabric = Fabric::new(num_ranks, transport)?;

    let mut outputs: Vec<Option<Result<RankOutput, EngineError>>> =
        (0..num_ranks).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..num_ranks)
            .map(|rank| {
                let fabric = fabric.clone();
                let setup = &setup;
                let iteration = &iteration;
                scope.spawn(move || -> Result<RankOutput, EngineError> {
                    let ep = Arc::new(fabric.endpoint(rank)?);
                    let ctx = CollectiveContext::new(Arc::clone(&ep))?;
                    let keys = workload::generate_keys(spec, rank, num_ranks)?.keys;
                    let harness = RankHarness {
                        ep,
                        ctx,
                        keys,
                        spec: *spec,
                        num_ranks,
                    };
                    let mut state = setup(&harness)?;

                    let mut iteration_seconds = Vec::with_capacity(iterations as usize);
                    let mut computation_seconds = 0.0;
                    let mut communication_seconds = 0.0;
                    let mut step_seconds: BTreeMap<String, f64> = BTreeMap::new();
                    let mut last = None;
                    for _ in 0..iterations {
                        harness.ctx.barrier()?;
                        let begin = Instant::now();
                        let outcome = iteration(&harness, &mut state)?;
                        iteration_seconds.push(begin.elapsed().as_secs_f64());
                        computation_seconds += outcome.computation_seconds;
                        communication_seconds += outcome.communication_seconds;
                        for (name, seconds) in &outcome.step_seconds {
                            *step_seconds.entry((*name).to_string()).or_default() += seconds;
                        }
                        last = Some(outcome);
                    }
                    // Everyone finishes before anyone inspects the fabric.
                    harness.ctx.barrier()?;

                    let last = last.expect("at least one iteration");
                    Ok(RankOutput {
                        rank,
                        key_range: last.key_range,
                        global_offset: last.global_offset,
                        rank_array: last.rank_array,
                        histogram: last.histogram,
                        total_local_keys: last.total_local_keys,
                        iteration_seconds,
                        computation_seconds,
                        communication_seconds,
                        step_seconds,
                    })
                })
            })
            .collect();
        for (slot, handle) in outputs.iter_mut().zip(handles) {
            *slot = Some(match handle.join() {
                Ok(result) => result,
                Err(cause) => Err(EngineError::RankPanicked(panic_text(cause.as_ref()))),
            });
        }
    });

    let mut ranks = Vec::with_capacity(num_ranks);
    for output in outputs {
        ranks.push(output.expect("all rank slots filled")?);
    }
    debug_assert!(fabric.is_quiescent(), "packets leaked after run");
    Ok(EngineRun {
        num_ranks,
        threads_per_rank,
        iterations,
        ranks,
    })
}

fn panic_text(cause: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = cause.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = cause.downcast_ref::<String>() {
        s.clone()
    } else {
        "opaque panic payload".to_string()
    }
}

/// Stopwatch for the per-step breakdown inside an iteration body.
pub(crate) struct StepTimer {
    started: Instant,
    pub steps: Vec<(&'static str, f64)>,
}

impl StepTimer {
    pub fn new() -> Self {
        StepTimer {
            started: Instant::now(),
            steps: Vec::new(),
        }
    }

    /// Close the current step under `name` and start the next.
    pub fn lap(&mut self, name: &'static str) -> f64 {
        let now = Instant::now();
        let seconds = now.duration_since(self.started).as_secs_f64();
        self.steps.push((name, seconds));
        self.started = now;
        seconds
    }

    pub fn total_of(&self, names: &[&str]) -> f64 {
        self.steps
            .iter()
            .filter(|(name, _)| names.contains(name))
            .map(|(_, s)| s)
            .sum()
    }
}
