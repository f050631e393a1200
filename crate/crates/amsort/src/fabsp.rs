//! Multithreaded fine-grained asynchronous sort engine.
//!
//! Keeps the superstep structure of the baseline but replaces the bulk key
//! exchange with a stream of aggregated active messages: every worker thread
//! walks its static chunk of the key array, pushes each key into a
//! thread-local per-destination aggregation buffer, and ships the buffer as
//! one message when it fills. Arriving messages are counted directly into a
//! shared atomic histogram by the message handler, so receive-side work
//! overlaps with sending; each thread then drives progress on its device
//! until the rank has seen its expected receive total. Ranking is a
//! three-phase parallel prefix sum over the quiesced histogram.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use crate::amnet::{CompletionCounter, Endpoint, HandlerId, Packet, TransportConfig};
use crate::bsp::{bucket_of, count_buckets, map_buckets_greedy, BucketMap};
use crate::engine::{
    chunk_bounds, run_engine, EngineError, EngineRun, IterationOutcome, RankHarness, StepTimer,
};
use crate::workload::ProblemSpec;

/// Handler id of the key-redistribution message.
pub const KEY_HANDLER_ID: HandlerId = 0xA0;

pub const KEY_BYTES: usize = 8;

/// A quiescence wait that sees no arrival for this long is a lost message
/// or a wrong expected count, and surfaces as an error instead of a hang.
const REDISTRIBUTE_STALL_TIMEOUT: Duration = Duration::from_secs(60);

/// Per-rank array of atomically updatable key-frequency counters spanning
/// the rank's owned interval, plus the arrival counter the redistribution
/// phase quiesces on.
pub struct SharedHistogram {
    lo: u64,
    hi: u64,
    counters: Vec<AtomicU64>,
    received: AtomicU64,
    expected: u64,
}

impl SharedHistogram {
    pub fn new(range: (u64, u64), expected: u64) -> Self {
        let (lo, hi) = range;
        SharedHistogram {
            lo,
            hi,
            counters: (0..(hi - lo)).map(|_| AtomicU64::new(0)).collect(),
            received: AtomicU64::new(0),
            expected,
        }
    }

    pub fn range(&self) -> (u64, u64) {
        (self.lo, self.hi)
    }

    pub fn expected(&self) -> u64 {
        self.expected
    }

    pub fn received(&self) -> u64 {
        self.received.load(Ordering::Acquire)
    }

    pub fn is_quiesced(&self) -> bool {
        self.received() >= self.expected
    }

    /// The message handler body: count every key in `payload`, then bump the
    /// arrival counter by the payload's key count. Reentrant; concurrent
    /// invocations for distinct payloads compose. Panics on a key outside
    /// the owned range or a torn payload; either means a mapping or framing
    /// bug, surfaced as a fatal transport diagnostic.
    pub fn apply_payload(&self, payload: &[u8]) {
        assert!(
            payload.len().is_multiple_of(KEY_BYTES),
            "key payload of {} bytes is not a whole number of keys",
            payload.len()
        );
        for chunk in payload.chunks_exact(KEY_BYTES) {
            let key = u64::from_le_bytes(chunk.try_into().unwrap());
            assert!(
                key >= self.lo && key < self.hi,
                "key {key} outside owned range [{}, {})",
                self.lo,
                self.hi
            );
            self.counters[(key - self.lo) as usize].fetch_add(1, Ordering::Relaxed);
        }
        self.received
            .fetch_add((payload.len() / KEY_BYTES) as u64, Ordering::AcqRel);
    }

    /// Plain copy of the counters; meaningful once quiesced.
    pub fn snapshot(&self) -> Vec<u64> {
        self.counters
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect()
    }

    pub fn total_counted(&self) -> u64 {
        self.counters.iter().map(|c| c.load(Ordering::Relaxed)).sum()
    }
}

/// Where the key handler finds the live histogram. One slot per rank,
/// registered once; each iteration installs its freshly sized histogram
/// before any key of that iteration can arrive.
#[derive(Default)]
pub struct HistogramSlot {
    current: RwLock<Option<Arc<SharedHistogram>>>,
}

impl HistogramSlot {
    pub fn install(&self, histogram: Arc<SharedHistogram>) {
        *self.current.write().unwrap() = Some(histogram);
    }

    fn get(&self) -> Option<Arc<SharedHistogram>> {
        self.current.read().unwrap().clone()
    }
}

/// Register the key-message handler on `ep`, counting into whatever
/// histogram `slot` holds at delivery time.
pub fn register_key_handler(
    ep: &Endpoint,
    slot: Arc<HistogramSlot>,
) -> Result<(), EngineError> {
    ep.register_handler(KEY_HANDLER_ID, move |delivery| {
        let histogram = slot
            .get()
            .expect("key message arrived with no live histogram");
        histogram.apply_payload(delivery.payload);
    })?;
    Ok(())
}

/// Count buckets with `threads` workers over static contiguous chunks of
/// `keys`, merging the thread-local histograms under a lock. Equals
/// `count_buckets` on the same input.
pub fn parallel_count(
    keys: &[u64],
    threads: usize,
    num_buckets: u64,
    max_key: u64,
) -> Vec<u64> {
    let merged = Mutex::new(vec![0u64; num_buckets as usize]);
    std::thread::scope(|scope| {
        for tid in 0..threads {
            let merged = &merged;
            let (start, end) = chunk_bounds(keys.len(), threads, tid);
            let chunk = &keys[start..end];
            scope.spawn(move || {
                let local = count_buckets(chunk, num_buckets, max_key);
                let mut merged = merged.lock().unwrap();
                for (m, l) in merged.iter_mut().zip(local) {
                    *m += l;
                }
            });
        }
    });
    merged.into_inner().unwrap()
}

/// One worker thread's per-destination aggregation buffers. Strictly
/// thread-local. On the zero-copy path each slot is a pooled packet filled
/// in place; otherwise a plain staging vector that the transport copies at
/// send time.
struct AggBufferSet<'ep> {
    ep: &'ep Endpoint,
    packets: Vec<Option<Packet>>,
    staged: Vec<Vec<u64>>,
    capacity_keys: usize,
    zero_copy: bool,
    counter: CompletionCounter,
}

impl<'ep> AggBufferSet<'ep> {
    fn new(ep: &'ep Endpoint) -> Self {
        let num_ranks = ep.num_ranks();
        let zero_copy = ep.config().zero_copy_enabled;
        let capacity_keys = ep.config().packet_capacity / KEY_BYTES;
        AggBufferSet {
            ep,
            packets: (0..num_ranks).map(|_| None).collect(),
            staged: vec![Vec::new(); if zero_copy { 0 } else { num_ranks }],
            capacity_keys,
            zero_copy,
            counter: CompletionCounter::new(),
        }
    }

    fn push(&mut self, dest: usize, key: u64) -> Result<(), EngineError> {
        if self.zero_copy {
            let slot = &mut self.packets[dest];
            if slot.is_none() {
                *slot = Some(self.ep.acquire_packet()?);
            }
            let packet = slot.as_mut().unwrap();
            packet.push_u64(key);
            if packet.remaining() < KEY_BYTES {
                let full = slot.take().unwrap();
                self.ep.send_am(dest, KEY_HANDLER_ID, full, &self.counter)?;
            }
        } else {
            let staged = &mut self.staged[dest];
            staged.push(key);
            if staged.len() >= self.capacity_keys {
                self.flush_staged(dest)?;
            }
        }
        Ok(())
    }

    fn flush_staged(&mut self, dest: usize) -> Result<(), EngineError> {
        let staged = &mut self.staged[dest];
        if staged.is_empty() {
            return Ok(());
        }
        let bytes: Vec<u8> = staged.iter().flat_map(|k| k.to_le_bytes()).collect();
        staged.clear();
        self.ep
            .send_am_bytes(dest, KEY_HANDLER_ID, &bytes, &self.counter)?;
        Ok(())
    }

    /// Ship every non-empty buffer; afterwards all buffers are empty.
    fn flush_all(&mut self) -> Result<(), EngineError> {
        if self.zero_copy {
            for dest in 0..self.packets.len() {
                if let Some(packet) = self.packets[dest].take() {
                    if packet.is_empty() {
                        continue;
                    }
                    self.ep
                        .send_am(dest, KEY_HANDLER_ID, packet, &self.counter)?;
                }
            }
        } else {
            for dest in 0..self.staged.len() {
                self.flush_staged(dest)?;
            }
        }
        Ok(())
    }
}

/// Stream `keys` to their owning ranks with `threads` workers and count
/// arrivals into `hist`; returns once this rank has received its expected
/// total. Each worker walks a static chunk, aggregates per destination,
/// flushes at the end, then spins progress on its device (`tid %
/// num_devices`) until quiescence.
pub fn redistribute(
    keys: &[u64],
    map: &BucketMap,
    ep: &Arc<Endpoint>,
    threads: usize,
    hist: &SharedHistogram,
    num_buckets: u64,
    max_key: u64,
) -> Result<(), EngineError> {
    let results: Vec<Result<(), EngineError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|tid| {
                let (start, end) = chunk_bounds(keys.len(), threads, tid);
                let chunk = &keys[start..end];
                scope.spawn(move || -> Result<(), EngineError> {
                    crate::amnet::set_thread_slot(tid);
                    let device = tid % ep.num_devices();
                    let mut buffers = AggBufferSet::new(ep);
                    for &key in chunk {
                        let dest = map.bucket_to_rank[bucket_of(key, num_buckets, max_key)];
                        buffers.push(dest, key)?;
                    }
                    buffers.flush_all()?;
                    let mut last_seen = hist.received();
                    let mut last_arrival = Instant::now();
                    while !hist.is_quiesced() {
                        if ep.progress(device)? == 0 {
                            std::thread::yield_now();
                        }
                        let seen = hist.received();
                        if seen != last_seen {
                            last_seen = seen;
                            last_arrival = Instant::now();
                        } else if last_arrival.elapsed() > REDISTRIBUTE_STALL_TIMEOUT {
                            return Err(EngineError::RedistributionStalled {
                                received: seen,
                                expected: hist.expected(),
                            });
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("redistribute worker panicked"))
            .collect()
    });
    results.into_iter().collect()
}

/// Three-phase parallel prefix sum over the quiesced histogram: per-thread
/// chunk sums, an exclusive scan of those sums on one thread, then each
/// thread scans its chunk on top of its offset plus `global_offset`.
/// Returns the inclusive prefix sums in global coordinates.
pub fn parallel_rank(hist: &SharedHistogram, threads: usize, global_offset: u64) -> Vec<u64> {
    let counts = hist.snapshot();
    let len = counts.len();

    let mut chunk_sums = vec![0u64; threads];
    std::thread::scope(|scope| {
        for (tid, sum_slot) in chunk_sums.iter_mut().enumerate() {
            let (start, end) = chunk_bounds(len, threads, tid);
            let chunk = &counts[start..end];
            scope.spawn(move || {
                *sum_slot = chunk.iter().sum();
            });
        }
    });

    let mut offsets = vec![0u64; threads];
    let mut running = global_offset;
    for (offset, sum) in offsets.iter_mut().zip(&chunk_sums) {
        *offset = running;
        running += sum;
    }

    let mut out = vec![0u64; len];
    std::thread::scope(|scope| {
        let mut rest = out.as_mut_slice();
        for (tid, &offset) in offsets.iter().enumerate() {
            let (start, end) = chunk_bounds(len, threads, tid);
            let (mine, tail) = rest.split_at_mut(end - start);
            rest = tail;
            let chunk = &counts[start..end];
            scope.spawn(move || {
                let mut running = offset;
                for (slot, &count) in mine.iter_mut().zip(chunk) {
                    running += count;
                    *slot = running;
                }
            });
        }
    });
    out
}

struct RankState {
    slot: Arc<HistogramSlot>,
    threads: usize,
}

fn iteration(
    harness: &RankHarness,
    state: &mut RankState,
) -> Result<IterationOutcome, EngineError> {
    let spec = &harness.spec;
    let me = harness.rank();
    let threads = state.threads;
    let (num_buckets, max_key) = (spec.num_buckets, spec.max_key);
    let mut timer = StepTimer::new();

    // Step 2: parallel bucket count.
    let h_local = parallel_count(&harness.keys, threads, num_buckets, max_key);
    timer.lap("count");

    // Step 3: global bucket sizes via reduce + broadcast.
    let h_global = harness.ctx.allreduce_sum(&h_local)?;
    timer.lap("allreduce");

    // Step 4: same greedy map as the baseline; also fixes this rank's
    // expected receive total.
    let map = map_buckets_greedy(&h_global, harness.num_ranks, max_key)?;
    let range = map.rank_key_range[me];
    let global_offset = map.global_offset(me);
    let hist = Arc::new(SharedHistogram::new(range, map.rank_expected_recv[me]));
    state.slot.install(Arc::clone(&hist));
    timer.lap("map");

    // Step 5: redistribution. No rank may receive keys before its histogram
    // for this iteration is live; entering the barrier after installing
    // guarantees every sender's first key finds a current histogram.
    harness.ctx.barrier()?;
    redistribute(
        &harness.keys,
        &map,
        &harness.ep,
        threads,
        &hist,
        num_buckets,
        max_key,
    )?;
    timer.lap("redistribute");

    // Step 6: parallel prefix-sum ranking.
    let rank_array = parallel_rank(&hist, threads, global_offset);
    timer.lap("ranking");

    let computation_seconds = timer.total_of(&["count", "map", "ranking"]);
    let communication_seconds = timer.total_of(&["allreduce", "redistribute"]);
    Ok(IterationOutcome {
        key_range: range,
        global_offset,
        rank_array,
        histogram: hist.snapshot(),
        total_local_keys: hist.received(),
        computation_seconds,
        communication_seconds,
        step_seconds: timer.steps,
    })
}

/// Run the fine-grained asynchronous engine: `num_ranks` ranks of
/// `threads_per_rank` workers each, `iterations` sorts of the same keys.
pub fn run(
    spec: &ProblemSpec,
    num_ranks: usize,
    threads_per_rank: usize,
    transport: TransportConfig,
    iterations: u32,
) -> Result<EngineRun, EngineError> {
    if threads_per_rank == 0 {
        return Err(EngineError::Config(
            "threads_per_rank must be at least 1".into(),
        ));
    }
    run_engine(
        spec,
        num_ranks,
        threads_per_rank,
        transport,
        iterations,
        |harness| {
            let slot = Arc::new(HistogramSlot::default());
            register_key_handler(&harness.ep, Arc::clone(&slot))?;
            Ok(RankState {
                slot,
                threads: threads_per_rank,
            })
        },
        iteration,
    )
}

/// Transport config sized for a fine-grained run.
pub fn transport_for(num_ranks: usize, threads_per_rank: usize) -> TransportConfig {
    TransportConfig {
        pool_size: TransportConfig::recommended_pool_size(num_ranks, threads_per_rank),
        ..TransportConfig::default()
    }
}
