//! Bulk-synchronous baseline sort: one single-threaded rank per simulated
//! core, eight steps per iteration: count buckets, group keys, allreduce
//! the bucket sizes, map buckets to ranks greedily, exchange counts, move
//! keys with alltoallv, then counting-sort the owned key range. Serves as
//! the comparison target and cross-check for the asynchronous engine.

use crate::amnet::TransportConfig;
use crate::engine::{
    run_engine, EngineError, EngineRun, IterationOutcome, RankHarness, StepTimer,
};
use crate::workload::ProblemSpec;

/// The bucket of a key: its most significant `log2(num_buckets)` bits within
/// the `log2(max_key)`-bit key space. Monotone non-decreasing in the key.
/// Both arguments must be powers of two with `num_buckets <= max_key`, and
/// `key < max_key`.
#[inline]
pub fn bucket_of(key: u64, num_buckets: u64, max_key: u64) -> usize {
    debug_assert!(key < max_key);
    (key >> bucket_shift(num_buckets, max_key)) as usize
}

#[inline]
pub(crate) fn bucket_shift(num_buckets: u64, max_key: u64) -> u32 {
    max_key.trailing_zeros() - num_buckets.trailing_zeros()
}

/// Per-bucket key counts of a slice.
pub fn count_buckets(keys: &[u64], num_buckets: u64, max_key: u64) -> Vec<u64> {
    let shift = bucket_shift(num_buckets, max_key);
    let mut counts = vec![0u64; num_buckets as usize];
    for &key in keys {
        debug_assert!(key < max_key);
        counts[(key >> shift) as usize] += 1;
    }
    counts
}

/// Group `keys` by ascending bucket, stably. Returns the grouped permutation
/// and the per-bucket displacements (exclusive prefix sums of `counts`).
pub fn local_bucket_sort(
    keys: &[u64],
    counts: &[u64],
    num_buckets: u64,
    max_key: u64,
) -> (Vec<u64>, Vec<u64>) {
    let shift = bucket_shift(num_buckets, max_key);
    let mut displs = Vec::with_capacity(counts.len());
    let mut acc = 0u64;
    for &c in counts {
        displs.push(acc);
        acc += c;
    }
    let mut cursors = displs.clone();
    let mut bucketed = vec![0u64; keys.len()];
    for &key in keys {
        let b = (key >> shift) as usize;
        bucketed[cursors[b] as usize] = key;
        cursors[b] += 1;
    }
    (bucketed, displs)
}

/// Bucket-to-rank assignment plus the derived per-rank key ranges and
/// expected receive totals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BucketMap {
    /// Owning rank of each bucket; non-decreasing.
    pub bucket_to_rank: Vec<usize>,
    /// Disjoint, contiguous key intervals `[lo, hi)` covering the key space.
    /// Trailing ranks left without buckets own empty intervals at the top.
    pub rank_key_range: Vec<(u64, u64)>,
    /// Keys each rank will receive: the global counts of its buckets.
    pub rank_expected_recv: Vec<u64>,
}

impl BucketMap {
    pub fn num_ranks(&self) -> usize {
        self.rank_key_range.len()
    }

    /// Sum of expected receive counts of all lower ranks; the base the
    /// rank's local prefix sums are offset by.
    pub fn global_offset(&self, rank: usize) -> u64 {
        self.rank_expected_recv[..rank].iter().sum()
    }
}

/// Walk buckets in order, accumulating global counts; a bucket goes to the
/// current rank, and the walk advances to the next rank once the
/// accumulated total reaches `(rank + 1) * (N / num_ranks)` (the bucket
/// that crosses the threshold stays with the current rank; the rank index
/// clamps at the last rank).
pub fn map_buckets_greedy(
    c_global: &[u64],
    num_ranks: usize,
    max_key: u64,
) -> Result<BucketMap, EngineError> {
    let num_buckets = c_global.len();
    if num_ranks == 0 || num_ranks > num_buckets {
        return Err(EngineError::Config(format!(
            "{num_ranks} ranks for {num_buckets} buckets; need 1 <= ranks <= buckets"
        )));
    }
    let total: u64 = c_global.iter().sum();
    let target = total / num_ranks as u64;

    let mut bucket_to_rank = Vec::with_capacity(num_buckets);
    let mut rank_expected_recv = vec![0u64; num_ranks];
    let mut acc = 0u64;
    let mut rank = 0usize;
    for &count in c_global {
        acc += count;
        bucket_to_rank.push(rank);
        rank_expected_recv[rank] += count;
        if acc >= (rank as u64 + 1) * target {
            rank = (rank + 1).min(num_ranks - 1);
        }
    }

    let bucket_width = max_key / num_buckets as u64;
    let mut rank_key_range = Vec::with_capacity(num_ranks);
    let mut next_bucket = 0usize;
    for r in 0..num_ranks {
        let first = next_bucket;
        while next_bucket < num_buckets && bucket_to_rank[next_bucket] == r {
            next_bucket += 1;
        }
        let lo = first as u64 * bucket_width;
        let hi = next_bucket as u64 * bucket_width;
        rank_key_range.push((lo, hi));
    }
    debug_assert_eq!(next_bucket, num_buckets);

    Ok(BucketMap {
        bucket_to_rank,
        rank_key_range,
        rank_expected_recv,
    })
}

/// Frequency of each key value in `[lo, hi)`; errors on any key outside.
pub fn key_frequencies(keys: &[u64], range: (u64, u64)) -> Result<Vec<u64>, EngineError> {
    let (lo, hi) = range;
    let mut histogram = vec![0u64; (hi - lo) as usize];
    for &key in keys {
        if key < lo || key >= hi {
            return Err(EngineError::KeyOutOfRange { key, lo, hi });
        }
        histogram[(key - lo) as usize] += 1;
    }
    Ok(histogram)
}

/// Inclusive prefix sum of a local histogram, shifted into global
/// coordinates: entry `v - lo` is the global rank of key value `v`.
pub fn ranks_from_histogram(histogram: &[u64], global_offset: u64) -> Vec<u64> {
    let mut out = Vec::with_capacity(histogram.len());
    let mut running = global_offset;
    for &count in histogram {
        running += count;
        out.push(running);
    }
    out
}

/// Final ranking by counting sort over the rank's owned key interval.
pub fn counting_sort_rank(
    received_keys: &[u64],
    range: (u64, u64),
    global_offset: u64,
) -> Result<Vec<u64>, EngineError> {
    Ok(ranks_from_histogram(
        &key_frequencies(received_keys, range)?,
        global_offset,
    ))
}

fn iteration(harness: &RankHarness) -> Result<IterationOutcome, EngineError> {
    let spec = &harness.spec;
    let me = harness.rank();
    let num_ranks = harness.num_ranks;
    let (num_buckets, max_key) = (spec.num_buckets, spec.max_key);
    let mut timer = StepTimer::new();

    // Step 2: per-bucket counts.
    let c_local = count_buckets(&harness.keys, num_buckets, max_key);
    timer.lap("count");

    // Step 3: group keys by bucket.
    let (bucketed, displs) = local_bucket_sort(&harness.keys, &c_local, num_buckets, max_key);
    timer.lap("bucket");

    // Step 4: global bucket sizes.
    let c_global = harness.ctx.allreduce_sum(&c_local)?;
    timer.lap("allreduce");

    // Step 5: greedy bucket-to-rank map and the send layout it implies:
    // rank r gets the contiguous bucketed segment covering its buckets.
    let map = map_buckets_greedy(&c_global, num_ranks, max_key)?;
    let bucket_width = max_key / num_buckets;
    let mut send_counts = vec![0u64; num_ranks];
    let mut send_displs = vec![0u64; num_ranks];
    for (r, &(lo, hi)) in map.rank_key_range.iter().enumerate() {
        let first_bucket = (lo / bucket_width) as usize;
        let last_bucket = (hi / bucket_width) as usize; // exclusive
        send_counts[r] = c_local[first_bucket..last_bucket].iter().sum();
        send_displs[r] = if first_bucket < displs.len() {
            displs[first_bucket]
        } else {
            bucketed.len() as u64
        };
    }
    timer.lap("map");

    // Step 6: exchange receive counts.
    let recv_counts = harness.ctx.alltoall(&send_counts)?;
    timer.lap("alltoall");

    // Step 7: redistribute keys.
    let received = harness
        .ctx
        .alltoallv(&bucketed, &send_counts, &send_displs, &recv_counts)?;
    timer.lap("alltoallv");

    // Step 8: counting sort of the owned interval.
    let range = map.rank_key_range[me];
    let global_offset = map.global_offset(me);
    let histogram = key_frequencies(&received, range)?;
    let rank_array = ranks_from_histogram(&histogram, global_offset);
    timer.lap("ranking");

    debug_assert_eq!(received.len() as u64, map.rank_expected_recv[me]);
    let computation_seconds = timer.total_of(&["count", "bucket", "map", "ranking"]);
    let communication_seconds = timer.total_of(&["allreduce", "alltoall", "alltoallv"]);
    Ok(IterationOutcome {
        key_range: range,
        global_offset,
        rank_array,
        histogram,
        total_local_keys: received.len() as u64,
        computation_seconds,
        communication_seconds,
        step_seconds: timer.steps,
    })
}

/// Run the bulk-synchronous engine: `num_ranks` single-threaded ranks,
/// `iterations` sorts of the same keys.
pub fn run(
    spec: &ProblemSpec,
    num_ranks: usize,
    transport: TransportConfig,
    iterations: u32,
) -> Result<EngineRun, EngineError> {
    run_engine(
        spec,
        num_ranks,
        1,
        transport,
        iterations,
        |_harness| Ok(()),
        |harness, _state| iteration(harness),
    )
}
