//! Ground-truth verification: a sequential oracle over the full key stream,
//! checked against the engines' stitched outputs by exact equality.
//!
//! The oracle shares only key generation with the engines; histogramming
//! and scanning here are straight-line reimplementations, independent of
//! the bucketing and mapping code they check.

use thiserror::Error;

use crate::workload::{self, ProblemSpec, WorkloadError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("stitched ranges do not cover the key space: expected [{expected_lo}, {expected_hi}) next, got [{got_lo}, {got_hi})")]
    CoverageGap {
        expected_lo: u64,
        expected_hi: u64,
        got_lo: u64,
        got_hi: u64,
    },
    #[error("piece for range [{lo}, {hi}) has {len} entries")]
    PieceLengthMismatch { lo: u64, hi: u64, len: usize },
}

/// For every key value `v` in `[0, max_key)`: the number of keys `<= v` in
/// the global multiset, i.e. the rank the sort engines must assign to `v`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleRanks {
    pub max_key: u64,
    pub ranks: Vec<u64>,
}

/// Histogram the whole single-rank key stream and scan it. Desk-scale specs
/// only (the oracle materializes all N keys and max_key counters).
pub fn oracle_rank(spec: &ProblemSpec) -> Result<OracleRanks, VerifyError> {
    let keys = workload::generate_keys(spec, 0, 1)?.keys;
    let mut histogram = vec![0u64; spec.max_key as usize];
    for key in keys {
        histogram[key as usize] += 1;
    }
    Ok(OracleRanks {
        max_key: spec.max_key,
        ranks: scan_histogram(&histogram),
    })
}

fn scan_histogram(histogram: &[u64]) -> Vec<u64> {
    let mut ranks = Vec::with_capacity(histogram.len());
    let mut running = 0u64;
    for &count in histogram {
        running += count;
        ranks.push(running);
    }
    ranks
}

/// Stitch per-rank `(range, rank_array)` pieces into one array over
/// `[0, max_key)`, verifying the ranges tile the key space in order.
pub fn stitch_rank_arrays(
    pieces: &[((u64, u64), &[u64])],
    max_key: u64,
) -> Result<Vec<u64>, VerifyError> {
    let mut out = Vec::with_capacity(max_key as usize);
    let mut cursor = 0u64;
    for &((lo, hi), values) in pieces {
        if lo != cursor || hi < lo || hi > max_key {
            return Err(VerifyError::CoverageGap {
                expected_lo: cursor,
                expected_hi: max_key,
                got_lo: lo,
                got_hi: hi,
            });
        }
        if values.len() as u64 != hi - lo {
            return Err(VerifyError::PieceLengthMismatch {
                lo,
                hi,
                len: values.len(),
            });
        }
        out.extend_from_slice(values);
        cursor = hi;
    }
    if cursor != max_key {
        return Err(VerifyError::CoverageGap {
            expected_lo: cursor,
            expected_hi: max_key,
            got_lo: cursor,
            got_hi: cursor,
        });
    }
    Ok(out)
}

/// Outcome of one verification: exact elementwise comparison against the
/// oracle, reporting the first divergent key value on failure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    pub checked: u64,
    pub first_divergence: Option<Divergence>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Divergence {
    pub key: u64,
    pub expected: u64,
    pub actual: u64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.first_divergence.is_none()
    }
}

impl std::fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.first_divergence {
            None => write!(f, "verification passed ({} key values)", self.checked),
            Some(d) => write!(
                f,
                "verification FAILED at key {}: expected rank {}, got {}",
                d.key, d.expected, d.actual
            ),
        }
    }
}

/// Compare an assembled rank array against the oracle, value by value.
pub fn verify_run(assembled: &[u64], oracle: &OracleRanks) -> VerifyReport {
    if assembled.len() != oracle.ranks.len() {
        // Length mismatch counts as divergence at the first missing key.
        let key = assembled.len().min(oracle.ranks.len()) as u64;
        return VerifyReport {
            checked: key,
            first_divergence: Some(Divergence {
                key,
                expected: oracle.ranks.get(key as usize).copied().unwrap_or(0),
                actual: assembled.get(key as usize).copied().unwrap_or(0),
            }),
        };
    }
    for (key, (&actual, &expected)) in assembled.iter().zip(&oracle.ranks).enumerate() {
        if actual != expected {
            return VerifyReport {
                checked: key as u64,
                first_divergence: Some(Divergence {
                    key: key as u64,
                    expected,
                    actual,
                }),
            };
        }
    }
    VerifyReport {
        checked: assembled.len() as u64,
        first_divergence: None,
    }
}
