//! Key workload generation: a deterministic Gaussian-sum key stream split
//! across ranks.
//!
//! Keys come from the classic 46-bit multiplicative congruential generator
//! (multiplier 5^13, modulus 2^46). Each key is the mean of four consecutive
//! uniforms scaled to the key space, which gives the bell-shaped per-bucket
//! distribution the sort engines are stressed with. Rank `r` of `P` starts
//! its stream at `skip_ahead(seed, 4 * r * N / P)`, so the concatenation of
//! all rank slices is the same stream regardless of `P`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// LCG multiplier, 5^13.
pub const LCG_MULTIPLIER: u64 = 1_220_703_125;
/// The generator state is taken modulo 2^46.
pub const LCG_MOD_BITS: u32 = 46;
/// Default initial state shared by all standard classes.
pub const DEFAULT_SEED: u64 = 314_159_265;

const LCG_MASK: u64 = (1 << LCG_MOD_BITS) - 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("seed {0} is not a valid generator state (must be odd and in (0, 2^46))")]
    InvalidSeed(u64),
    #[error("{field} = {value} must be a power of two")]
    NotPowerOfTwo { field: &'static str, value: u64 },
    #[error("num_buckets {buckets} exceeds max_key {max_key}")]
    TooManyBuckets { buckets: u64, max_key: u64 },
    #[error("iterations must be at least 1")]
    ZeroIterations,
    #[error("rank {rank} out of range for {num_ranks} ranks")]
    RankOutOfRange { rank: usize, num_ranks: usize },
    #[error("total_keys {total_keys} is not divisible by {num_ranks} ranks")]
    KeysNotDivisible { total_keys: u64, num_ranks: usize },
    #[error("class file line {line}: {message}")]
    ClassParse { line: usize, message: String },
    #[error("unknown class '{0}'")]
    UnknownClass(String),
    #[error("cannot read class file: {0}")]
    Io(String),
}

/// State of the 46-bit multiplicative congruential generator.
///
/// Always odd and nonzero, which makes every step a bijection on the odd
/// residues mod 2^46.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngState(u64);

impl RngState {
    pub fn new(seed: u64) -> Result<Self, WorkloadError> {
        if seed == 0 || seed > LCG_MASK || seed.is_multiple_of(2) {
            return Err(WorkloadError::InvalidSeed(seed));
        }
        Ok(RngState(seed))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    /// Advance one step; returns the uniform value `state' / 2^46` in (0, 1)
    /// and the new state. Exact integer arithmetic throughout.
    pub fn next(self) -> (f64, RngState) {
        let next = mul_mod(LCG_MULTIPLIER, self.0);
        (next as f64 / (1u64 << LCG_MOD_BITS) as f64, RngState(next))
    }

    /// Jump `n` steps in O(log n) by binary exponentiation of the multiplier.
    pub fn skip(self, n: u64) -> RngState {
        let mut factor = 1u64;
        let mut base = LCG_MULTIPLIER;
        let mut n = n;
        while n > 0 {
            if n & 1 == 1 {
                factor = mul_mod(factor, base);
            }
            base = mul_mod(base, base);
            n >>= 1;
        }
        RngState(mul_mod(factor, self.0))
    }
}

fn mul_mod(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) & LCG_MASK as u128) as u64
}

/// Benchmark class parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSpec {
    /// Global key count N. Power of two.
    pub total_keys: u64,
    /// Exclusive key-space bound. Power of two.
    pub max_key: u64,
    /// Bucket count used by the sort engines. Power of two, at most `max_key`.
    pub num_buckets: u64,
    /// Sort iterations per run.
    pub iterations: u32,
    /// Initial generator state.
    pub seed: u64,
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        for (field, value) in [
            ("total_keys", self.total_keys),
            ("max_key", self.max_key),
            ("num_buckets", self.num_buckets),
        ] {
            if !value.is_power_of_two() {
                return Err(WorkloadError::NotPowerOfTwo { field, value });
            }
        }
        if self.num_buckets > self.max_key {
            return Err(WorkloadError::TooManyBuckets {
                buckets: self.num_buckets,
                max_key: self.max_key,
            });
        }
        if self.iterations == 0 {
            return Err(WorkloadError::ZeroIterations);
        }
        RngState::new(self.seed)?;
        Ok(())
    }

    /// Keys each rank generates; errors unless `num_ranks` divides N.
    pub fn keys_per_rank(&self, num_ranks: usize) -> Result<u64, WorkloadError> {
        if num_ranks == 0 || !self.total_keys.is_multiple_of(num_ranks as u64) {
            return Err(WorkloadError::KeysNotDivisible {
                total_keys: self.total_keys,
                num_ranks,
            });
        }
        Ok(self.total_keys / num_ranks as u64)
    }
}

/// One rank's portion of the key stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeySlice {
    pub keys: Vec<u64>,
    pub owner_rank: usize,
}

/// Generate rank `rank`'s slice of the global key stream.
///
/// Pure function of its arguments: the same call always yields the same
/// slice, and concatenating the slices of all ranks reproduces the
/// single-rank stream.
pub fn generate_keys(
    spec: &ProblemSpec,
    rank: usize,
    num_ranks: usize,
) -> Result<KeySlice, WorkloadError> {
    spec.validate()?;
    if rank >= num_ranks {
        return Err(WorkloadError::RankOutOfRange { rank, num_ranks });
    }
    let per_rank = spec.keys_per_rank(num_ranks)?;
    let mut state = RngState::new(spec.seed)?.skip(4 * rank as u64 * per_rank);
    let mut keys = Vec::with_capacity(per_rank as usize);
    for _ in 0..per_rank {
        let mut sum = 0u64;
        for _ in 0..4 {
            state = RngState(mul_mod(LCG_MULTIPLIER, state.0));
            sum += state.0;
        }
        // floor((r1+r2+r3+r4)/4 * max_key) with r_i = state_i / 2^46,
        // evaluated exactly: (sum * max_key) >> 48.
        let key = ((sum as u128 * spec.max_key as u128) >> (LCG_MOD_BITS + 2)) as u64;
        keys.push(key);
    }
    Ok(KeySlice {
        keys,
        owner_rank: rank,
    })
}

/// Named benchmark classes, loadable from a text file.
///
/// File format: one class per line, whitespace-separated fields
/// `name total_keys max_key num_buckets iterations seed`; blank lines and
/// `#` comments are ignored. Loaded classes shadow built-ins of the same
/// name.
#[derive(Clone, Debug, Default)]
pub struct ClassTable {
    classes: BTreeMap<String, ProblemSpec>,
}

impl ClassTable {
    /// The built-in classes. T0/T1 are desk-scale; D and E carry the
    /// standard large-class parameters (accepted in config, far too large
    /// for desk runs).
    pub fn builtin() -> Self {
        let mut classes = BTreeMap::new();
        let entries = [
            ("T0", 1u64 << 16, 1u64 << 11, 1u64 << 6),
            ("T1", 1u64 << 20, 1u64 << 16, 1u64 << 10),
            ("D", 1u64 << 31, 1u64 << 27, 1u64 << 10),
            ("E", 1u64 << 35, 1u64 << 31, 1u64 << 10),
        ];
        for (name, total_keys, max_key, num_buckets) in entries {
            classes.insert(
                name.to_string(),
                ProblemSpec {
                    total_keys,
                    max_key,
                    num_buckets,
                    iterations: 10,
                    seed: DEFAULT_SEED,
                },
            );
        }
        ClassTable { classes }
    }

    pub fn get(&self, name: &str) -> Result<ProblemSpec, WorkloadError> {
        self.classes
            .get(name)
            .copied()
            .ok_or_else(|| WorkloadError::UnknownClass(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn insert(&mut self, name: &str, spec: ProblemSpec) {
        self.classes.insert(name.to_string(), spec);
    }

    /// Parse class definitions and merge them over `self`.
    pub fn merge_from_str(&mut self, text: &str) -> Result<(), WorkloadError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(WorkloadError::ClassParse {
                    line,
                    message: format!("expected 6 fields, got {}", fields.len()),
                });
            }
            let parse = |s: &str, what: &str| {
                s.parse::<u64>().map_err(|e| WorkloadError::ClassParse {
                    line,
                    message: format!("bad {what} '{s}': {e}"),
                })
            };
            let spec = ProblemSpec {
                total_keys: parse(fields[1], "total_keys")?,
                max_key: parse(fields[2], "max_key")?,
                num_buckets: parse(fields[3], "num_buckets")?,
                iterations: parse(fields[4], "iterations")? as u32,
                seed: parse(fields[5], "seed")?,
            };
            spec.validate().map_err(|e| WorkloadError::ClassParse {
                line,
                message: e.to_string(),
            })?;
            self.classes.insert(fields[0].to_string(), spec);
        }
        Ok(())
    }

    pub fn merge_from_file(&mut self, path: &Path) -> Result<(), WorkloadError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| WorkloadError::Io(e.to_string()))?;
        self.merge_from_str(&text)
    }

    /// Render the table in the same format `merge_from_str` accepts.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# name total_keys max_key num_buckets iterations seed\n");
        for (name, s) in &self.classes {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {}",
                name, s.total_keys, s.max_key, s.num_buckets, s.iterations, s.seed
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t0() -> ProblemSpec {
        ClassTable::builtin().get("T0").unwrap()
    }

    #[test]
    fn rng_value_in_range_and_state_odd() {
        let (value, next) = RngState::new(DEFAULT_SEED).unwrap().next();
        assert!(value > 0.0 && value < 1.0);
        assert_eq!(next.raw() % 2, 1);
        assert!(next.raw() < 1 << LCG_MOD_BITS);
    }

    #[test]
    fn rng_is_injective_on_odd_states() {
        // a odd => multiplication mod 2^46 permutes the odd residues:
        // 1000 distinct inputs must map to 1000 distinct outputs.
        let mut seen = std::collections::HashSet::new();
        for k in 0..1000u64 {
            let s = RngState::new(DEFAULT_SEED + 2 * k).unwrap();
            assert!(seen.insert(s.next().1.raw()));
        }
    }

    #[test]
    fn skip_zero_and_one() {
        let s = RngState::new(DEFAULT_SEED).unwrap();
        assert_eq!(s.skip(0), s);
        assert_eq!(s.skip(1), s.next().1);
    }

    #[test]
    fn skip_matches_iterated_next() {
        // Brute-force oracle: n applications of next().
        let s0 = RngState::new(DEFAULT_SEED).unwrap();
        let mut s = s0;
        let mut steps = 0u64;
        for k in 0..=10u32 {
            let target = 1u64 << k;
            while steps < target {
                s = s.next().1;
                steps += 1;
            }
            assert_eq!(s0.skip(target), s, "skip(2^{k})");
        }
        let mut s = s0;
        for _ in 0..12_345 {
            s = s.next().1;
        }
        assert_eq!(s0.skip(12_345), s);
    }

    #[test]
    fn skip_is_additive() {
        let s = RngState::new(DEFAULT_SEED).unwrap();
        for m in 0..32u64 {
            for n in 0..32u64 {
                assert_eq!(s.skip(m + n), s.skip(m).skip(n));
            }
        }
        // Randomized large exponents, deterministic walk.
        let mut x = 0x9E37u64;
        for _ in 0..200 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let m = x >> 44; // up to 2^20
            let n = x & ((1 << 20) - 1);
            assert_eq!(s.skip(m + n), s.skip(m).skip(n));
        }
    }

    #[test]
    fn invalid_seeds_rejected() {
        assert!(RngState::new(0).is_err());
        assert!(RngState::new(2).is_err());
        assert!(RngState::new(1 << 46).is_err());
        assert!(RngState::new((1 << 46) - 1).is_ok());
    }

    #[test]
    fn generate_is_deterministic() {
        let spec = t0();
        let a = generate_keys(&spec, 3, 8).unwrap();
        let b = generate_keys(&spec, 3, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.owner_rank, 3);
        assert_eq!(a.keys.len() as u64, spec.total_keys / 8);
    }

    #[test]
    fn all_keys_below_max_key() {
        let spec = t0();
        let slice = generate_keys(&spec, 0, 1).unwrap();
        assert!(slice.keys.iter().all(|&k| k < spec.max_key));
    }

    #[test]
    fn rank_slices_concatenate_to_single_stream() {
        let spec = t0();
        let whole = generate_keys(&spec, 0, 1).unwrap().keys;
        for num_ranks in [2usize, 4, 16] {
            let mut joined = Vec::new();
            for rank in 0..num_ranks {
                joined.extend(generate_keys(&spec, rank, num_ranks).unwrap().keys);
            }
            assert_eq!(joined, whole, "num_ranks={num_ranks}");
        }
    }

    #[test]
    fn rank_out_of_range_rejected() {
        let spec = t0();
        assert_eq!(
            generate_keys(&spec, 4, 4).unwrap_err(),
            WorkloadError::RankOutOfRange {
                rank: 4,
                num_ranks: 4
            }
        );
    }

    #[test]
    fn histogram_is_bell_shaped() {
        // 2^20 keys, coarse 64-bin histogram: mode near the middle,
        // near-empty tails. Thresholds frozen from the empirical histogram.
        let spec = ClassTable::builtin().get("T1").unwrap();
        let keys = generate_keys(&spec, 0, 1).unwrap().keys;
        let mut coarse = [0u64; 64];
        for k in keys {
            coarse[(k * 64 / spec.max_key) as usize] += 1;
        }
        let mode = (0..64).max_by_key(|&i| coarse[i]).unwrap();
        assert!((28..36).contains(&mode), "mode bin {mode}");
        let tail: u64 = coarse[..8].iter().chain(coarse[56..].iter()).sum();
        assert!(
            (tail as f64) < 0.01 * spec.total_keys as f64,
            "tail share {tail}"
        );
        let outer_max = *coarse[..16].iter().chain(coarse[48..].iter()).max().unwrap();
        assert!(
            coarse[30..34].iter().all(|&c| c > outer_max),
            "central bins not dominant"
        );
    }

    #[test]
    fn class_table_roundtrip_and_overrides() {
        let mut table = ClassTable::builtin();
        assert!(table.get("T0").is_ok());
        assert!(table.get("nope").is_err());

        let text = table.to_text();
        let mut reparsed = ClassTable::default();
        reparsed.merge_from_str(&text).unwrap();
        assert_eq!(reparsed.get("T1").unwrap(), table.get("T1").unwrap());

        table
            .merge_from_str("tiny 1024 256 16 2 271828183 # custom\n")
            .unwrap();
        let tiny = table.get("tiny").unwrap();
        assert_eq!(tiny.total_keys, 1024);
        assert_eq!(tiny.iterations, 2);
    }

    #[test]
    fn class_parse_errors_carry_line_numbers() {
        let mut table = ClassTable::default();
        let err = table.merge_from_str("\n\nbad 1 2\n").unwrap_err();
        assert!(matches!(err, WorkloadError::ClassParse { line: 3, .. }));
        let err = table
            .merge_from_str("odd 1000 256 16 2 314159265\n")
            .unwrap_err();
        assert!(matches!(err, WorkloadError::ClassParse { line: 1, .. }));
    }

    #[test]
    fn spec_validation() {
        let mut spec = t0();
        spec.num_buckets = spec.max_key * 2;
        assert!(matches!(
            spec.validate(),
            Err(WorkloadError::TooManyBuckets { .. })
        ));
        let mut spec = t0();
        spec.iterations = 0;
        assert_eq!(spec.validate(), Err(WorkloadError::ZeroIterations));
        let mut spec = t0();
        spec.total_keys = 1000;
        assert!(matches!(
            spec.validate(),
            Err(WorkloadError::NotPowerOfTwo { .. })
        ));
    }
}
