//! Benchmark harness: runs a configured engine `runs` times, `iterations`
//! sorts per run, and reports the timing the way the measurement
//! methodology prescribes: the time of a run is the maximum iteration time
//! within it, the headline time is the median over runs, and key generation
//! is excluded throughout. Desk-scale runs are verified against the
//! sequential oracle on their final iteration.
//!
//! Reports serialize to JSON (full structure) or CSV (one summary row plus
//! one row per rank; see [`CSV_SCHEMA_VERSION`] and the column list in
//! [`write_csv`]).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amnet::TransportConfig;
use crate::bsp;
use crate::engine::{EngineError, EngineRun};
use crate::fabsp;
use crate::verify::{self, VerifyError};
use crate::workload::{ClassTable, ProblemSpec, WorkloadError};

/// Bump when the CSV column set changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Specs at or below this key count (and key-space size) get oracle
/// verification after the final run.
pub const VERIFY_LIMIT: u64 = 1 << 24;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Bsp,
    Fabsp,
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Engine::Bsp => write!(f, "bsp"),
            Engine::Fabsp => write!(f, "fabsp"),
        }
    }
}

impl std::str::FromStr for Engine {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bsp" => Ok(Engine::Bsp),
            "fabsp" => Ok(Engine::Fabsp),
            other => Err(format!("unknown engine '{other}' (expected bsp or fabsp)")),
        }
    }
}

/// One benchmark configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub class: String,
    pub engine: Engine,
    pub num_ranks: usize,
    pub threads_per_rank: usize,
    pub devices: usize,
    pub loopback: bool,
    pub zero_copy: bool,
    pub packet_capacity: usize,
    pub runs: u32,
    /// Defaults to the class's iteration count when `None`.
    pub iterations: Option<u32>,
}

impl RunConfig {
    pub fn new(class: &str, engine: Engine, num_ranks: usize, threads_per_rank: usize) -> Self {
        RunConfig {
            class: class.to_string(),
            engine,
            num_ranks,
            threads_per_rank,
            devices: 1,
            loopback: true,
            zero_copy: true,
            packet_capacity: 65_536,
            runs: 5,
            iterations: None,
        }
    }

    /// The baseline engine is single-threaded by definition.
    pub fn effective_threads(&self) -> usize {
        match self.engine {
            Engine::Bsp => 1,
            Engine::Fabsp => self.threads_per_rank,
        }
    }

    pub fn transport(&self) -> TransportConfig {
        TransportConfig {
            packet_capacity: self.packet_capacity,
            num_devices: self.devices,
            loopback_enabled: self.loopback,
            zero_copy_enabled: self.zero_copy,
            pool_size: TransportConfig::recommended_pool_size(
                self.num_ranks,
                self.effective_threads(),
            ),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankSummary {
    pub rank: usize,
    /// Keys received in the final iteration's redistribution.
    pub total_local_keys: u64,
    /// Computational-step seconds summed over the final run's iterations.
    pub computation_seconds: f64,
    pub communication_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub performed: bool,
    pub passed: bool,
    pub detail: String,
}

/// Timings and per-rank load metrics for one benchmark configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub spec: ProblemSpec,
    pub iterations: u32,
    /// Raw per-iteration wall times (slowest rank), one vector per run.
    pub iteration_seconds: Vec<Vec<f64>>,
    /// Per-run time: maximum iteration time within the run.
    pub run_seconds: Vec<f64>,
    /// Headline: median over runs of the per-run times.
    pub median_time_s: f64,
    pub mean_time_s: f64,
    pub stddev_time_s: f64,
    /// max/mean of per-rank received keys; dividing per-rank loads by the
    /// thread count rescales max and mean alike, so this is also the
    /// per-core imbalance factor.
    pub received_imbalance: f64,
    pub per_rank: Vec<RankSummary>,
    /// Per-step seconds of the final run, slowest rank per step.
    pub step_seconds: BTreeMap<String, f64>,
    pub verification: VerificationSummary,
}

impl RunReport {
    pub fn verification_ok(&self) -> bool {
        !self.verification.performed || self.verification.passed
    }
}

/// Median of `values` (average of the middle two for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn stddev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

fn execute_engine(
    config: &RunConfig,
    spec: &ProblemSpec,
    iterations: u32,
) -> Result<EngineRun, EngineError> {
    let transport = config.transport();
    match config.engine {
        Engine::Bsp => bsp::run(spec, config.num_ranks, transport, iterations),
        Engine::Fabsp => fabsp::run(
            spec,
            config.num_ranks,
            config.effective_threads(),
            transport,
            iterations,
        ),
    }
}

/// Execute `config.runs` runs of `iterations` sorts each and assemble the
/// report. Verification runs on the final iteration's outputs for
/// desk-scale classes.
pub fn run_benchmark(config: &RunConfig, classes: &ClassTable) -> Result<RunReport, BenchError> {
    let spec = classes.get(&config.class)?;
    let iterations = config.iterations.unwrap_or(spec.iterations);
    if config.runs == 0 {
        return Err(BenchError::Config("runs must be at least 1".into()));
    }
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let wanted = config.num_ranks * config.effective_threads();
    if wanted > cores {
        eprintln!(
            "warning: {} ranks x {} threads oversubscribes {} available cores",
            config.num_ranks,
            config.effective_threads(),
            cores
        );
    }

    let mut iteration_seconds = Vec::with_capacity(config.runs as usize);
    let mut run_seconds = Vec::with_capacity(config.runs as usize);
    let mut final_run = None;
    for _ in 0..config.runs {
        let run = execute_engine(config, &spec, iterations)?;
        let maxes = run.iteration_maxes();
        run_seconds.push(maxes.iter().fold(0.0f64, |a, &b| a.max(b)));
        iteration_seconds.push(maxes);
        final_run = Some(run);
    }
    let final_run = final_run.expect("at least one run");

    let verification = if spec.total_keys <= VERIFY_LIMIT && spec.max_key <= VERIFY_LIMIT {
        let oracle = verify::oracle_rank(&spec)?;
        let pieces: Vec<((u64, u64), &[u64])> = final_run
            .ranks
            .iter()
            .map(|r| (r.key_range, r.rank_array.as_slice()))
            .collect();
        let stitched = verify::stitch_rank_arrays(&pieces, spec.max_key)?;
        let report = verify::verify_run(&stitched, &oracle);
        VerificationSummary {
            performed: true,
            passed: report.passed(),
            detail: report.to_string(),
        }
    } else {
        VerificationSummary {
            performed: false,
            passed: true,
            detail: format!(
                "skipped: class above desk-scale verification limit of {VERIFY_LIMIT} keys"
            ),
        }
    };

    let per_rank: Vec<RankSummary> = final_run
        .ranks
        .iter()
        .map(|r| RankSummary {
            rank: r.rank,
            total_local_keys: r.total_local_keys,
            computation_seconds: r.computation_seconds,
            communication_seconds: r.communication_seconds,
        })
        .collect();
    let loads: Vec<f64> = per_rank.iter().map(|r| r.total_local_keys as f64).collect();
    let received_imbalance = if loads.is_empty() || mean(&loads) == 0.0 {
        0.0
    } else {
        loads.iter().fold(0.0f64, |a, &b| a.max(b)) / mean(&loads)
    };

    let mut step_seconds: BTreeMap<String, f64> = BTreeMap::new();
    for rank in &final_run.ranks {
        for (name, seconds) in &rank.step_seconds {
            let entry = step_seconds.entry(name.clone()).or_default();
            *entry = entry.max(*seconds);
        }
    }

    Ok(RunReport {
        config: config.clone(),
        spec,
        iterations,
        median_time_s: median(&run_seconds),
        mean_time_s: mean(&run_seconds),
        stddev_time_s: stddev(&run_seconds),
        iteration_seconds,
        run_seconds,
        received_imbalance,
        per_rank,
        step_seconds,
        verification,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format '{other}' (expected csv or json)")),
        }
    }
}

/// CSV column set, schema version [`CSV_SCHEMA_VERSION`]. Summary rows fill
/// the timing/verification columns and leave the per-rank columns empty;
/// rank rows do the opposite.
pub const CSV_COLUMNS: &[&str] = &[
    "schema_version",
    "row_type",
    "class",
    "engine",
    "ranks",
    "threads",
    "devices",
    "loopback",
    "zero_copy",
    "packet_capacity",
    "runs",
    "iterations",
    "rank",
    "median_time_s",
    "mean_time_s",
    "stddev_time_s",
    "received_imbalance",
    "verified",
    "total_local_keys",
    "computation_time_s",
    "communication_time_s",
];

fn config_fields(report: &RunReport) -> Vec<String> {
    let c = &report.config;
    vec![
        CSV_SCHEMA_VERSION.to_string(),
        String::new(), // row_type, filled by caller
        c.class.clone(),
        c.engine.to_string(),
        c.num_ranks.to_string(),
        c.effective_threads().to_string(),
        c.devices.to_string(),
        c.loopback.to_string(),
        c.zero_copy.to_string(),
        c.packet_capacity.to_string(),
        c.runs.to_string(),
        report.iterations.to_string(),
    ]
}

/// Append one report (summary row + rank rows) to a CSV writer.
pub fn write_csv<W: std::io::Write>(
    writer: &mut csv::Writer<W>,
    report: &RunReport,
) -> Result<(), BenchError> {
    let mut summary = config_fields(report);
    summary[1] = "summary".into();
    summary.extend([
        String::new(), // rank
        format!("{:.9}", report.median_time_s),
        format!("{:.9}", report.mean_time_s),
        format!("{:.9}", report.stddev_time_s),
        format!("{:.6}", report.received_imbalance),
        if report.verification.performed {
            report.verification.passed.to_string()
        } else {
            "skipped".into()
        },
        String::new(),
        String::new(),
        String::new(),
    ]);
    writer.write_record(&summary)?;

    for rank in &report.per_rank {
        let mut row = config_fields(report);
        row[1] = "rank".into();
        row.extend([
            rank.rank.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            rank.total_local_keys.to_string(),
            format!("{:.9}", rank.computation_seconds),
            format!("{:.9}", rank.communication_seconds),
        ]);
        writer.write_record(&row)?;
    }
    Ok(())
}

/// Write a report to `path` in the chosen format.
pub fn emit_report(
    report: &RunReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), BenchError> {
    match format {
        ReportFormat::Json => {
            let mut file = std::fs::File::create(path)?;
            serde_json::to_writer_pretty(&mut file, report)?;
            file.write_all(b"\n")?;
        }
        ReportFormat::Csv => {
            let mut writer = csv::Writer::from_path(path)?;
            writer.write_record(CSV_COLUMNS)?;
            write_csv(&mut writer, report)?;
            writer.flush()?;
        }
    }
    Ok(())
}

/// One line of a sweep specification; unset fields take `RunConfig`
/// defaults.
#[derive(Clone, Debug, Deserialize)]
pub struct SweepRow {
    pub class: String,
    pub engine: Engine,
    pub ranks: usize,
    pub threads: Option<usize>,
    pub devices: Option<usize>,
    pub loopback: Option<bool>,
    pub zero_copy: Option<bool>,
    pub packet_capacity: Option<usize>,
    pub runs: Option<u32>,
    pub iterations: Option<u32>,
}

impl SweepRow {
    pub fn into_config(self) -> RunConfig {
        let mut config = RunConfig::new(
            &self.class,
            self.engine,
            self.ranks,
            self.threads.unwrap_or(1),
        );
        if let Some(devices) = self.devices {
            config.devices = devices;
        }
        if let Some(loopback) = self.loopback {
            config.loopback = loopback;
        }
        if let Some(zero_copy) = self.zero_copy {
            config.zero_copy = zero_copy;
        }
        if let Some(capacity) = self.packet_capacity {
            config.packet_capacity = capacity;
        }
        if let Some(runs) = self.runs {
            config.runs = runs;
        }
        config.iterations = self.iterations;
        config
    }
}

/// Outcome of one sweep entry; failures are recorded and the sweep
/// continues.
pub struct SweepEntry {
    pub config: RunConfig,
    pub result: Result<RunReport, BenchError>,
}

/// Parse a sweep CSV (headers matching [`SweepRow`] fields).
pub fn parse_sweep(text: &str) -> Result<Vec<SweepRow>, BenchError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Run every sweep entry, then write the consolidated CSV (header always,
/// then rows of each successful report).
pub fn sweep<W: std::io::Write>(
    rows: Vec<SweepRow>,
    classes: &ClassTable,
    csv_out: W,
) -> Result<Vec<SweepEntry>, BenchError> {
    let mut writer = csv::Writer::from_writer(csv_out);
    writer.write_record(CSV_COLUMNS)?;
    let mut entries = Vec::with_capacity(rows.len());
    for row in rows {
        let config = row.into_config();
        let result = run_benchmark(&config, classes);
        if let Ok(report) = &result {
            write_csv(&mut writer, report)?;
        }
        entries.push(SweepEntry { config, result });
    }
    writer.flush()?;
    Ok(entries)
}
