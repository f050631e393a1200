use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use amsort::bench::{self, Engine, ReportFormat, RunConfig};
use amsort::workload::ClassTable;

/// Parallel integer-sort benchmark: bulk-synchronous baseline vs
/// multithreaded asynchronous engine over an in-process active-message
/// transport.
#[derive(Parser)]
#[command(name = "amsort", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one benchmark configuration and report timings.
    Run(RunArgs),
    /// Run every configuration listed in a sweep CSV.
    Sweep(SweepArgs),
    /// Print the class table (built-ins plus any loaded file).
    Classes(ClassArgs),
}

#[derive(Args)]
struct ClassArgs {
    /// Extra class definitions: one `name total_keys max_key num_buckets
    /// iterations seed` per line; '#' comments allowed.
    #[arg(long, env = "AMSORT_CLASS_FILE")]
    class_file: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Benchmark class name (see `amsort classes`).
    #[arg(long, env = "AMSORT_CLASS", default_value = "T0")]
    class: String,

    /// Sort engine.
    #[arg(long, env = "AMSORT_ENGINE", default_value = "fabsp")]
    engine: Engine,

    /// Simulated ranks (processes).
    #[arg(long, env = "AMSORT_RANKS", default_value_t = 4)]
    ranks: usize,

    /// Worker threads per rank (forced to 1 for the bsp engine).
    #[arg(long, env = "AMSORT_THREADS", default_value_t = 4)]
    threads: usize,

    /// Transport devices per rank.
    #[arg(long, env = "AMSORT_DEVICES", default_value_t = 1)]
    devices: usize,

    /// Benchmark repetitions; the headline time is their median.
    #[arg(long, env = "AMSORT_RUNS", default_value_t = 5)]
    runs: u32,

    /// Sort iterations per run (defaults to the class's setting).
    #[arg(long, env = "AMSORT_ITERATIONS")]
    iterations: Option<u32>,

    /// Disable the loopback fast path for self-destined messages.
    #[arg(long, env = "AMSORT_NO_LOOPBACK")]
    no_loopback: bool,

    /// Disable zero-copy packet assembly (forces send/receive copies).
    #[arg(long, env = "AMSORT_NO_ZERO_COPY")]
    no_zero_copy: bool,

    /// Packet payload capacity in bytes (also the aggregation buffer size).
    #[arg(long, env = "AMSORT_PACKET_CAPACITY", default_value_t = 65_536)]
    packet_capacity: usize,

    /// Write the full report to this path.
    #[arg(long, env = "AMSORT_OUT")]
    out: Option<PathBuf>,

    /// Report format for --out.
    #[arg(long, env = "AMSORT_FORMAT", default_value = "csv")]
    format: ReportFormat,

    #[arg(long, env = "AMSORT_CLASS_FILE")]
    class_file: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep specification CSV with headers:
    /// class,engine,ranks,threads,devices,loopback,zero_copy,packet_capacity,runs,iterations
    #[arg(long)]
    spec: PathBuf,

    /// Consolidated CSV output path (default: stdout).
    #[arg(long, env = "AMSORT_OUT")]
    out: Option<PathBuf>,

    #[arg(long, env = "AMSORT_CLASS_FILE")]
    class_file: Option<PathBuf>,
}

fn load_classes(class_file: &Option<PathBuf>) -> Result<ClassTable, String> {
    let mut classes = ClassTable::builtin();
    if let Some(path) = class_file {
        classes
            .merge_from_file(path)
            .map_err(|e| format!("loading {}: {e}", path.display()))?;
    }
    Ok(classes)
}

fn run_command(args: RunArgs) -> Result<bool, String> {
    let classes = load_classes(&args.class_file)?;
    let mut config = RunConfig::new(&args.class, args.engine, args.ranks, args.threads);
    config.devices = args.devices;
    config.loopback = !args.no_loopback;
    config.zero_copy = !args.no_zero_copy;
    config.packet_capacity = args.packet_capacity;
    config.runs = args.runs;
    config.iterations = args.iterations;

    let report = bench::run_benchmark(&config, &classes).map_err(|e| e.to_string())?;

    println!(
        "{} engine on class {}: P={} T={} devices={} loopback={} zero_copy={}",
        config.engine,
        config.class,
        config.num_ranks,
        config.effective_threads(),
        config.devices,
        config.loopback,
        config.zero_copy
    );
    println!(
        "median {:.6}s  mean {:.6}s  stddev {:.6}s  over {} runs x {} iterations",
        report.median_time_s,
        report.mean_time_s,
        report.stddev_time_s,
        config.runs,
        report.iterations
    );
    println!(
        "received-key imbalance (max/mean): {:.4}",
        report.received_imbalance
    );
    println!("{}", report.verification.detail);

    if let Some(path) = &args.out {
        bench::emit_report(&report, args.format, path).map_err(|e| e.to_string())?;
        println!("report written to {}", path.display());
    }
    Ok(report.verification_ok())
}

fn sweep_command(args: SweepArgs) -> Result<bool, String> {
    let classes = load_classes(&args.class_file)?;
    let text = std::fs::read_to_string(&args.spec)
        .map_err(|e| format!("reading {}: {e}", args.spec.display()))?;
    let rows = bench::parse_sweep(&text).map_err(|e| e.to_string())?;

    let entries = if let Some(path) = &args.out {
        let file = std::fs::File::create(path).map_err(|e| e.to_string())?;
        let entries = bench::sweep(rows, &classes, file).map_err(|e| e.to_string())?;
        println!("consolidated CSV written to {}", path.display());
        entries
    } else {
        bench::sweep(rows, &classes, std::io::stdout()).map_err(|e| e.to_string())?
    };

    let mut all_ok = true;
    for entry in &entries {
        match &entry.result {
            Ok(report) => {
                eprintln!(
                    "ok   {} {} P={} T={}: median {:.6}s, {}",
                    entry.config.class,
                    entry.config.engine,
                    entry.config.num_ranks,
                    entry.config.effective_threads(),
                    report.median_time_s,
                    report.verification.detail
                );
                all_ok &= report.verification_ok();
            }
            Err(error) => {
                all_ok = false;
                eprintln!(
                    "FAIL {} {} P={} T={}: {error}",
                    entry.config.class,
                    entry.config.engine,
                    entry.config.num_ranks,
                    entry.config.effective_threads()
                );
            }
        }
    }
    Ok(all_ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run_command(args),
        Command::Sweep(args) => sweep_command(args),
        Command::Classes(args) => load_classes(&args.class_file).map(|classes| {
            print!("{}", classes.to_text());
            true
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("finished with failures");
            ExitCode::FAILURE
        }
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
