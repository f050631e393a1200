//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (visible with `--nocapture`). Everything asserts exact values or frozen
//! thresholds; timings are the only thing allowed to vary between runs.

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use amsort::amnet::{CompletionCounter, Fabric, TransportConfig, TransportError};
use amsort::bench::{self, Engine, RunConfig};
use amsort::bsp;
use amsort::engine::EngineRun;
use amsort::fabsp;
use amsort::verify;
use amsort::workload::{ClassTable, ProblemSpec, DEFAULT_SEED};

fn criterion<F>(number: u32, name: &str, body: F)
where
    F: FnOnce(),
{
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(body));
    let elapsed = started.elapsed().as_secs_f64();
    match &result {
        Ok(()) => println!("criterion {number} ({name}): PASS [{elapsed:.1}s]"),
        Err(_) => println!("criterion {number} ({name}): FAIL [{elapsed:.1}s]"),
    }
    if let Err(cause) = result {
        resume_unwind(cause);
    }
}

fn class(name: &str) -> ProblemSpec {
    ClassTable::builtin().get(name).unwrap()
}

fn fabsp_transport(num_ranks: usize, threads: usize) -> TransportConfig {
    TransportConfig {
        pool_size: TransportConfig::recommended_pool_size(num_ranks, threads),
        ..TransportConfig::default()
    }
}

fn stitched(run: &EngineRun, max_key: u64) -> Vec<u64> {
    let pieces: Vec<((u64, u64), &[u64])> = run
        .ranks
        .iter()
        .map(|r| (r.key_range, r.rank_array.as_slice()))
        .collect();
    verify::stitch_rank_arrays(&pieces, max_key).expect("rank ranges must tile the key space")
}

#[test]
fn criterion_1_oracle_equivalence() {
    criterion(1, "oracle equivalence on T0 and T1", || {
        let budget = Instant::now();
        for name in ["T0", "T1"] {
            let spec = class(name);
            let oracle = verify::oracle_rank(&spec).unwrap();

            for num_ranks in [1usize, 2, 4, 8, 16] {
                let run = bsp::run(&spec, num_ranks, TransportConfig::default(), 1).unwrap();
                let report = verify::verify_run(&stitched(&run, spec.max_key), &oracle);
                assert!(report.passed(), "bsp {name} P={num_ranks}: {report}");
            }
            for num_ranks in [1usize, 2, 4, 8] {
                for threads in [1usize, 2, 4, 8] {
                    let run = fabsp::run(
                        &spec,
                        num_ranks,
                        threads,
                        fabsp_transport(num_ranks, threads),
                        1,
                    )
                    .unwrap();
                    let report = verify::verify_run(&stitched(&run, spec.max_key), &oracle);
                    assert!(
                        report.passed(),
                        "fabsp {name} P={num_ranks} T={threads}: {report}"
                    );
                }
            }
        }
        let elapsed = budget.elapsed().as_secs_f64();
        assert!(elapsed < 300.0, "runtime budget exceeded: {elapsed:.1}s");
    });
}

#[test]
fn criterion_2_cross_engine_equality() {
    criterion(2, "cross-engine bit equality over 10 seeds", || {
        let base = class("T0");
        for k in 0..10u64 {
            let spec = ProblemSpec {
                seed: DEFAULT_SEED + 2 * k, // stays odd
                ..base
            };
            let bsp_run = bsp::run(&spec, 4, TransportConfig::default(), 1).unwrap();
            let fab_run = fabsp::run(&spec, 4, 2, fabsp_transport(4, 2), 1).unwrap();
            assert_eq!(
                stitched(&bsp_run, spec.max_key),
                stitched(&fab_run, spec.max_key),
                "rank arrays differ at seed {}",
                spec.seed
            );
            assert_eq!(
                bsp_run.stitched_histogram(),
                fab_run.stitched_histogram(),
                "histograms differ at seed {}",
                spec.seed
            );
        }
    });
}

#[test]
fn criterion_3_ablation_transparency() {
    criterion(3, "toggle ablation is result-transparent", || {
        let spec = class("T1");
        let oracle = verify::oracle_rank(&spec).unwrap();
        let mut reference: Option<(Vec<u64>, Vec<u64>)> = None;
        for loopback in [true, false] {
            for zero_copy in [true, false] {
                let mut transport = fabsp_transport(4, 4);
                transport.loopback_enabled = loopback;
                transport.zero_copy_enabled = zero_copy;
                let run = fabsp::run(&spec, 4, 4, transport, 1).unwrap();
                let ranks = stitched(&run, spec.max_key);
                let hist = run.stitched_histogram();
                let report = verify::verify_run(&ranks, &oracle);
                assert!(
                    report.passed(),
                    "loopback={loopback} zero_copy={zero_copy}: {report}"
                );
                match &reference {
                    None => reference = Some((ranks, hist)),
                    Some((ranks0, hist0)) => {
                        assert_eq!(&ranks, ranks0, "loopback={loopback} zero_copy={zero_copy}");
                        assert_eq!(&hist, hist0, "loopback={loopback} zero_copy={zero_copy}");
                    }
                }
            }
        }
    });
}

/// Per-core received-key loads: each rank's receive total split evenly over
/// its worker threads.
fn per_core_loads(run: &EngineRun, threads: usize) -> Vec<f64> {
    run.ranks
        .iter()
        .flat_map(|r| {
            let per_core = r.total_local_keys as f64 / threads as f64;
            std::iter::repeat_n(per_core, threads)
        })
        .collect()
}

fn imbalance(loads: &[f64]) -> f64 {
    let max = loads.iter().fold(0.0f64, |a, &b| a.max(b));
    let mean = loads.iter().sum::<f64>() / loads.len() as f64;
    max / mean
}

#[test]
fn criterion_4_load_balance() {
    criterion(4, "load balance at 64 simulated cores", || {
        let spec = class("T1");
        // 8 KiB packets keep the 64-endpoint fabric's buffer footprint small;
        // received-key totals are fixed by the bucket map either way.
        let small_packets = |ranks: usize, threads: usize| TransportConfig {
            packet_capacity: 8192,
            pool_size: TransportConfig::recommended_pool_size(ranks, threads),
            ..TransportConfig::default()
        };

        let wide = fabsp::run(&spec, 8, 8, small_packets(8, 8), 1).unwrap();
        let narrow = fabsp::run(&spec, 64, 1, small_packets(64, 1), 1).unwrap();
        let wide_imbalance = imbalance(&per_core_loads(&wide, 8));
        let narrow_imbalance = imbalance(&per_core_loads(&narrow, 1));
        println!(
            "  imbalance P=8,T=8: {wide_imbalance:.4}  P=64,T=1: {narrow_imbalance:.4}"
        );
        assert!(
            wide_imbalance < narrow_imbalance,
            "multithreaded run must balance strictly better: {wide_imbalance} vs {narrow_imbalance}"
        );

        // The negligible-tail effect needs the one-bucket-per-rank regime
        // (64 ranks on 64 buckets), so run the same T1 key stream bucketed
        // at 64. Threshold 5% confirmed against the workload histogram:
        // the measured share is ~0.002%.
        let coarse = ProblemSpec {
            num_buckets: 64,
            ..spec
        };
        let run = fabsp::run(&coarse, 64, 1, small_packets(64, 1), 1).unwrap();
        let mut received: Vec<u64> = run.ranks.iter().map(|r| r.total_local_keys).collect();
        received.sort_unstable();
        let bottom_quarter: u64 = received[..16].iter().sum();
        let share = bottom_quarter as f64 / coarse.total_keys as f64;
        println!("  bottom 16 of 64 ranks receive {:.4}% of keys", share * 100.0);
        assert!(
            share < 0.05,
            "bottom quarter of ranks received {share:.4} of keys, expected < 0.05"
        );
    });
}

#[test]
fn criterion_5_schedule_determinism() {
    criterion(5, "20 repeated runs are bit-identical", || {
        let spec = class("T0");
        let mut reference: Option<(Vec<u64>, Vec<u64>)> = None;
        for attempt in 0..20 {
            let run = fabsp::run(&spec, 4, 4, fabsp_transport(4, 4), 1).unwrap();
            let ranks = stitched(&run, spec.max_key);
            let hist = run.stitched_histogram();
            match &reference {
                None => reference = Some((ranks, hist)),
                Some((ranks0, hist0)) => {
                    assert_eq!(&ranks, ranks0, "rank array diverged on attempt {attempt}");
                    assert_eq!(&hist, hist0, "histogram diverged on attempt {attempt}");
                }
            }
        }
    });
}

#[test]
fn criterion_6_transport_properties() {
    criterion(6, "transport property suite", || {
        // Exactly-once delivery under 2-device concurrent progress,
        // 10^5 messages, plus packet conservation at quiescence.
        let config = TransportConfig {
            num_devices: 2,
            packet_capacity: 256,
            pool_size: 512,
            ..TransportConfig::default()
        };
        let fabric = Fabric::new(2, config).unwrap();
        let sender = Arc::new(fabric.endpoint(0).unwrap());
        let receiver = Arc::new(fabric.endpoint(1).unwrap());

        let total: u64 = 100_000;
        let seen = Arc::new(Mutex::new(std::collections::HashSet::new()));
        let delivered = Arc::new(AtomicU64::new(0));
        let sink = Arc::clone(&seen);
        let tally = Arc::clone(&delivered);
        receiver
            .register_handler(1, move |delivery| {
                assert!(
                    sink.lock()
                        .unwrap()
                        .insert((delivery.src_rank, delivery.sequence)),
                    "duplicate delivery of sequence {}",
                    delivery.sequence
                );
                tally.fetch_add(1, Ordering::SeqCst);
            })
            .unwrap();
        sender.register_handler(1, |_| {}).unwrap();

        std::thread::scope(|scope| {
            let sender = Arc::clone(&sender);
            scope.spawn(move || {
                let counter = CompletionCounter::new();
                for i in 0..total {
                    amsort::amnet::set_thread_slot(i as usize); // spread devices
                    sender
                        .send_am_bytes(1, 1, &i.to_le_bytes(), &counter)
                        .unwrap();
                }
                assert_eq!(counter.value(), total);
            });
            for device in 0..2usize {
                let receiver = Arc::clone(&receiver);
                let delivered = Arc::clone(&delivered);
                scope.spawn(move || {
                    while delivered.load(Ordering::SeqCst) < total {
                        receiver.progress(device).unwrap();
                        std::thread::yield_now();
                    }
                });
            }
        });
        assert_eq!(seen.lock().unwrap().len() as u64, total);
        assert!(fabric.is_quiescent(), "pools not restored at quiescence");
        for rank in 0..2 {
            assert_eq!(
                fabric.pool(rank).available(),
                fabric.pool(rank).pool_size()
            );
        }

        // Pool exhaustion: a diagnostic within a bounded wait, never a hang.
        let starved = Fabric::new(1, TransportConfig {
            pool_size: 1,
            ..TransportConfig::default()
        })
        .unwrap();
        let ep = starved.endpoint(0).unwrap();
        let _held = ep.acquire_packet().unwrap();
        let waited = Instant::now();
        let err = ep.acquire_packet().unwrap_err();
        assert!(
            matches!(err, TransportError::PoolExhausted { .. }),
            "expected exhaustion diagnostic, got {err:?}"
        );
        assert!(
            waited.elapsed().as_secs() < 30,
            "exhaustion retry window not bounded"
        );
    });
}

#[test]
fn criterion_7_greedy_map_oracle() {
    criterion(7, "greedy map vs brute-force oracle", || {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};

        // Straight-line reimplementation of the assignment walk plus its
        // derived fields, independent of the library's internals.
        fn brute_force(
            counts: &[u64],
            num_ranks: usize,
            max_key: u64,
        ) -> (Vec<usize>, Vec<(u64, u64)>, Vec<u64>) {
            let total: u64 = counts.iter().sum();
            let target = total / num_ranks as u64;
            let mut assignment = Vec::with_capacity(counts.len());
            let mut acc = 0u64;
            let mut rank = 0usize;
            for &c in counts {
                acc += c;
                assignment.push(rank);
                if acc >= (rank as u64 + 1) * target && rank + 1 < num_ranks {
                    rank += 1;
                }
            }
            let width = max_key / counts.len() as u64;
            let mut expected = vec![0u64; num_ranks];
            for (b, &r) in assignment.iter().enumerate() {
                expected[r] += counts[b];
            }
            let mut ranges = Vec::with_capacity(num_ranks);
            let mut bucket = 0usize;
            for r in 0..num_ranks {
                let first = bucket;
                while bucket < counts.len() && assignment[bucket] == r {
                    bucket += 1;
                }
                ranges.push((first as u64 * width, bucket as u64 * width));
            }
            (assignment, ranges, expected)
        }

        fn check(counts: &[u64], num_ranks: usize, max_key: u64, label: &str) {
            let map = bsp::map_buckets_greedy(counts, num_ranks, max_key).unwrap();
            let (assignment, ranges, expected) = brute_force(counts, num_ranks, max_key);
            assert_eq!(map.bucket_to_rank, assignment, "{label}: assignment");
            assert_eq!(map.rank_key_range, ranges, "{label}: ranges");
            assert_eq!(map.rank_expected_recv, expected, "{label}: expected recv");
        }

        // Degenerate shapes.
        check(&[0; 16], 4, 1024, "all-zero");
        check(&[1000, 0, 0, 0, 0, 0, 0, 0], 8, 512, "hot first bucket");
        let mut hot_last = vec![0u64; 8];
        hot_last[7] = 1000;
        check(&hot_last, 8, 512, "hot last bucket");
        let mut hot_mid = vec![0u64; 64];
        hot_mid[31] = 1 << 20;
        check(&hot_mid, 16, 4096, "single hot middle bucket");
        check(&vec![7u64; 64], 8, 4096, "uniform");
        check(&vec![7u64; 64], 64, 4096, "uniform, one bucket per rank");

        // 1000 random histograms.
        let mut rng = StdRng::seed_from_u64(0xA55E55);
        for case in 0..1000 {
            let num_buckets = *[8usize, 64, 256, 1024].get(case % 4).unwrap();
            let num_ranks = rng.gen_range(1..=num_buckets);
            let max_key = (num_buckets as u64) * 64;
            let counts: Vec<u64> = (0..num_buckets)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        0
                    } else {
                        rng.gen_range(0..10_000)
                    }
                })
                .collect();
            check(&counts, num_ranks, max_key, &format!("random case {case}"));
        }
    });
}

#[test]
fn criterion_8_methodology_conformance() {
    criterion(8, "headline time recomputable from raw timings", || {
        let classes = ClassTable::builtin();
        let mut config = RunConfig::new("T0", Engine::Bsp, 2, 1);
        config.runs = 5;
        config.iterations = Some(3);
        let report = bench::run_benchmark(&config, &classes).unwrap();

        assert_eq!(report.iteration_seconds.len(), 5);
        assert!(report
            .iteration_seconds
            .iter()
            .all(|iters| iters.len() == 3));

        // Independent recompute: max over iterations per run, median over
        // runs (middle element of the sorted five).
        let mut run_times: Vec<f64> = report
            .iteration_seconds
            .iter()
            .map(|iters| iters.iter().copied().fold(f64::MIN, f64::max))
            .collect();
        assert_eq!(run_times, report.run_seconds);
        run_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let independent_median = run_times[2];
        assert_eq!(independent_median, report.median_time_s);
        assert!(report.verification.passed);
    });
}
