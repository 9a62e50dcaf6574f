//! Temporary tuning sweeps; removed once the acceptance configs are pinned.

use cloak::audit::{run_benchmark, BenchConfig, BenchMode};
use cloak::planner::{fit_zipf, set_budgets, temporal_histogram};
use cloak::workload::gen::gen_temporal_zipf_trace;

#[test]
#[ignore]
fn fit_round_trip() {
    for s in [0.5, 1.0, 1.2, 1.5] {
        let trace = gen_temporal_zipf_trace(10_000, 1_000_000, s, 42);
        let hist = temporal_histogram(&trace);
        let fit = fit_zipf(&hist).unwrap();
        eprintln!(
            "s={s}: fitted={:.4} residual={:.4} err={:+.4}",
            fit.exponent,
            fit.residual,
            fit.exponent - s
        );
    }
}

#[test]
#[ignore]
fn batch_size_sweep() {
    for seed in [5u64, 7, 9] {
    for fb in [1u64, 8, 40, 320, 1280] {
        let schedule = set_budgets(2000, fb);
        let cfg = BenchConfig {
            mode: BenchMode::Wall,
            n_elements: 2000,
            first_budget: fb,
            element_size: 1024,
            cache_capacity: 8,
            queue_capacity: 4096,
            batch_interval_micros: 2000,
            zipf_s: 1.0,
            operations: 30_000,
            write_mix: 0.2,
            target_rate: 0.0,
            pipeline_depth: 128,
            n_clients: 64,
            seed,
        };
        let m = run_benchmark(&cfg).unwrap();
        eprintln!(
            "seed={seed} fb={fb} batch={} -> tput={:.0} util={:.3} p99={:.2}ms",
            schedule.batch_size, m.throughput_ops_per_sec, m.batch_utilization, m.p99_latency_ms
        );
    }
    }
}

#[test]
#[ignore]
fn cache_sweep() {
    for seed in [5u64, 7, 9] {
    for cache in [4usize, 64, 1024] {
        let cfg = BenchConfig {
            mode: BenchMode::Wall,
            n_elements: 10_000,
            first_budget: 40,
            element_size: 256,
            cache_capacity: cache,
            queue_capacity: 564,
            batch_interval_micros: 2000,
            zipf_s: 1.0,
            operations: 30_000,
            write_mix: 0.5,
            target_rate: 30_000.0,
            pipeline_depth: 64,
            n_clients: 64,
            seed,
        };
        let m = run_benchmark(&cfg).unwrap();
        eprintln!(
            "seed={seed} cache={cache} -> tput={:.0} mean={:.3}ms util={:.3}",
            m.throughput_ops_per_sec, m.mean_latency_ms, m.batch_utilization
        );
    }
    }
}
