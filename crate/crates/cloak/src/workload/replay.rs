//! Trace replay against a live target or the simulated proxy.
//!
//! The wall-clock replayer drives a pipelined client either open loop,
//! pacing sends to a target rate, or closed loop, keeping the pipeline
//! full. When the target backpressures, sends block until room frees; no
//! operation is ever dropped. The simulation replayer models a fixed pool
//! of closed-loop clients, one outstanding query each, measured in ticks.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::crypto::seeded_rng;
use crate::error::Result;
use crate::model::{LogicalAddress, Query, QueryKind, ResponseBody};
use crate::proxy::sim::{SimProxy, Submit};
use crate::workload::client::CloakClient;
use crate::workload::trace::write_payload;

/// Seeded coin deciding which replayed operations become writes. Ops keep
/// their position; only the kind varies with the mix.
pub fn decide_kinds(n: usize, write_mix: f64, seed: u64) -> Vec<QueryKind> {
    assert!((0.0..=1.0).contains(&write_mix), "mix is a fraction");
    let mut rng = seeded_rng(seed ^ 0x6d69_78);
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < write_mix {
                QueryKind::Write
            } else {
                QueryKind::Read
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ReplayConfig {
    /// Fraction of operations issued as writes.
    pub write_mix: f64,
    pub seed: u64,
    /// Sends per second. Zero means closed loop: keep the pipeline full.
    pub target_rate: f64,
    /// Upper bound on outstanding operations.
    pub pipeline_depth: usize,
    pub element_size: usize,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct ReplayReport {
    pub ops: u64,
    pub reads: u64,
    pub writes: u64,
    pub errors: u64,
    pub wall_seconds: f64,
    pub throughput_ops_per_sec: f64,
    pub mean_latency_micros: f64,
    pub p50_latency_micros: u64,
    pub p99_latency_micros: u64,
}

fn summarize(mut latencies: Vec<u64>, ops: u64, reads: u64, writes: u64, errors: u64, wall: Duration) -> ReplayReport {
    latencies.sort_unstable();
    let mean = if latencies.is_empty() {
        0.0
    } else {
        latencies.iter().sum::<u64>() as f64 / latencies.len() as f64
    };
    let pct = |p: f64| -> u64 {
        if latencies.is_empty() {
            return 0;
        }
        let rank = ((p * latencies.len() as f64).ceil() as usize).clamp(1, latencies.len());
        latencies[rank - 1]
    };
    ReplayReport {
        ops,
        reads,
        writes,
        errors,
        wall_seconds: wall.as_secs_f64(),
        throughput_ops_per_sec: if wall.as_secs_f64() > 0.0 {
            ops as f64 / wall.as_secs_f64()
        } else {
            0.0
        },
        mean_latency_micros: mean,
        p50_latency_micros: pct(0.50),
        p99_latency_micros: pct(0.99),
    }
}

/// Replays `addrs` through a connected client, choosing read or write per
/// op by the configured mix. Blocks until every operation has completed.
pub fn replay_wall(
    client: &mut CloakClient,
    addrs: &[LogicalAddress],
    cfg: &ReplayConfig,
) -> Result<ReplayReport> {
    let kinds = decide_kinds(addrs.len(), cfg.write_mix, cfg.seed);
    replay_wall_with_kinds(client, addrs, &kinds, cfg)
}

/// As [`replay_wall`], but with the operation kinds given explicitly, for
/// traces that carry their own read/write column.
pub fn replay_wall_with_kinds(
    client: &mut CloakClient,
    addrs: &[LogicalAddress],
    kinds: &[QueryKind],
    cfg: &ReplayConfig,
) -> Result<ReplayReport> {
    assert!(cfg.pipeline_depth >= 1);
    assert_eq!(addrs.len(), kinds.len());
    let timeout = Duration::from_secs(30);
    let start = Instant::now();
    let mut latencies = Vec::with_capacity(addrs.len());
    let mut errors = 0u64;
    let (mut reads, mut writes) = (0u64, 0u64);
    for (i, (addr, kind)) in addrs.iter().zip(kinds).enumerate() {
        if cfg.target_rate > 0.0 {
            let due = start + Duration::from_secs_f64(i as f64 / cfg.target_rate);
            while Instant::now() < due {
                // soak up completions while pacing
                if client.in_flight() > 0 {
                    let remaining = due - Instant::now();
                    if let Ok((resp, rtt)) = client.recv(remaining.max(Duration::from_micros(1))) {
                        latencies.push(rtt.as_micros() as u64);
                        errors += matches!(resp.body, ResponseBody::Err(_)) as u64;
                    }
                } else {
                    std::thread::sleep((due - Instant::now()).min(Duration::from_millis(1)));
                }
            }
        }
        while client.in_flight() >= cfg.pipeline_depth {
            let (resp, rtt) = client.recv(timeout)?;
            latencies.push(rtt.as_micros() as u64);
            errors += matches!(resp.body, ResponseBody::Err(_)) as u64;
        }
        match kind {
            QueryKind::Read => {
                reads += 1;
                client.send_read(addr.0)?;
            }
            QueryKind::Write => {
                writes += 1;
                let payload = write_payload(&addr.0.to_string(), i as u64, cfg.element_size);
                client.send_write(addr.0, payload)?;
            }
        }
    }
    while client.in_flight() > 0 {
        let (resp, rtt) = client.recv(timeout)?;
        latencies.push(rtt.as_micros() as u64);
        errors += matches!(resp.body, ResponseBody::Err(_)) as u64;
    }
    let wall = start.elapsed();
    Ok(summarize(latencies, addrs.len() as u64, reads, writes, errors, wall))
}

#[derive(Debug, Clone)]
pub struct SimReplayConfig {
    pub n_clients: usize,
    pub write_mix: f64,
    pub seed: u64,
    /// Safety valve for traces the proxy cannot absorb.
    pub max_ticks: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SimReplayReport {
    pub ops: u64,
    pub ticks: u64,
    pub batches: u64,
    pub real_slots: u64,
    pub dummy_slots: u64,
    /// Fraction of batch slots that carried a real pending query.
    pub utilization: f64,
    pub mean_latency_ticks: f64,
    pub p99_latency_ticks: u64,
}

/// Runs the trace through a simulated proxy with `n_clients` closed-loop
/// clients: each keeps exactly one operation outstanding, so offered load
/// adapts to what the proxy actually serves, tick by tick.
pub fn replay_sim(
    sim: &mut SimProxy,
    addrs: &[LogicalAddress],
    cfg: &SimReplayConfig,
) -> Result<SimReplayReport> {
    assert!(cfg.n_clients >= 1);
    let kinds = decide_kinds(addrs.len(), cfg.write_mix, cfg.seed);
    let element_size = sim.element_size();
    let make_query = |i: usize| -> Query {
        let addr = addrs[i];
        let (kind, value) = match kinds[i] {
            QueryKind::Read => (QueryKind::Read, Vec::new()),
            QueryKind::Write => (
                QueryKind::Write,
                write_payload(&addr.0.to_string(), i as u64, element_size),
            ),
        };
        Query { id: i as u64, kind, addr, value, arrival: 0 }
    };

    let mut cursor = 0usize;
    let mut submitted_at: HashMap<u64, u64> = HashMap::new();
    let mut latencies: Vec<u64> = Vec::with_capacity(addrs.len());
    let mut idle_clients = cfg.n_clients;
    let mut held: Option<Query> = None;
    let base_batches = sim.metrics().batch.batches;
    let mut ticks = 0u64;

    while latencies.len() < addrs.len() {
        // idle clients issue their next operation; a Busy proxy hands the
        // op back to retry next tick, so nothing is dropped
        while idle_clients > 0 {
            let query = match held.take() {
                Some(q) => q,
                None if cursor < addrs.len() => {
                    cursor += 1;
                    make_query(cursor - 1)
                }
                None => break,
            };
            let id = query.id;
            match sim.submit(query) {
                Submit::Accepted => {
                    submitted_at.insert(id, sim.now());
                    idle_clients -= 1;
                }
                Submit::Busy(query) => {
                    held = Some(query);
                    break;
                }
            }
        }
        sim.end_tick()?;
        ticks += 1;
        for resp in sim.drain_responses() {
            if let Some(at) = submitted_at.remove(&resp.id) {
                latencies.push(sim.now() - at);
                idle_clients += 1;
            }
        }
        if ticks >= cfg.max_ticks {
            break;
        }
    }

    let metrics = sim.metrics();
    let real = metrics.batch.real_slots;
    let dummy = metrics.batch.dummy_slots;
    let mut sorted = latencies.clone();
    sorted.sort_unstable();
    let mean = if sorted.is_empty() {
        0.0
    } else {
        sorted.iter().sum::<u64>() as f64 / sorted.len() as f64
    };
    let p99 = if sorted.is_empty() {
        0
    } else {
        sorted[((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1]
    };
    Ok(SimReplayReport {
        ops: latencies.len() as u64,
        ticks,
        batches: metrics.batch.batches - base_batches,
        real_slots: real,
        dummy_slots: dummy,
        utilization: if real + dummy > 0 { real as f64 / (real + dummy) as f64 } else { 0.0 },
        mean_latency_ticks: mean,
        p99_latency_ticks: p99,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_lands_within_a_percent_over_large_runs() {
        let kinds = decide_kinds(100_000, 0.5, 12345);
        let writes = kinds.iter().filter(|k| **k == QueryKind::Write).count() as f64;
        let fraction = writes / 100_000.0;
        assert!((fraction - 0.5).abs() < 0.01, "write fraction {fraction}");

        let all_reads = decide_kinds(1000, 0.0, 1);
        assert!(all_reads.iter().all(|k| *k == QueryKind::Read));
        let all_writes = decide_kinds(1000, 1.0, 1);
        assert!(all_writes.iter().all(|k| *k == QueryKind::Write));
    }

    #[test]
    fn mix_is_deterministic_per_seed() {
        assert_eq!(decide_kinds(500, 0.3, 9), decide_kinds(500, 0.3, 9));
        assert_ne!(decide_kinds(500, 0.3, 9), decide_kinds(500, 0.3, 10));
    }

    #[test]
    fn sim_replay_completes_every_operation() {
        use crate::model::BudgetSchedule;
        use crate::proxy::ProxyConfig;
        use crate::workload::gen::gen_temporal_zipf_trace;

        let schedule = BudgetSchedule::new(vec![4, 2, 1, 1]).unwrap();
        let capacity = schedule.capacity as usize;
        let mut sim = SimProxy::new(ProxyConfig {
            n_elements: capacity as u64,
            schedule,
            element_size: 16,
            max_cache_capacity: 4,
            max_queue_capacity: 64,
            batch_interval: Duration::from_millis(1),
            key: [7; 16],
            seed: Some(11),
            mutation: None,
        })
        .unwrap();
        let addrs = gen_temporal_zipf_trace(capacity as u64, 400, 0.8, 3);
        let report = replay_sim(
            &mut sim,
            &addrs,
            &SimReplayConfig { n_clients: 8, write_mix: 0.2, seed: 5, max_ticks: 10_000 },
        )
        .unwrap();
        assert_eq!(report.ops, 400);
        assert!(report.ticks < 10_000, "should finish well before the valve");
        assert!(report.utilization > 0.0 && report.utilization <= 1.0);
        assert!(report.mean_latency_ticks >= 0.0);
        sim.check_invariants().unwrap();
    }
}
