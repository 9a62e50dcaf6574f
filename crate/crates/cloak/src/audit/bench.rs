//! Benchmark driver, plus the unsafe plaintext baseline it is measured
//! against.
//!
//! Wall mode stands up the full stack in one process: storage server and
//! proxy on loopback TCP, a pipelined client replaying a synthetic trace.
//! Sim mode runs the tick-driven proxy for deterministic, scheduler-free
//! numbers, converting ticks to time via the configured interval.
//!
//! The baseline speaks the same client protocol against a bare in-memory
//! array: no encryption, no batching, no padding. Comparing against it
//! prices what the obliviousness machinery costs end to end.

use std::io::{BufReader, BufWriter, Write as _};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::crypto::{block_width, seeded_rng};
use crate::error::Result;
use crate::net::{spawn_storage_server, TcpTransport};
use crate::planner::set_budgets;
use crate::proxy::service::{serve_clients, spawn_proxy};
use crate::proxy::ProxyConfig;
use crate::store::SlotStore;
use crate::wire::{read_frame, write_frame, ClientMsg};
use crate::workload::client::CloakClient;
use crate::workload::gen::gen_temporal_zipf_trace;
use crate::workload::replay::{replay_sim, replay_wall, ReplayConfig, SimReplayConfig};

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Sim,
    Wall,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub mode: BenchMode,
    pub n_elements: u64,
    pub first_budget: u64,
    pub element_size: usize,
    pub cache_capacity: usize,
    pub queue_capacity: usize,
    pub batch_interval_micros: u64,
    /// Zipf exponent of the synthetic trace.
    pub zipf_s: f64,
    pub operations: usize,
    pub write_mix: f64,
    /// Wall mode: sends per second, zero for closed loop.
    pub target_rate: f64,
    /// Wall mode: outstanding operations per connection.
    pub pipeline_depth: usize,
    /// Sim mode: closed-loop clients, one outstanding op each.
    pub n_clients: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mode: BenchMode::Sim,
            n_elements: 10_000,
            first_budget: 100,
            element_size: 64,
            cache_capacity: 1024,
            queue_capacity: 4096,
            batch_interval_micros: 2_000,
            zipf_s: 1.0,
            operations: 100_000,
            write_mix: 0.5,
            target_rate: 0.0,
            pipeline_depth: 128,
            n_clients: 64,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMetrics {
    pub ops: u64,
    pub throughput_ops_per_sec: f64,
    pub mean_latency_ms: f64,
    pub p99_latency_ms: f64,
    /// Mean fraction of real queries per batch; zero for the baseline,
    /// which has no batches.
    pub batch_utilization: f64,
}

/// Builds the proxy configuration a benchmark run uses, schedule included.
pub fn plan_proxy_config(cfg: &BenchConfig) -> Result<ProxyConfig> {
    let schedule = set_budgets(cfg.n_elements, cfg.first_budget);
    let mut key = [0u8; 16];
    seeded_rng(cfg.seed ^ 0x6b65_79).fill(&mut key);
    let config = ProxyConfig {
        n_elements: cfg.n_elements,
        schedule,
        element_size: cfg.element_size,
        max_cache_capacity: cfg.cache_capacity,
        max_queue_capacity: cfg.queue_capacity,
        batch_interval: Duration::from_micros(cfg.batch_interval_micros),
        key,
        seed: Some(cfg.seed),
        mutation: None,
    };
    config.validate()?;
    Ok(config)
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<RunMetrics> {
    match cfg.mode {
        BenchMode::Sim => run_sim(cfg),
        BenchMode::Wall => run_wall(cfg),
    }
}

fn run_sim(cfg: &BenchConfig) -> Result<RunMetrics> {
    use crate::proxy::sim::SimProxy;
    let mut sim = SimProxy::new(plan_proxy_config(cfg)?)?;
    let trace = gen_temporal_zipf_trace(cfg.n_elements, cfg.operations, cfg.zipf_s, cfg.seed);
    let report = replay_sim(
        &mut sim,
        &trace,
        &SimReplayConfig {
            n_clients: cfg.n_clients,
            write_mix: cfg.write_mix,
            seed: cfg.seed,
            max_ticks: (cfg.operations as u64).saturating_mul(4).max(10_000),
        },
    )?;
    let tick = Duration::from_micros(cfg.batch_interval_micros).as_secs_f64();
    let elapsed = report.ticks as f64 * tick;
    Ok(RunMetrics {
        ops: report.ops,
        throughput_ops_per_sec: if elapsed > 0.0 { report.ops as f64 / elapsed } else { 0.0 },
        mean_latency_ms: report.mean_latency_ticks * tick * 1e3,
        p99_latency_ms: report.p99_latency_ticks as f64 * tick * 1e3,
        batch_utilization: report.utilization,
    })
}

fn run_wall(cfg: &BenchConfig) -> Result<RunMetrics> {
    let proxy_cfg = plan_proxy_config(cfg)?;
    let capacity = proxy_cfg.schedule.capacity;

    let store_listener = TcpListener::bind("127.0.0.1:0")?;
    let store = Arc::new(Mutex::new(SlotStore::new(capacity, block_width(cfg.element_size))));
    let server = spawn_storage_server(store_listener, store, cfg.element_size as u32, None)?;

    let transport = TcpTransport::connect(&server.addr)?;
    let proxy = spawn_proxy(proxy_cfg, Box::new(transport), cfg.pipeline_depth.max(64))?;

    let client_listener = TcpListener::bind("127.0.0.1:0")?;
    let proxy_addr = client_listener.local_addr()?.to_string();
    let stop = Arc::new(AtomicBool::new(false));
    let accept = serve_clients(client_listener, proxy.shared(), stop.clone())?;

    let trace = gen_temporal_zipf_trace(cfg.n_elements, cfg.operations, cfg.zipf_s, cfg.seed);
    let mut client = CloakClient::connect(&proxy_addr)?;
    let report = replay_wall(
        &mut client,
        &trace,
        &ReplayConfig {
            write_mix: cfg.write_mix,
            seed: cfg.seed,
            target_rate: cfg.target_rate,
            pipeline_depth: cfg.pipeline_depth,
            element_size: cfg.element_size,
        },
    )?;
    drop(client);
    stop.store(true, Ordering::SeqCst);
    let _ = accept.join();
    let metrics = proxy.shutdown();

    Ok(RunMetrics {
        ops: report.ops,
        throughput_ops_per_sec: report.throughput_ops_per_sec,
        mean_latency_ms: report.mean_latency_micros / 1e3,
        p99_latency_ms: report.p99_latency_micros as f64 / 1e3,
        batch_utilization: metrics.utilization(),
    })
}

/// Replays the same trace against the plaintext baseline server.
pub fn run_baseline(cfg: &BenchConfig) -> Result<RunMetrics> {
    let server = spawn_plain_kv_server(cfg.n_elements, cfg.element_size)?;
    let trace = gen_temporal_zipf_trace(cfg.n_elements, cfg.operations, cfg.zipf_s, cfg.seed);
    let mut client = CloakClient::connect(&server.addr)?;
    let report = replay_wall(
        &mut client,
        &trace,
        &ReplayConfig {
            write_mix: cfg.write_mix,
            seed: cfg.seed,
            target_rate: cfg.target_rate,
            pipeline_depth: cfg.pipeline_depth,
            element_size: cfg.element_size,
        },
    )?;
    Ok(RunMetrics {
        ops: report.ops,
        throughput_ops_per_sec: report.throughput_ops_per_sec,
        mean_latency_ms: report.mean_latency_micros / 1e3,
        p99_latency_ms: report.p99_latency_micros as f64 / 1e3,
        batch_utilization: 0.0,
    })
}

/// The unsafe comparison point: a key-value server holding plaintext in a
/// flat array, answering each request as it arrives over the same client
/// protocol Cloak speaks. Stops when dropped.
pub struct BaselineHandle {
    pub addr: String,
    stop: Arc<AtomicBool>,
    join: Option<std::thread::JoinHandle<()>>,
}

impl Drop for BaselineHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

pub fn spawn_plain_kv_server(n_elements: u64, element_size: usize) -> Result<BaselineHandle> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?.to_string();
    let stop = Arc::new(AtomicBool::new(false));
    let stop_accept = stop.clone();
    let slots = Arc::new(Mutex::new(vec![vec![0u8; element_size]; n_elements as usize]));
    let join = std::thread::spawn(move || loop {
        if stop_accept.load(Ordering::SeqCst) {
            return;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                let slots = slots.clone();
                std::thread::spawn(move || {
                    let _ = serve_plain_connection(stream, &slots, element_size);
                });
            }
            Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(1));
            }
            Err(_) => return,
        }
    });
    Ok(BaselineHandle { addr, stop, join: Some(join) })
}

fn serve_plain_connection(
    stream: TcpStream,
    slots: &Mutex<Vec<Vec<u8>>>,
    element_size: usize,
) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let (msg_type, payload) = match read_frame(&mut reader) {
            Ok(frame) => frame,
            Err(crate::error::Error::Io(ref e))
                if e.kind() == std::io::ErrorKind::UnexpectedEof =>
            {
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let reply = match ClientMsg::decode(msg_type, &payload)? {
            ClientMsg::Read { id, addr } => {
                let slots = slots.lock().unwrap();
                match slots.get(addr as usize) {
                    Some(value) => ClientMsg::ReadResp { id, value: value.clone() },
                    None => ClientMsg::Err { id, code: crate::model::err_code::OUT_OF_RANGE },
                }
            }
            ClientMsg::Write { id, addr, value } => {
                let mut slots = slots.lock().unwrap();
                match slots.get_mut(addr as usize) {
                    Some(slot) if value.len() == element_size => {
                        *slot = value;
                        ClientMsg::WriteOk { id }
                    }
                    Some(_) => ClientMsg::Err { id, code: crate::model::err_code::MALFORMED },
                    None => ClientMsg::Err { id, code: crate::model::err_code::OUT_OF_RANGE },
                }
            }
            other => {
                return Err(crate::error::Error::Protocol(format!(
                    "baseline server got {other:?}"
                )))
            }
        };
        let (t, body) = reply.encode();
        write_frame(&mut writer, t, &body)?;
        writer.flush()?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_server_round_trips_and_validates() {
        let t = Duration::from_secs(5);
        let server = spawn_plain_kv_server(8, 4).unwrap();
        let mut client = CloakClient::connect(&server.addr).unwrap();
        client.put(3, vec![7; 4], t).unwrap();
        assert_eq!(client.get(3, t).unwrap(), vec![7; 4]);
        assert_eq!(client.get(5, t).unwrap(), vec![0; 4]);
        assert!(client.get(99, t).is_err());
        assert!(client.put(1, vec![1; 3], t).is_err());
    }

    #[test]
    fn sim_benchmark_produces_consistent_metrics() {
        let cfg = BenchConfig {
            n_elements: 100,
            first_budget: 10,
            operations: 500,
            cache_capacity: 8,
            queue_capacity: 64,
            n_clients: 16,
            ..Default::default()
        };
        let metrics = run_benchmark(&cfg).unwrap();
        assert_eq!(metrics.ops, 500);
        assert!(metrics.throughput_ops_per_sec > 0.0);
        assert!(metrics.mean_latency_ms >= 0.0);
        assert!((0.0..=1.0).contains(&metrics.batch_utilization));
    }

    #[test]
    fn skewed_load_uses_batches_better_than_uniform() {
        // Two conditions make the trend visible. The store must dwarf the
        // batch so uniform demand lands deep in the ring where budgets
        // are thin, leaving the big shallow budgets to dummies. And the
        // queue must be tight enough that uniform traffic, whose pending
        // entries are all distinct, saturates it, while skewed traffic
        // coalesces onto far fewer entries and never feels the cap.
        let base = BenchConfig {
            n_elements: 10_000,
            first_budget: 40,
            operations: 10_000,
            cache_capacity: 2,
            queue_capacity: 250,
            n_clients: 512,
            write_mix: 0.5,
            ..Default::default()
        };
        let hot = run_benchmark(&BenchConfig { zipf_s: 1.0, ..base.clone() }).unwrap();
        let flat = run_benchmark(&BenchConfig { zipf_s: 0.0, ..base.clone() }).unwrap();
        assert!(
            hot.batch_utilization > flat.batch_utilization + 0.1,
            "hot {} vs flat {}",
            hot.batch_utilization,
            flat.batch_utilization
        );
    }
}
