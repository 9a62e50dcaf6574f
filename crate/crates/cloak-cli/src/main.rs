//! The `cloak` command line: planning schedules, running the storage
//! server and proxy as network services, driving client workloads, and
//! replaying server logs through the audit checks.

use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde_json::json;

use cloak::audit::linearizability::read_history;
use cloak::audit::{
    audit_obliviousness, check_linearizability, run_baseline, run_benchmark, AuditOptions,
    BenchConfig, CadenceSpec,
};
use cloak::crypto::{block_width, secure_rng, seeded_rng};
use cloak::model::BudgetSchedule;
use cloak::net::{spawn_storage_server, TcpTransport};
use cloak::planner::{schedule_for_trace, set_budgets};
use cloak::proxy::service::{serve_clients, spawn_proxy};
use cloak::proxy::ProxyConfig;
use cloak::store::{read_ndjson_log, SlotStore};
use cloak::workload::client::CloakClient;
use cloak::workload::gen::gen_temporal_zipf_trace;
use cloak::workload::replay::{decide_kinds, replay_wall_with_kinds, ReplayConfig};
use cloak::workload::trace::ingest_csv_trace_file;

#[derive(Parser)]
#[command(name = "cloak", version, about = "Oblivious key-value store toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compute a budget schedule, from a target size or an observed trace
    Plan(PlanArgs),
    /// Run the storage server
    Server(ServerArgs),
    /// Run the proxy between clients and a storage server
    Proxy(ProxyArgs),
    /// Replay a workload against a running proxy
    Client(ClientArgs),
    /// Check a storage-server log for access-pattern leaks
    Audit(AuditArgs),
    /// Run a self-contained benchmark from a TOML config
    Bench(BenchArgs),
    /// Check a client history for linearizability
    Lincheck(LincheckArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Number of elements to cover
    #[arg(long, conflicts_with = "trace")]
    n: Option<u64>,
    /// CSV trace to size the schedule from (seq,key[,kind] with header)
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Budget for the most recent reuse-distance set
    #[arg(long)]
    first_budget: u64,
}

#[derive(Args)]
struct ServerArgs {
    #[arg(long)]
    listen: String,
    #[arg(long)]
    capacity: u64,
    #[arg(long, default_value_t = 1024)]
    element_size: usize,
    /// Stream the batch log to a file as NDJSON, one entry per batch
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Clock {
    /// Fire batches on the wall clock every interval
    Real,
    /// Fire batches back to back, one logical tick each
    Sim,
}

#[derive(Args)]
struct ProxyArgs {
    #[arg(long)]
    listen: String,
    /// Storage server address
    #[arg(long)]
    server: String,
    /// Client-addressable elements
    #[arg(long)]
    n: u64,
    #[arg(long)]
    first_budget: u64,
    #[arg(long, default_value_t = 20)]
    batch_interval_ms: u64,
    #[arg(long, default_value_t = 1000)]
    cache: usize,
    /// Pending-address bound; "auto" means twice the batch size
    #[arg(long, default_value = "auto")]
    queue_capacity: String,
    #[arg(long, default_value_t = 1024)]
    element_size: usize,
    #[arg(long, value_enum, default_value_t = Clock::Real)]
    clock: Clock,
    /// Deterministic run: seeds the shuffle and dummy choices
    #[arg(long)]
    seed: Option<u64>,
    /// Seconds between stats lines on stdout
    #[arg(long, default_value_t = 1)]
    stats_interval: u64,
}

#[derive(Args)]
struct ClientArgs {
    /// Proxy address
    #[arg(long)]
    proxy: String,
    /// CSV trace to replay (seq,key[,kind] with header)
    #[arg(long, conflicts_with = "synthetic")]
    trace: Option<PathBuf>,
    /// Synthetic workload, e.g. s=1.0,n=10000,len=100000
    #[arg(long)]
    synthetic: Option<String>,
    /// Offered ops per second; 0 means closed loop
    #[arg(long, default_value_t = 0.0)]
    rate: f64,
    /// Fraction of synthetic operations issued as writes
    #[arg(long, default_value_t = 0.5)]
    mix: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Must match the proxy's element size for writes to be accepted
    #[arg(long, default_value_t = 1024)]
    element_size: usize,
    #[arg(long, default_value_t = 64)]
    pipeline_depth: usize,
    /// Also write the metrics JSON here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    /// NDJSON batch log from the storage server
    #[arg(long)]
    log: PathBuf,
    /// JSON file with the public budgets: an array, or any object with a
    /// "budgets" key (the `plan` output works as is)
    #[arg(long)]
    budgets: PathBuf,
    /// Batches to skip before checking; "auto" means the schedule length
    #[arg(long, default_value = "auto")]
    warmup: String,
    /// Expected batch interval in microseconds for wall-clock logs.
    /// Absent means a simulated log with exact tick cadence.
    #[arg(long)]
    interval_micros: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML benchmark config
    #[arg(long)]
    config: PathBuf,
    /// Run the plaintext baseline server instead of the oblivious stack
    #[arg(long)]
    baseline: bool,
    /// Also write the metrics JSON here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LincheckArgs {
    /// NDJSON client history
    #[arg(long)]
    history: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Plan(args) => plan(args),
        Cmd::Server(args) => server(args),
        Cmd::Proxy(args) => proxy(args),
        Cmd::Client(args) => client(args),
        Cmd::Audit(args) => audit(args),
        Cmd::Bench(args) => bench(args),
        Cmd::Lincheck(args) => lincheck(args),
    }
}

fn plan(args: PlanArgs) -> Result<()> {
    let (schedule, fit) = match (args.n, &args.trace) {
        (Some(n), None) => (set_budgets(n, args.first_budget), None),
        (None, Some(path)) => {
            let trace = ingest_csv_trace_file(path)
                .with_context(|| format!("reading trace {}", path.display()))?;
            let plan = schedule_for_trace(&trace.addresses(), args.first_budget)?;
            (plan.schedule, plan.fit)
        }
        _ => bail!("give exactly one of --n or --trace"),
    };
    let doc = json!({
        "budgets": schedule.budgets,
        "batch_size": schedule.batch_size,
        "capacity": schedule.capacity,
        "fitted_exponent": fit.as_ref().map(|f| f.exponent),
        "residual": fit.as_ref().map(|f| f.residual),
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn server(args: ServerArgs) -> Result<()> {
    let listener = TcpListener::bind(&args.listen)
        .with_context(|| format!("binding {}", args.listen))?;
    let sink: Option<Box<dyn Write + Send>> = match &args.log {
        Some(path) => Some(Box::new(
            std::fs::File::create(path)
                .with_context(|| format!("creating log {}", path.display()))?,
        )),
        None => None,
    };
    let store = Arc::new(Mutex::new(SlotStore::new(
        args.capacity,
        block_width(args.element_size),
    )));
    let handle = spawn_storage_server(listener, store, args.element_size as u32, sink)?;
    println!(
        "{}",
        json!({
            "listening": handle.addr,
            "capacity": args.capacity,
            "element_size": args.element_size,
            "block_width": block_width(args.element_size),
        })
    );
    loop {
        std::thread::park();
    }
}

fn proxy(args: ProxyArgs) -> Result<()> {
    let schedule = set_budgets(args.n, args.first_budget);
    let queue_capacity = match args.queue_capacity.as_str() {
        "auto" => (schedule.batch_size * 2) as usize,
        other => other.parse().context("--queue-capacity takes a number or \"auto\"")?,
    };
    let mut key = [0u8; 16];
    match args.seed {
        Some(seed) => seeded_rng(seed ^ 0x6b65_79).fill(&mut key),
        None => secure_rng().fill(&mut key),
    }
    let batch_interval = match args.clock {
        Clock::Real => Duration::from_millis(args.batch_interval_ms),
        Clock::Sim => Duration::ZERO,
    };
    let config = ProxyConfig {
        n_elements: args.n,
        schedule: schedule.clone(),
        element_size: args.element_size,
        max_cache_capacity: args.cache,
        max_queue_capacity: queue_capacity,
        batch_interval,
        key,
        seed: args.seed,
        mutation: None,
    };

    let transport = TcpTransport::connect(&args.server)
        .with_context(|| format!("connecting to storage at {}", args.server))?;
    let listener = TcpListener::bind(&args.listen)
        .with_context(|| format!("binding {}", args.listen))?;
    let listen_addr = listener.local_addr()?.to_string();
    let channel_depth = (schedule.batch_size as usize).max(64);
    let handle = spawn_proxy(config, Box::new(transport), channel_depth)?;
    let stop = Arc::new(AtomicBool::new(false));
    let _accept = serve_clients(listener, handle.shared(), stop)?;

    println!(
        "{}",
        json!({
            "listening": listen_addr,
            "server": args.server,
            "n_elements": args.n,
            "sets": schedule.budgets.len(),
            "batch_size": schedule.batch_size,
            "capacity": schedule.capacity,
            "cache": args.cache,
            "queue_capacity": queue_capacity,
            "batch_interval_ms": args.batch_interval_ms,
            "element_size": args.element_size,
            "clock": match args.clock { Clock::Real => "real", Clock::Sim => "sim" },
            "seed": args.seed,
        })
    );

    // one stats line per interval; rates are over the interval, the wait
    // and utilization figures are running means
    let shared = handle.shared();
    let mut last_answered = 0u64;
    let interval = Duration::from_secs(args.stats_interval.max(1));
    loop {
        std::thread::sleep(interval);
        let m = shared.metrics();
        let answered = m.intake.cache_hits
            + m.intake.writes_forwarded
            + m.intake.rejected
            + m.batch.read_responses;
        let ops_per_sec = (answered - last_answered) as f64 / interval.as_secs_f64();
        last_answered = answered;
        println!(
            "{}",
            json!({
                "uptime_ms": shared.now_micros() / 1000,
                "ops_per_sec": ops_per_sec,
                "mean_read_wait_ms": m.mean_read_wait() / 1000.0,
                "utilization": m.utilization(),
                "batches": m.batch.batches,
                "queries": m.intake.queries,
                "cache_hits": m.intake.cache_hits,
                "backpressure_waits": m.batch.backpressure_waits,
            })
        );
    }
}

/// Parses the compact synthetic spec: comma-separated s=, n=, len=.
fn parse_synthetic(spec: &str) -> Result<(f64, u64, usize)> {
    let (mut s, mut n, mut len) = (None, None, None);
    for part in spec.split(',') {
        match part.trim().split_once('=') {
            Some(("s", v)) => s = Some(v.parse().context("bad s=")?),
            Some(("n", v)) => n = Some(v.parse().context("bad n=")?),
            Some(("len", v)) => len = Some(v.parse().context("bad len=")?),
            _ => bail!("unknown synthetic field {part:?}, expected s=,n=,len="),
        }
    }
    match (s, n, len) {
        (Some(s), Some(n), Some(len)) => Ok((s, n, len)),
        _ => bail!("--synthetic needs all of s=, n=, len="),
    }
}

fn client(args: ClientArgs) -> Result<()> {
    let (addrs, kinds) = match (&args.trace, &args.synthetic) {
        (Some(path), None) => {
            let trace = ingest_csv_trace_file(path)
                .with_context(|| format!("reading trace {}", path.display()))?;
            let kinds = trace.ops.iter().map(|op| op.kind).collect();
            (trace.addresses(), kinds)
        }
        (None, Some(spec)) => {
            let (s, n, len) = parse_synthetic(spec)?;
            let addrs = gen_temporal_zipf_trace(n, len, s, args.seed);
            let kinds = decide_kinds(len, args.mix, args.seed);
            (addrs, kinds)
        }
        _ => bail!("give exactly one of --trace or --synthetic"),
    };

    let mut client = CloakClient::connect(&args.proxy)
        .with_context(|| format!("connecting to proxy at {}", args.proxy))?;
    let report = replay_wall_with_kinds(
        &mut client,
        &addrs,
        &kinds,
        &ReplayConfig {
            write_mix: args.mix,
            seed: args.seed,
            target_rate: args.rate,
            pipeline_depth: args.pipeline_depth,
            element_size: args.element_size,
        },
    )?;
    let doc = serde_json::to_string_pretty(&report)?;
    println!("{doc}");
    if let Some(path) = &args.out {
        std::fs::write(path, &doc).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn audit(args: AuditArgs) -> Result<()> {
    let budgets_text = std::fs::read_to_string(&args.budgets)
        .with_context(|| format!("reading budgets {}", args.budgets.display()))?;
    let budgets: Vec<u64> = match serde_json::from_str::<serde_json::Value>(&budgets_text)? {
        serde_json::Value::Array(_) => serde_json::from_str(&budgets_text)?,
        serde_json::Value::Object(map) => serde_json::from_value(
            map.get("budgets").context("no \"budgets\" key in the JSON object")?.clone(),
        )?,
        _ => bail!("budgets JSON must be an array or an object with a budgets key"),
    };
    let schedule = BudgetSchedule::new(budgets)?;

    let file = std::fs::File::open(&args.log)
        .with_context(|| format!("opening log {}", args.log.display()))?;
    let log = read_ndjson_log(BufReader::new(file))?;

    let warmup = match args.warmup.as_str() {
        "auto" => None,
        other => Some(other.parse().context("--warmup takes a number or \"auto\"")?),
    };
    let cadence = match args.interval_micros {
        Some(expected_micros) => CadenceSpec::Wall { expected_micros },
        None => CadenceSpec::ExactTicks,
    };
    let report =
        audit_obliviousness(&log, &schedule, &AuditOptions { warmup, cadence, ..Default::default() })?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.passed() {
        println!("AUDIT PASS");
        Ok(())
    } else {
        println!("AUDIT FAIL");
        std::process::exit(1);
    }
}

fn bench(args: BenchArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let config: BenchConfig = toml::from_str(&text).context("parsing bench config")?;
    let metrics =
        if args.baseline { run_baseline(&config)? } else { run_benchmark(&config)? };
    let doc = serde_json::to_string_pretty(&metrics)?;
    println!("{doc}");
    if let Some(path) = &args.out {
        std::fs::write(path, &doc).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn lincheck(args: LincheckArgs) -> Result<()> {
    let file = std::fs::File::open(&args.history)
        .with_context(|| format!("opening history {}", args.history.display()))?;
    let history = read_history(BufReader::new(file))?;
    let verdict = check_linearizability(&history)?;
    println!("{}", serde_json::to_string_pretty(&verdict)?);
    if verdict.is_pass() {
        Ok(())
    } else {
        std::process::exit(1);
    }
}
