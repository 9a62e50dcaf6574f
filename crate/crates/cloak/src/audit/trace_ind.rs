//! The two-run indistinguishability experiment.
//!
//! An adversary picks two query sequences; the full stack runs once per
//! sequence with independent secrets, and the two batch logs are compared
//! the way the adversary would compare them. The deterministic observables
//! (how many batches, their sizes, per-set draw counts by batch index,
//! arrival gaps) must match exactly, and the within-set choice of which
//! slot gets drawn must be statistically indistinguishable between runs.
//!
//! Both runs are driven for the same number of ticks with the same
//! offered-load shape, so any divergence in the logs is the proxy's doing,
//! not the driver's. Responses are discarded; the threat model gives the
//! adversary the storage-side trace, not client-side values.

use serde::Serialize;

use crate::crypto::seeded_rng;
use crate::error::{Error, Result};
use crate::model::{LogicalAddress, Query, QueryKind};
use crate::proxy::sim::{SimProxy, Submit};
use crate::proxy::ProxyConfig;
use crate::stats::chi_square_two_sample_p;
use crate::store::BatchLogEntry;
use crate::workload::trace::write_payload;

use super::obliviousness::{analyze_log, audit_obliviousness, AuditOptions, AuditReport, PairwiseStats};

use rand::Rng;

/// A query sequence as the game defines it: operations over logical
/// addresses, order significant, values immaterial.
pub type QuerySeq = Vec<(QueryKind, u64)>;

pub fn hot_reads(addr: u64, n: usize) -> QuerySeq {
    std::iter::repeat_n((QueryKind::Read, addr), n).collect()
}

pub fn uniform_reads(n_elements: u64, n: usize, seed: u64) -> QuerySeq {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| (QueryKind::Read, rng.random_range(0..n_elements))).collect()
}

#[derive(Debug, Clone)]
pub struct GameConfig {
    /// Proxy under test; the seed field is replaced per run.
    pub proxy: ProxyConfig,
    /// Independent secrets for the two runs.
    pub seeds: (u64, u64),
    /// Floor on batches per run. Both runs always get the same tick count.
    pub min_batches: u64,
    /// Queries offered per tick while the sequence lasts.
    pub per_tick: usize,
    /// Defaults to one aging cycle, as in the audit.
    pub warmup: Option<usize>,
    pub bins: usize,
}

#[derive(Debug, Serialize)]
pub struct TraceIndReport {
    /// Full audit of each run, when its log is long enough to audit.
    pub run0: Option<AuditReport>,
    pub run1: Option<AuditReport>,
    pub pairwise: PairwiseStats,
}

impl TraceIndReport {
    /// Whether the adversary wins: anything observable separates the runs.
    pub fn distinguished(&self) -> bool {
        self.pairwise.distinguishable(0.01)
    }
}

/// Drives one simulated proxy through `seq` for exactly `ticks` ticks and
/// returns the storage-side log. Errors if the load could not be fully
/// offered, since a clipped sequence would make run comparisons about the
/// driver rather than the proxy.
pub fn run_logged(
    seq: &QuerySeq,
    config: ProxyConfig,
    seed: u64,
    ticks: u64,
    per_tick: usize,
) -> Result<Vec<BatchLogEntry>> {
    let mut cfg = config;
    cfg.seed = Some(seed);
    let mut sim = SimProxy::new(cfg)?;
    let element_size = sim.element_size();
    let mut next = 0usize;
    let mut held: Option<Query> = None;
    for _ in 0..ticks {
        let mut offered = 0usize;
        while offered < per_tick {
            let query = match held.take() {
                Some(q) => q,
                None if next < seq.len() => {
                    let (kind, addr) = seq[next];
                    let value = match kind {
                        QueryKind::Read => Vec::new(),
                        QueryKind::Write => {
                            write_payload(&addr.to_string(), next as u64, element_size)
                        }
                    };
                    next += 1;
                    Query {
                        id: next as u64 - 1,
                        kind,
                        addr: LogicalAddress(addr),
                        value,
                        arrival: 0,
                    }
                }
                None => break,
            };
            match sim.submit(query) {
                Submit::Accepted => offered += 1,
                Submit::Busy(q) => {
                    held = Some(q);
                    break;
                }
            }
        }
        sim.end_tick()?;
        sim.drain_responses();
    }
    if held.is_some() || next < seq.len() {
        return Err(Error::Config(format!(
            "game under-provisioned: {} of {} queries offered within {ticks} ticks",
            next - held.is_some() as usize,
            seq.len()
        )));
    }
    Ok(sim.store().lock().unwrap().take_log())
}

#[derive(Serialize)]
struct Observables<'a> {
    batch_count: usize,
    sizes: &'a [usize],
    class_counts: &'a [Vec<u64>],
    gaps: &'a [u64],
}

pub fn trace_ind_experiment(
    q0: &QuerySeq,
    q1: &QuerySeq,
    cfg: &GameConfig,
) -> Result<TraceIndReport> {
    let warmup = cfg.warmup.unwrap_or(cfg.proxy.schedule.max_set_index());
    let longest = q0.len().max(q1.len()) as u64;
    let feed_ticks = longest.div_ceil(cfg.per_tick.max(1) as u64);
    // headroom past the feed so queued tails drain inside the run
    let ticks = cfg.min_batches.max(feed_ticks + warmup as u64 + 1);

    let log0 = run_logged(q0, cfg.proxy.clone(), cfg.seeds.0, ticks, cfg.per_tick)?;
    let log1 = run_logged(q1, cfg.proxy.clone(), cfg.seeds.1, ticks, cfg.per_tick)?;

    let a0 = analyze_log(&log0, &cfg.proxy.schedule, warmup, cfg.bins);
    let a1 = analyze_log(&log1, &cfg.proxy.schedule, warmup, cfg.bins);

    let obs0 = serde_json::to_vec(&Observables {
        batch_count: log0.len(),
        sizes: &a0.batch_sizes,
        class_counts: &a0.class_counts,
        gaps: &a0.gaps,
    })?;
    let obs1 = serde_json::to_vec(&Observables {
        batch_count: log1.len(),
        sizes: &a1.batch_sizes,
        class_counts: &a1.class_counts,
        gaps: &a1.gaps,
    })?;

    let per_set_p: Vec<f64> = a0
        .rank_bins
        .iter()
        .zip(&a1.rank_bins)
        .map(|(h0, h1)| chi_square_two_sample_p(h0, h1))
        .collect();

    let pairwise = PairwiseStats { observables_identical: obs0 == obs1, per_set_p };

    let audit_opts = AuditOptions { warmup: Some(warmup), bins: cfg.bins, ..Default::default() };
    let audit = |log: &[BatchLogEntry]| {
        (log.len() > warmup + 100)
            .then(|| audit_obliviousness(log, &cfg.proxy.schedule, &audit_opts))
            .transpose()
    };
    let mut run0 = audit(&log0)?;
    if let Some(r) = run0.as_mut() {
        r.pairwise_distance_stats = Some(pairwise.clone());
    }
    let run1 = audit(&log1)?;

    Ok(TraceIndReport { run0, run1, pairwise })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BudgetSchedule;
    use crate::proxy::Mutation;
    use std::time::Duration;

    fn game(mutation: Option<Mutation>) -> GameConfig {
        let schedule = BudgetSchedule::new(vec![4, 2, 2]).unwrap();
        GameConfig {
            proxy: ProxyConfig {
                n_elements: schedule.capacity,
                schedule,
                element_size: 16,
                max_cache_capacity: 2,
                max_queue_capacity: 32,
                batch_interval: Duration::from_millis(1),
                key: [9; 16],
                seed: None,
                mutation,
            },
            seeds: (101, 202),
            min_batches: 150,
            per_tick: 4,
            warmup: None,
            bins: 10,
        }
    }

    #[test]
    fn hot_and_uniform_are_indistinguishable_on_the_healthy_proxy() {
        let cfg = game(None);
        let q0 = hot_reads(0, 400);
        let q1 = uniform_reads(cfg.proxy.n_elements, 400, 5);
        let report = trace_ind_experiment(&q0, &q1, &cfg).unwrap();
        assert!(report.pairwise.observables_identical);
        assert!(
            report.pairwise.per_set_p.iter().all(|&p| p > 0.01),
            "per-set p values: {:?}",
            report.pairwise.per_set_p
        );
        assert!(!report.distinguished());
        let run0 = report.run0.expect("log long enough to audit");
        assert!(run0.passed(), "failures: {:?}", run0.failures);
        assert!(report.run1.expect("log long enough to audit").passed());
    }

    #[test]
    fn identical_sequences_are_trivially_indistinguishable() {
        let cfg = game(None);
        let q = uniform_reads(cfg.proxy.n_elements, 300, 8);
        let report = trace_ind_experiment(&q, &q, &cfg).unwrap();
        assert!(report.pairwise.observables_identical);
        assert!(!report.distinguished());
    }

    #[test]
    fn the_dummy_skipping_mutant_is_distinguished() {
        let cfg = game(Some(Mutation::SkipDummyFill));
        let q0 = hot_reads(0, 400);
        let q1 = uniform_reads(cfg.proxy.n_elements, 400, 5);
        let report = trace_ind_experiment(&q0, &q1, &cfg).unwrap();
        assert!(!report.pairwise.observables_identical);
        assert!(report.distinguished());
    }
}
