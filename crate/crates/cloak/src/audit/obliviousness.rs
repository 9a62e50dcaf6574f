//! Obliviousness audit over the server-observable batch log.
//!
//! The auditor is given exactly what the storage server sees: per batch,
//! an arrival time, the physical addresses read, and the (address,
//! ciphertext) pairs written back. It knows the public budget schedule and
//! nothing else. From that alone it reconstructs each address's reuse
//! distance (batches since the address last appeared) and verifies that
//! every batch has the fixed public composition, that write-backs mirror
//! reads, that ciphertexts never repeat, that cadence is steady, and that
//! which member of each reuse-distance set gets drawn is uniform.
//!
//! The reconstruction needs one full aging cycle before it can classify:
//! the initial assignment of addresses to sets is not observable, and an
//! address's distance is only known once it has been seen at least once.
//! Every address is touched within the first `T` batches (the deepest set
//! drains completely each batch), so composition checks start after a
//! warm-up of `T` batches by default.
//!
//! Uniformity is tested per set with normalized ranks: each drawn address
//! is ranked within its reconstructed set (sorted by physical address, an
//! ordering the proxy's shuffle cannot see), the rank is normalized to
//! (0, 1), and the values are binned for a chi-square test against the
//! uniform distribution. Ranks rather than raw addresses keep the test
//! meaningful as set membership churns batch to batch.

use std::collections::{HashMap, HashSet};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::BudgetSchedule;
use crate::stats::chi_square_gof_p;
use crate::store::BatchLogEntry;

/// The server-observable record the audit consumes. Ordered by batch.
pub type AdversaryTrace = [BatchLogEntry];

/// How strictly batch arrival times are judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CadenceSpec {
    /// Simulated clock: consecutive gaps must all be identical.
    ExactTicks,
    /// Wall clock: each gap within ±25% of the expected interval and the
    /// mean gap within ±1%. Loose per-gap, tight on average; scheduler
    /// jitter moves individual batches, not the long-run rate.
    Wall { expected_micros: u64 },
}

#[derive(Debug, Clone)]
pub struct AuditOptions {
    /// Batches to skip before composition checks. `None` means one full
    /// aging cycle, `schedule.max_set_index()`.
    pub warmup: Option<usize>,
    pub cadence: CadenceSpec,
    /// Rank histogram resolution for the uniformity tests. Clamped down
    /// to the set size where sets are smaller than this.
    pub bins: usize,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions { warmup: None, cadence: CadenceSpec::ExactTicks, bins: 10 }
    }
}

/// Two-run comparison produced by the indistinguishability experiment.
#[derive(Debug, Clone, Serialize)]
pub struct PairwiseStats {
    /// Whether the deterministic observables (batch sizes, per-set draw
    /// counts by batch index, cadence gaps) were byte-identical.
    pub observables_identical: bool,
    /// Two-sample test per set over the rank histograms of the two runs.
    pub per_set_p: Vec<f64>,
}

impl PairwiseStats {
    /// True when some observable or statistic separates the two runs.
    pub fn distinguishable(&self, alpha: f64) -> bool {
        !self.observables_identical || self.per_set_p.iter().any(|&p| p <= alpha)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub batches_checked: u64,
    pub cadence_ok: bool,
    pub size_ok: bool,
    pub composition_ok: bool,
    pub read_equals_write_ok: bool,
    pub ciphertext_fresh_ok: bool,
    /// One p-value per reuse-distance set, index 0 for set 1.
    pub uniformity_p_values: Vec<f64>,
    /// Fraction of sets with p above the per-test threshold of 0.01.
    pub uniformity_pass_fraction: f64,
    /// Human-readable descriptions of the first few failures.
    pub failures: Vec<String>,
    pub pairwise_distance_stats: Option<PairwiseStats>,
}

impl AuditReport {
    pub fn deterministic_ok(&self) -> bool {
        self.cadence_ok
            && self.size_ok
            && self.composition_ok
            && self.read_equals_write_ok
            && self.ciphertext_fresh_ok
    }

    /// The aggregate verdict: all deterministic checks plus at least 95%
    /// of the per-set uniformity tests clearing p > 0.01. The slack
    /// tolerates multiple testing; exact distributional equality cannot
    /// be confirmed from a finite sample.
    pub fn passed(&self) -> bool {
        self.deterministic_ok() && self.uniformity_pass_fraction >= 0.95
    }
}

/// Everything the reconstruction extracts from a log in one pass. Shared
/// by the audit and the two-run experiment so both agree on what an
/// observable is.
pub(crate) struct LogAnalysis {
    /// Read-list length per post-warm-up batch.
    pub batch_sizes: Vec<usize>,
    /// Per post-warm-up batch, how many draws fell in each set.
    pub class_counts: Vec<Vec<u64>>,
    /// Per set, histogram of normalized draw ranks.
    pub rank_bins: Vec<Vec<u64>>,
    /// Per set, the expected counts for `rank_bins` under uniform draws.
    /// Not flat when a set is larger than the bin count: integer ranks
    /// cannot split evenly across bins, so the null itself is lumpy.
    pub rank_expect: Vec<Vec<f64>>,
    /// Consecutive receive-time gaps across post-warm-up batches.
    pub gaps: Vec<u64>,
    pub times_monotonic: bool,
    pub size_ok: bool,
    pub composition_ok: bool,
    pub rw_ok: bool,
    pub anomalies: Vec<String>,
}

const MAX_RECORDED_ANOMALIES: usize = 12;

fn note(anomalies: &mut Vec<String>, msg: String) {
    if anomalies.len() < MAX_RECORDED_ANOMALIES {
        anomalies.push(msg);
    }
}

/// Bin index of rank `r` among `m` sorted members, folded to `width` bins.
fn rank_bin(r: usize, m: usize, width: usize) -> usize {
    let u = (r as f64 + 0.5) / m as f64;
    ((u * width as f64) as usize).min(width - 1)
}

/// Probability a uniform draw over `m` ranks lands in each of `width`
/// bins. Not flat when `width` does not divide `m`.
fn rank_mass(m: usize, width: usize) -> Vec<f64> {
    let mut mass = vec![0f64; width];
    for r in 0..m {
        mass[rank_bin(r, m, width)] += 1.0 / m as f64;
    }
    mass
}

pub(crate) fn analyze_log(
    log: &AdversaryTrace,
    schedule: &BudgetSchedule,
    warmup: usize,
    bins: usize,
) -> LogAnalysis {
    let t_max = schedule.max_set_index();
    let batch_size = schedule.batch_size as usize;
    // class index 0 is unused so counts line up with 1-indexed sets
    let mut last_seen: HashMap<u64, usize> = HashMap::new();
    // per-bin mass of a uniform rank draw, keyed by (set size, bin count);
    // set sizes repeat every batch so this stays tiny
    let mut mass_cache: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    let mut out = LogAnalysis {
        batch_sizes: Vec::new(),
        class_counts: Vec::new(),
        rank_bins: (1..=t_max)
            .map(|t| {
                let width = schedule.set_size_at(t).unwrap_or(1).min(bins as u64).max(1);
                vec![0u64; width as usize]
            })
            .collect(),
        rank_expect: (1..=t_max)
            .map(|t| {
                let width = schedule.set_size_at(t).unwrap_or(1).min(bins as u64).max(1);
                vec![0f64; width as usize]
            })
            .collect(),
        gaps: Vec::new(),
        times_monotonic: true,
        size_ok: true,
        composition_ok: true,
        rw_ok: true,
        anomalies: Vec::new(),
    };

    for (k, entry) in log.iter().enumerate() {
        // write-backs must mirror reads and addresses must be distinct;
        // both hold from the very first batch, warm-up or not
        let mut reads = entry.read_addresses.clone();
        reads.sort_unstable();
        if reads.windows(2).any(|w| w[0] == w[1]) {
            out.composition_ok = false;
            note(&mut out.anomalies, format!("batch {k}: duplicate read address"));
        }
        let mut writes: Vec<u64> = entry.written.iter().map(|w| w.addr).collect();
        writes.sort_unstable();
        if reads != writes {
            out.rw_ok = false;
            note(&mut out.anomalies, format!("batch {k}: write-back does not mirror reads"));
        }

        if k >= warmup {
            out.batch_sizes.push(entry.read_addresses.len());
            if entry.read_addresses.len() != batch_size {
                out.size_ok = false;
                note(
                    &mut out.anomalies,
                    format!(
                        "batch {k}: size {} != {batch_size}",
                        entry.read_addresses.len()
                    ),
                );
            }

            // set membership as the adversary reconstructs it, before
            // this batch refreshes anything
            let mut members: Vec<Vec<u64>> = vec![Vec::new(); t_max + 1];
            for (&addr, &seen) in &last_seen {
                let cls = k - seen;
                if (1..=t_max).contains(&cls) {
                    members[cls].push(addr);
                }
            }
            for m in &mut members {
                m.sort_unstable();
            }

            let mut counts = vec![0u64; t_max + 1];
            for &addr in &entry.read_addresses {
                let cls = match last_seen.get(&addr) {
                    Some(&seen) => k - seen,
                    None => {
                        out.composition_ok = false;
                        note(&mut out.anomalies, format!("batch {k}: address {addr} never seen before"));
                        continue;
                    }
                };
                if !(1..=t_max).contains(&cls) {
                    out.composition_ok = false;
                    note(&mut out.anomalies, format!("batch {k}: address {addr} has distance {cls}, outside 1..={t_max}"));
                    continue;
                }
                counts[cls] += 1;
                let set = &members[cls];
                if let Ok(rank) = set.binary_search(&addr) {
                    let hist = &mut out.rank_bins[cls - 1];
                    let width = hist.len();
                    hist[rank_bin(rank, set.len(), width)] += 1;
                    let mass = mass_cache
                        .entry((set.len(), width))
                        .or_insert_with(|| rank_mass(set.len(), width));
                    for (e, m) in out.rank_expect[cls - 1].iter_mut().zip(mass.iter()) {
                        *e += m;
                    }
                }
            }
            for t in 1..=t_max {
                let want = schedule.budgets[t - 1];
                if counts[t] != want {
                    out.composition_ok = false;
                    note(
                        &mut out.anomalies,
                        format!("batch {k}: drew {} from set {t}, budget is {want}", counts[t]),
                    );
                }
            }
            out.class_counts.push(counts[1..].to_vec());

            if k > warmup {
                let prev = log[k - 1].receive_time;
                if entry.receive_time <= prev {
                    out.times_monotonic = false;
                    note(&mut out.anomalies, format!("batch {k}: time not increasing"));
                } else {
                    out.gaps.push(entry.receive_time - prev);
                }
            }
        }

        for &addr in &entry.read_addresses {
            last_seen.insert(addr, k);
        }
    }

    out
}

fn cadence_passes(gaps: &[u64], spec: CadenceSpec, anomalies: &mut Vec<String>) -> bool {
    if gaps.is_empty() {
        return true;
    }
    match spec {
        CadenceSpec::ExactTicks => {
            let first = gaps[0];
            match gaps.iter().position(|&g| g != first) {
                None => true,
                Some(i) => {
                    note(anomalies, format!("cadence: gap {} of {} ticks, others {first}", i + 1, gaps[i]));
                    false
                }
            }
        }
        CadenceSpec::Wall { expected_micros } => {
            let e = expected_micros as f64;
            let mut ok = true;
            for (i, &g) in gaps.iter().enumerate() {
                let ratio = g as f64 / e;
                if !(0.75..=1.25).contains(&ratio) {
                    ok = false;
                    note(anomalies, format!("cadence: gap {} is {g}us, expected {expected_micros}us +-25%", i + 1));
                }
            }
            let mean = gaps.iter().sum::<u64>() as f64 / gaps.len() as f64;
            if (mean / e - 1.0).abs() > 0.01 {
                ok = false;
                note(anomalies, format!("cadence: mean gap {mean:.1}us drifts past 1% of {expected_micros}us"));
            }
            ok
        }
    }
}

/// Audits a batch log against the public schedule. Requires enough
/// batches past warm-up for the statistics to mean anything.
pub fn audit_obliviousness(
    log: &AdversaryTrace,
    schedule: &BudgetSchedule,
    options: &AuditOptions,
) -> Result<AuditReport> {
    let warmup = options.warmup.unwrap_or(schedule.max_set_index());
    if log.len() <= warmup + 100 {
        return Err(Error::Audit(format!(
            "need more than {} batches to audit (warm-up {warmup} plus 100), got {}",
            warmup + 100,
            log.len()
        )));
    }

    let mut analysis = analyze_log(log, schedule, warmup, options.bins);

    // ciphertext freshness spans the whole log: a repeated block anywhere
    // means a write-back was not re-encrypted
    let mut seen = HashSet::new();
    let mut fresh_ok = true;
    'scan: for (k, entry) in log.iter().enumerate() {
        for w in &entry.written {
            let digest: [u8; 32] = Sha256::digest(&w.block).into();
            if !seen.insert(digest) {
                fresh_ok = false;
                note(&mut analysis.anomalies, format!("batch {k}: ciphertext bytes repeat"));
                break 'scan;
            }
        }
    }

    let cadence_ok = analysis.times_monotonic
        && cadence_passes(&analysis.gaps, options.cadence, &mut analysis.anomalies);

    let p_values: Vec<f64> = analysis
        .rank_bins
        .iter()
        .zip(&analysis.rank_expect)
        .map(|(hist, expect)| chi_square_gof_p(hist, expect))
        .collect();
    let passing = p_values.iter().filter(|&&p| p > 0.01).count();

    Ok(AuditReport {
        batches_checked: (log.len() - warmup) as u64,
        cadence_ok,
        size_ok: analysis.size_ok,
        composition_ok: analysis.composition_ok,
        read_equals_write_ok: analysis.rw_ok,
        ciphertext_fresh_ok: fresh_ok,
        uniformity_pass_fraction: passing as f64 / p_values.len().max(1) as f64,
        uniformity_p_values: p_values,
        failures: analysis.anomalies,
        pairwise_distance_stats: None,
    })
}

/// Fault injectors for exercising the audit. Each edits a compliant log
/// so that exactly one protocol property no longer holds, proving the
/// corresponding check has teeth. They return the edited batch index.
pub mod faults {
    use super::*;

    fn pick_index(log: &AdversaryTrace, schedule: &BudgetSchedule) -> usize {
        let warmup = schedule.max_set_index();
        warmup + (log.len() - warmup) / 2
    }

    /// Replays the log up to `k` and returns where each address was last
    /// drawn, the same view the auditor has when it reaches batch `k`.
    fn last_seen_before(log: &AdversaryTrace, k: usize) -> HashMap<u64, usize> {
        let mut last_seen = HashMap::new();
        for (i, entry) in log.iter().enumerate().take(k) {
            for &addr in &entry.read_addresses {
                last_seen.insert(addr, i);
            }
        }
        last_seen
    }

    fn swap_addr(entry: &mut BatchLogEntry, from: u64, to: u64) {
        let r = entry.read_addresses.iter().position(|&a| a == from).expect("address drawn");
        entry.read_addresses[r] = to;
        let w = entry.written.iter().position(|w| w.addr == from).expect("address written");
        entry.written[w].addr = to;
    }

    /// Redirects one draw from a deeper set onto an extra member of set 1,
    /// so the batch draws budget+1 from set 1. Size, write mirroring and
    /// ciphertexts stay intact.
    pub fn composition(log: &mut Vec<BatchLogEntry>, schedule: &BudgetSchedule) -> usize {
        let k = pick_index(log, schedule);
        let last_seen = last_seen_before(log, k);
        let drawn: HashSet<u64> = log[k].read_addresses.iter().copied().collect();
        let victim = *log[k]
            .read_addresses
            .iter()
            .find(|a| last_seen.get(a).is_some_and(|&seen| k - seen >= 2))
            .expect("some draw comes from a deeper set");
        let replacement = last_seen
            .iter()
            .find(|(addr, &seen)| k - seen == 1 && !drawn.contains(addr))
            .map(|(&addr, _)| addr)
            .expect("set 1 is larger than its budget");
        swap_addr(&mut log[k], victim, replacement);
        k
    }

    /// Drops one slot from a batch, shrinking it below the public size.
    pub fn size(log: &mut Vec<BatchLogEntry>, schedule: &BudgetSchedule) -> usize {
        let k = pick_index(log, schedule);
        let gone = log[k].read_addresses.pop().expect("batch not empty");
        log[k].written.retain(|w| w.addr != gone);
        k
    }

    /// Delays one batch by `delta` time units without moving the rest.
    pub fn cadence(log: &mut Vec<BatchLogEntry>, schedule: &BudgetSchedule, delta: u64) -> usize {
        let k = pick_index(log, schedule);
        log[k].receive_time += delta;
        k
    }

    /// Copies ciphertext bytes from one batch into the next, as a proxy
    /// that skipped re-encryption would.
    pub fn freshness(log: &mut Vec<BatchLogEntry>, schedule: &BudgetSchedule) -> usize {
        let k = pick_index(log, schedule);
        let block = log[k].written[0].block.clone();
        log[k + 1].written[0].block = block;
        k + 1
    }

    /// Makes a batch read one address twice, keeping write mirroring.
    pub fn duplicate_address(log: &mut Vec<BatchLogEntry>, schedule: &BudgetSchedule) -> usize {
        let k = pick_index(log, schedule);
        let keep = log[k].read_addresses[0];
        let gone = log[k].read_addresses[1];
        log[k].read_addresses[1] = keep;
        let w = log[k].written.iter().position(|w| w.addr == gone).expect("mirrored write");
        log[k].written[w].addr = keep;
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::trace_ind::run_logged;
    use crate::model::QueryKind;
    use crate::proxy::ProxyConfig;
    use std::time::Duration;

    fn proxy_config(schedule: BudgetSchedule) -> ProxyConfig {
        ProxyConfig {
            n_elements: schedule.capacity,
            schedule,
            element_size: 16,
            max_cache_capacity: 2,
            max_queue_capacity: 32,
            batch_interval: Duration::from_millis(1),
            key: [3; 16],
            seed: Some(401),
            mutation: None,
        }
    }

    fn compliant_log(ticks: u64) -> (Vec<BatchLogEntry>, BudgetSchedule) {
        let schedule = BudgetSchedule::new(vec![4, 2, 2]).unwrap();
        let mut rng = crate::crypto::seeded_rng(77);
        use rand::Rng;
        let seq: Vec<(QueryKind, u64)> = (0..300)
            .map(|i| {
                let kind = if i % 3 == 0 { QueryKind::Write } else { QueryKind::Read };
                (kind, rng.random_range(0..14))
            })
            .collect();
        let log = run_logged(&seq, proxy_config(schedule.clone()), 19, ticks, 4).unwrap();
        (log, schedule)
    }

    #[test]
    fn compliant_run_passes_everything() {
        let (log, schedule) = compliant_log(200);
        let report = audit_obliviousness(&log, &schedule, &AuditOptions::default()).unwrap();
        assert!(report.deterministic_ok(), "failures: {:?}", report.failures);
        assert_eq!(report.uniformity_pass_fraction, 1.0, "p values: {:?}", report.uniformity_p_values);
        assert!(report.passed());
        assert_eq!(report.batches_checked, 200 - 3);
    }

    #[test]
    fn too_short_a_log_is_refused() {
        let (log, schedule) = compliant_log(200);
        let err = audit_obliviousness(&log[..100], &schedule, &AuditOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn each_fault_trips_its_own_check() {
        let (clean, schedule) = compliant_log(200);
        let opts = AuditOptions::default();

        let mut log = clean.clone();
        faults::composition(&mut log, &schedule);
        let report = audit_obliviousness(&log, &schedule, &opts).unwrap();
        assert!(!report.composition_ok);
        assert!(report.size_ok && report.read_equals_write_ok && report.ciphertext_fresh_ok && report.cadence_ok);

        let mut log = clean.clone();
        faults::size(&mut log, &schedule);
        let report = audit_obliviousness(&log, &schedule, &opts).unwrap();
        assert!(!report.size_ok);
        assert!(report.ciphertext_fresh_ok && report.cadence_ok);

        let mut log = clean.clone();
        faults::cadence(&mut log, &schedule, 1);
        let report = audit_obliviousness(&log, &schedule, &opts).unwrap();
        assert!(!report.cadence_ok);
        assert!(report.size_ok && report.composition_ok && report.ciphertext_fresh_ok);

        let mut log = clean.clone();
        faults::freshness(&mut log, &schedule);
        let report = audit_obliviousness(&log, &schedule, &opts).unwrap();
        assert!(!report.ciphertext_fresh_ok);
        assert!(report.size_ok && report.composition_ok && report.cadence_ok);

        let mut log = clean.clone();
        faults::duplicate_address(&mut log, &schedule);
        let report = audit_obliviousness(&log, &schedule, &opts).unwrap();
        assert!(!report.composition_ok);
        assert!(report.failures.iter().any(|f| f.contains("duplicate")), "{:?}", report.failures);
    }

    #[test]
    fn wall_cadence_tolerates_jitter_but_not_drift() {
        let (mut log, schedule) = compliant_log(200);
        // stretch tick times into a pretend microsecond clock
        for entry in &mut log {
            entry.receive_time *= 1000;
        }
        let opts = AuditOptions {
            cadence: CadenceSpec::Wall { expected_micros: 1000 },
            ..Default::default()
        };
        let report = audit_obliviousness(&log, &schedule, &opts).unwrap();
        assert!(report.cadence_ok);

        // 10% jitter on one gap stays inside the band
        let mut jittered = log.clone();
        let idx = jittered.len() - 2;
        jittered[idx].receive_time += 100;
        let report = audit_obliviousness(&jittered, &schedule, &opts).unwrap();
        assert!(report.cadence_ok, "failures: {:?}", report.failures);

        // 40% on one gap does not
        let mut late = log.clone();
        late[idx].receive_time += 400;
        let report = audit_obliviousness(&late, &schedule, &opts).unwrap();
        assert!(!report.cadence_ok);
    }
}

#[cfg(test)]
mod wide_set_tests {
    use super::*;
    use crate::audit::trace_ind::run_logged;
    use crate::model::QueryKind;
    use crate::planner::set_budgets;
    use crate::proxy::ProxyConfig;
    use std::time::Duration;

    // Sets wider than the bin count make the null lumpy: 32 ranks cannot
    // spread evenly over 10 bins. The test must not call that a leak.
    #[test]
    fn honest_run_with_sets_wider_than_bins_passes() {
        let schedule = set_budgets(100, 10);
        assert!(schedule.set_size_at(1).unwrap() > AuditOptions::default().bins as u64);
        let mut rng = crate::crypto::seeded_rng(77);
        use rand::Rng;
        let seq: Vec<(QueryKind, u64)> = (0..4000)
            .map(|i| {
                let kind = if i % 3 == 0 { QueryKind::Write } else { QueryKind::Read };
                (kind, rng.random_range(0..100))
            })
            .collect();
        let config = ProxyConfig {
            n_elements: 100,
            schedule: schedule.clone(),
            element_size: 16,
            max_cache_capacity: 8,
            max_queue_capacity: 64,
            batch_interval: Duration::from_millis(1),
            key: [3; 16],
            seed: Some(401),
            mutation: None,
        };
        let log = run_logged(&seq, config, 19, 400, 10).unwrap();
        let report = audit_obliviousness(&log, &schedule, &AuditOptions::default()).unwrap();
        assert_eq!(
            report.uniformity_pass_fraction, 1.0,
            "p values: {:?}", report.uniformity_p_values
        );
        assert!(report.passed());
    }
}
