//! Small statistical helpers used by the audit harness and tests.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Upper-tail p-value of a chi-square statistic.
pub fn chi_square_p_value(statistic: f64, df: f64) -> f64 {
    if df <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df).expect("positive df");
    (1.0 - dist.cdf(statistic)).clamp(0.0, 1.0)
}

/// Goodness-of-fit test of observed bin counts against uniform expected
/// counts. Returns the p-value; low values mean "not uniform".
pub fn chi_square_uniform_p(observed: &[u64]) -> f64 {
    let k = observed.len();
    if k < 2 {
        return 1.0;
    }
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let expected = total as f64 / k as f64;
    let stat: f64 = observed
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum();
    chi_square_p_value(stat, (k - 1) as f64)
}

/// Goodness-of-fit test against explicit expected counts, for nulls that
/// are not flat across bins. Bins with no expected mass contribute
/// nothing unless observations land there, which is an immediate fail.
pub fn chi_square_gof_p(observed: &[u64], expected: &[f64]) -> f64 {
    assert_eq!(observed.len(), expected.len(), "bin layouts must match");
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let mut stat = 0.0;
    let mut live_bins = 0usize;
    for (&o, &e) in observed.iter().zip(expected) {
        if e <= 0.0 {
            if o > 0 {
                return 0.0;
            }
            continue;
        }
        live_bins += 1;
        let d = o as f64 - e;
        stat += d * d / e;
    }
    if live_bins < 2 {
        return 1.0;
    }
    chi_square_p_value(stat, (live_bins - 1) as f64)
}

/// Two-sample chi-square homogeneity test on binned counts: are the two
/// samples drawn from the same distribution? Bins empty in both samples
/// are dropped; the statistic is the standard two-row contingency form.
pub fn chi_square_two_sample_p(a: &[u64], b: &[u64]) -> f64 {
    assert_eq!(a.len(), b.len(), "bin layouts must match");
    let tot_a: u64 = a.iter().sum();
    let tot_b: u64 = b.iter().sum();
    if tot_a == 0 || tot_b == 0 {
        return 1.0;
    }
    let grand = (tot_a + tot_b) as f64;
    let mut stat = 0.0;
    let mut used_bins = 0usize;
    for (&ca, &cb) in a.iter().zip(b) {
        let col = (ca + cb) as f64;
        if col == 0.0 {
            continue;
        }
        used_bins += 1;
        let ea = col * tot_a as f64 / grand;
        let eb = col * tot_b as f64 / grand;
        let da = ca as f64 - ea;
        let db = cb as f64 - eb;
        stat += da * da / ea + db * db / eb;
    }
    if used_bins < 2 {
        return 1.0;
    }
    chi_square_p_value(stat, (used_bins - 1) as f64)
}

/// Arithmetic mean. Empty input yields zero, which suits the "no data yet"
/// reporting paths that call this.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Percentile by nearest-rank on a private sorted copy, p in [0, 100].
pub fn percentile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p / 100.0) * (sorted.len() as f64 - 1.0)).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}
