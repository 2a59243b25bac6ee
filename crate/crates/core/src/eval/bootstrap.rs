//! Paired percentile bootstrap over aligned per-token records.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::metrics::PerTokenRecord;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairedMetric {
    /// 1 for a correct argmax, else 0.
    Acc,
    Nll,
}

impl PairedMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            PairedMetric::Acc => "acc",
            PairedMetric::Nll => "nll",
        }
    }

    fn value(self, r: &PerTokenRecord) -> f64 {
        match self {
            PairedMetric::Acc => f64::from(u8::from(r.correct)),
            PairedMetric::Nll => r.nll,
        }
    }
}

impl fmt::Display for PairedMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairedMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acc" => Ok(PairedMetric::Acc),
            "nll" => Ok(PairedMetric::Nll),
            other => Err(Error::config(format!("unknown paired metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub lower: f64,
    pub upper: f64,
    /// Mean of `b - a` over the original records.
    pub estimate: f64,
    pub resamples: usize,
    pub level: f64,
}

impl BootstrapCI {
    pub fn excludes_zero(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }
}

/// Per-position differences `metric(b) - metric(a)`; records must align on
/// `(sequence_id, position)`.
pub fn paired_differences(
    a: &[PerTokenRecord],
    b: &[PerTokenRecord],
    metric: PairedMetric,
) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Pairing(format!(
            "{} vs {} records",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| {
            if (x.sequence_id, x.position) != (y.sequence_id, y.position) {
                Err(Error::Pairing(format!(
                    "record {i}: ({}, {}) vs ({}, {})",
                    x.sequence_id, x.position, y.sequence_id, y.position
                )))
            } else {
                Ok(metric.value(y) - metric.value(x))
            }
        })
        .collect()
}

/// Inverse-CDF quantile of sorted samples: the `⌈p·n⌉`-th smallest.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

fn interval(mut means: Vec<f64>, estimate: f64, level: f64) -> BootstrapCI {
    means.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    BootstrapCI {
        lower: quantile_sorted(&means, alpha / 2.0),
        upper: quantile_sorted(&means, 1.0 - alpha / 2.0),
        estimate,
        resamples: means.len(),
        level,
    }
}

fn check_args(n: usize, resamples: usize, level: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptySet("no paired records".into()));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::config(
            "bootstrap needs resamples >= 1 and level in (0, 1)",
        ));
    }
    Ok(())
}

/// Percentile CI of `mean(b - a)` from `resamples` draws of aligned indices with replacement.
pub fn paired_bootstrap(
    a: &[PerTokenRecord],
    b: &[PerTokenRecord],
    metric: PairedMetric,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCI> {
    let d = paired_differences(a, b, metric)?;
    check_args(d.len(), resamples, level)?;
    let n = d.len();
    let estimate = d.iter().sum::<f64>() / n as f64;
    let mut rng = rng_from_seed(seed);
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| d[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    Ok(interval(means, estimate, level))
}

/// Largest record count [`exact_paired_bootstrap`] accepts.
pub const EXACT_MAX_RECORDS: usize = 12;

fn compositions(n: usize, parts: usize, prefix: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if parts == 1 {
        prefix.push(n);
        visit(prefix);
        prefix.pop();
        return;
    }
    for c in 0..=n {
        prefix.push(c);
        compositions(n - c, parts - 1, prefix, visit);
        prefix.pop();
    }
}

/// Percentile CI over the full bootstrap distribution: every one of the `n^n`
/// resamples, grouped by how often each record is drawn and weighted by the
/// multinomial count. Only for tiny `n`.
pub fn exact_paired_bootstrap(
    a: &[PerTokenRecord],
    b: &[PerTokenRecord],
    metric: PairedMetric,
    level: f64,
) -> Result<BootstrapCI> {
    let d = paired_differences(a, b, metric)?;
    check_args(d.len(), 1, level)?;
    let n = d.len();
    if n > EXACT_MAX_RECORDS {
        return Err(Error::config(format!(
            "exact bootstrap over {n} records (max {EXACT_MAX_RECORDS})"
        )));
    }
    let ln_fact: Vec<f64> = (0..=n)
        .scan(0.0, |acc, k| {
            if k > 0 {
                *acc += (k as f64).ln();
            }
            Some(*acc)
        })
        .collect();
    let mut atoms: Vec<(f64, f64)> = Vec::new();
    compositions(n, n, &mut Vec::with_capacity(n), &mut |counts| {
        let mean = counts
            .iter()
            .zip(&d)
            .map(|(&c, x)| c as f64 * x)
            .sum::<f64>()
            / n as f64;
        let ln_w = ln_fact[n]
            - counts.iter().map(|&c| ln_fact[c]).sum::<f64>()
            - n as f64 * (n as f64).ln();
        atoms.push((mean, ln_w.exp()));
    });
    atoms.sort_by(|x, y| x.0.total_cmp(&y.0));
    let alpha = 1.0 - level;
    // smallest mean whose cumulative weight reaches p
    let quantile = |p: f64| {
        let mut cum = 0.0;
        for &(m, w) in &atoms {
            cum += w;
            if cum >= p - 1e-12 {
                return m;
            }
        }
        atoms[atoms.len() - 1].0
    };
    Ok(BootstrapCI {
        lower: quantile(alpha / 2.0),
        upper: quantile(1.0 - alpha / 2.0),
        estimate: d.iter().sum::<f64>() / n as f64,
        resamples: atoms.len(),
        level,
    })
}
