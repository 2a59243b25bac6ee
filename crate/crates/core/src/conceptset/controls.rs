//! Noise and supervision-proportion controls over a built dataset.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::AnnotatedSequence;
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Replaces every synonym set with a same-size uniform draw from the pool of
/// all synonym tokens in the dataset, excluding the annotation's own original.
pub fn randomize_synonyms(
    dataset: &[AnnotatedSequence],
    seed: u64,
) -> Result<Vec<AnnotatedSequence>> {
    let pool: Vec<TokenId> = dataset
        .iter()
        .flat_map(|d| {
            d.annotations
                .iter()
                .flat_map(|a| a.synonyms.iter().copied())
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = rng_from_seed(seed);
    let mut out = dataset.to_vec();
    for item in &mut out {
        for a in &mut item.annotations {
            let n = a.synonyms.len();
            if n == 0 {
                continue;
            }
            let eligible: Vec<TokenId> =
                pool.iter().copied().filter(|&t| t != a.original).collect();
            if eligible.len() < n {
                return Err(Error::Sampling(format!(
                    "pool of {} tokens cannot supply {n} synonyms at position {}",
                    eligible.len(),
                    a.position
                )));
            }
            a.synonyms = sample(&mut rng, eligible.len(), n)
                .into_iter()
                .map(|i| eligible[i])
                .collect();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionProportion {
    All,
    Half,
    Quarter,
    LastOnly,
}

impl SupervisionProportion {
    pub const ALL: [SupervisionProportion; 4] =
        [Self::All, Self::Half, Self::Quarter, Self::LastOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Half => "half",
            Self::Quarter => "quarter",
            Self::LastOnly => "last_only",
        }
    }

    fn fraction(self) -> Option<f64> {
        match self {
            Self::All => Some(1.0),
            Self::Half => Some(0.5),
            Self::Quarter => Some(0.25),
            Self::LastOnly => None,
        }
    }
}

impl fmt::Display for SupervisionProportion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SupervisionProportion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown supervision proportion {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SubsampleReport {
    pub sequences_in: usize,
    pub sequences_out: usize,
    /// Sequences removed because they do not end in an annotated content word.
    pub filtered_sequences: usize,
    pub annotations_in: usize,
    pub annotations_out: usize,
}

/// Keeps a uniform subset of each sequence's annotations: `max(1, ⌊n·f⌋)` of `n`,
/// or only the final-position annotation for `LastOnly`.
pub fn subsample_supervision(
    dataset: &[AnnotatedSequence],
    mode: SupervisionProportion,
    seed: u64,
) -> (Vec<AnnotatedSequence>, SubsampleReport) {
    let mut report = SubsampleReport {
        sequences_in: dataset.len(),
        annotations_in: dataset.iter().map(|d| d.annotations.len()).sum(),
        ..SubsampleReport::default()
    };
    let mut out = Vec::with_capacity(dataset.len());
    for (i, item) in dataset.iter().enumerate() {
        let n = item.annotations.len();
        match mode.fraction() {
            Some(f) => {
                let mut kept = item.clone();
                if n > 0 && f < 1.0 {
                    let keep = ((n as f64 * f).floor() as usize).max(1);
                    let mut rng = rng_from_seed(derive_seed(seed, i as u64));
                    let mut idx = sample(&mut rng, n, keep).into_vec();
                    idx.sort_unstable();
                    kept.annotations = idx
                        .into_iter()
                        .map(|j| item.annotations[j].clone())
                        .collect();
                }
                out.push(kept);
            }
            None => {
                let last = item.sequence.len().wrapping_sub(1);
                let ann = item.annotations.iter().find(|a| a.position == last);
                match ann {
                    Some(a) if item.sequence.ends_in_content() => out.push(AnnotatedSequence {
                        sequence: item.sequence.clone(),
                        annotations: vec![a.clone()],
                    }),
                    _ => report.filtered_sequences += 1,
                }
            }
        }
    }
    report.sequences_out = out.len();
    report.annotations_out = out.iter().map(|d| d.annotations.len()).sum();
    (out, report)
}
