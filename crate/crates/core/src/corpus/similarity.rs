use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};

pub const SAME_CONCEPT: f64 = 1.0;
pub const SAME_DOMAIN: f64 = 0.5;
pub const CROSS_DOMAIN: f64 = 0.0;

/// Graded ground-truth similarity over all unordered content-token pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSimilarity {
    pairs: Vec<(TokenId, TokenId, f64)>,
    lookup: HashMap<(TokenId, TokenId), usize>,
}

fn key(a: TokenId, b: TokenId) -> (TokenId, TokenId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl GroundTruthSimilarity {
    pub fn from_pairs(pairs: Vec<(TokenId, TokenId, f64)>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(pairs.len());
        for (i, &(a, b, s)) in pairs.iter().enumerate() {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::config(format!("similarity {s} outside [0, 1]")));
            }
            if lookup.insert(key(a, b), i).is_some() {
                return Err(Error::config(format!("duplicate pair ({a}, {b})")));
            }
        }
        Ok(Self { pairs, lookup })
    }

    pub fn pairs(&self) -> &[(TokenId, TokenId, f64)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Symmetric lookup.
    pub fn score(&self, a: TokenId, b: TokenId) -> Option<f64> {
        self.lookup.get(&key(a, b)).map(|&i| self.pairs[i].2)
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t: Vec<TokenId> = self.pairs.iter().flat_map(|&(a, b, _)| [a, b]).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    /// CSV with header `token_a,token_b,similarity`.
    pub fn save_csv(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["token_a", "token_b", "similarity"])?;
        for &(a, b, s) in &self.pairs {
            w.write_record([vocab.token(a), vocab.token(b), &format!("{s}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        #[derive(Deserialize, Serialize)]
        struct Row {
            token_a: String,
            token_b: String,
            similarity: f64,
        }
        let mut r = csv::Reader::from_path(path)?;
        let mut pairs = Vec::new();
        for row in r.deserialize() {
            let row: Row = row?;
            let id = |t: &str| {
                vocab
                    .id(t)
                    .ok_or_else(|| Error::Vocabulary(format!("unknown token {t:?}")))
            };
            pairs.push((id(&row.token_a)?, id(&row.token_b)?, row.similarity));
        }
        Self::from_pairs(pairs)
    }
}

/// Grades every content pair: same concept 1.0, same domain 0.5, else 0.0.
pub fn ground_truth_similarity(vocab: &Vocabulary) -> GroundTruthSimilarity {
    let content = vocab.content_tokens();
    let mut pairs = Vec::with_capacity(content.len() * content.len().saturating_sub(1) / 2);
    for (i, &a) in content.iter().enumerate() {
        for &b in &content[i + 1..] {
            let (ca, cb) = (vocab.concept_of(a), vocab.concept_of(b));
            let s = if ca == cb {
                SAME_CONCEPT
            } else if vocab.domain_of_token(a) == vocab.domain_of_token(b) {
                SAME_DOMAIN
            } else {
                CROSS_DOMAIN
            };
            pairs.push((a, b, s));
        }
    }
    GroundTruthSimilarity::from_pairs(pairs).expect("generated pairs are unique and graded")
}
