//! Concept annotations: candidate extraction from a model, synonym filtering,
//! noise and supervision-proportion controls.

mod build;
mod controls;
mod external;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sequence, TokenId};

pub use build::{
    build_dataset, extract_candidates, filter_synonyms, rank_candidates, BuildReport,
    FilterOutcome, FilterProvider,
};
pub use controls::{
    randomize_synonyms, subsample_supervision, SubsampleReport, SupervisionProportion,
};
pub use external::{
    parse_reply, render_prompt, CompletionTransport, ExternalConfig, ExternalProvider,
    HttpTransport, ParsedReply, TransportFailure, PROMPT_TEMPLATE,
};

/// Maximum synonyms per annotation, not counting the original token.
pub const DEFAULT_SYNONYM_CAP: usize = 10;
/// Candidates drawn from the model per content position.
pub const DEFAULT_CANDIDATES: usize = 200;

/// Original token `T` at `position` with its synonym set `T*`.
///
/// `T` is never stored in `synonyms`; the objective adds it back when scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptAnnotation {
    pub position: usize,
    pub original: TokenId,
    pub synonyms: Vec<TokenId>,
}

impl ConceptAnnotation {
    /// Drops `original` and repeated ids from `synonyms`, keeping first occurrences in order.
    pub fn new(position: usize, original: TokenId, synonyms: Vec<TokenId>) -> Self {
        let mut seen = Vec::with_capacity(synonyms.len());
        for s in synonyms {
            if s != original && !seen.contains(&s) {
                seen.push(s);
            }
        }
        Self {
            position,
            original,
            synonyms: seen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSequence {
    pub sequence: Sequence,
    pub annotations: Vec<ConceptAnnotation>,
}

impl AnnotatedSequence {
    pub fn unannotated(sequence: Sequence) -> Self {
        Self {
            sequence,
            annotations: Vec::new(),
        }
    }
}

/// Total annotations across a dataset.
pub fn annotation_count(dataset: &[AnnotatedSequence]) -> usize {
    dataset.iter().map(|d| d.annotations.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn original_and_duplicates_removed() {
        let a = ConceptAnnotation::new(3, 7, vec![9, 7, 4, 9, 2]);
        assert_eq!(a.synonyms, vec![9, 4, 2]);
    }
}
