use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::external::{parse_reply, render_prompt, ExternalProvider};
use super::{AnnotatedSequence, ConceptAnnotation};
use crate::corpus::{Sequence, TokenClass, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::scalar::Scalar;

/// Decides which candidates are contextual synonyms of the original token.
pub enum FilterProvider {
    /// Ground truth: keep candidates that share the original's concept.
    Oracle,
    External(ExternalProvider),
}

/// Result of one filter call plus the bookkeeping the dataset report aggregates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FilterOutcome {
    pub synonyms: Vec<TokenId>,
    /// Repeated words in a provider reply.
    pub duplicates: usize,
    /// Reply words that were not among the candidates.
    pub rejected: usize,
    /// Accepted synonyms dropped by the cap.
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub sequences: usize,
    pub annotations: usize,
    pub empty_sets: usize,
    pub duplicates: usize,
    pub rejected: usize,
    pub truncated: usize,
}

/// Top `k` token ids of a logit row by descending probability, ties by ascending id.
pub fn rank_candidates<F: Scalar>(row: &[F], k: usize) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..row.len()).collect();
    ids.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    ids
}

fn check_position(seq: &Sequence, position: usize) -> Result<()> {
    if position == 0 || position >= seq.len() || !seq.is_content_position(position) {
        return Err(Error::NotContent { position });
    }
    Ok(())
}

/// The model's `k` most likely continuations of the prefix ending just before `position`.
pub fn extract_candidates<F: Scalar>(
    params: &ModelParams<F>,
    seq: &Sequence,
    position: usize,
    k: usize,
) -> Result<Vec<TokenId>> {
    check_position(seq, position)?;
    if k == 0 {
        return Err(Error::config("candidate count k must be >= 1"));
    }
    let out = forward(params, &seq.token_ids[..position])?;
    Ok(rank_candidates(out.logits.row(position - 1), k))
}

fn sequence_text(seq: &Sequence, vocab: &Vocabulary) -> String {
    seq.token_ids
        .iter()
        .filter(|&&t| vocab.class(t) != TokenClass::Special)
        .map(|&t| vocab.token(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Keeps the accepted candidates in candidate-rank order, without the original, up to `cap`.
fn finish(
    candidates: &[TokenId],
    original: TokenId,
    accepted: impl Fn(TokenId) -> bool,
    cap: usize,
) -> (Vec<TokenId>, usize) {
    let all: Vec<TokenId> = candidates
        .iter()
        .copied()
        .filter(|&c| c != original && accepted(c))
        .collect();
    let truncated = all.len().saturating_sub(cap);
    (all.into_iter().take(cap).collect(), truncated)
}

pub fn filter_synonyms(
    candidates: &[TokenId],
    seq: &Sequence,
    position: usize,
    provider: &FilterProvider,
    vocab: &Vocabulary,
    cap: usize,
) -> Result<FilterOutcome> {
    check_position(seq, position)?;
    let original = seq.token_ids[position];
    match provider {
        FilterProvider::Oracle => {
            let concept = vocab.concept_of(original);
            let (synonyms, truncated) = finish(
                candidates,
                original,
                |c| concept.is_some() && vocab.concept_of(c) == concept,
                cap,
            );
            Ok(FilterOutcome {
                synonyms,
                truncated,
                ..FilterOutcome::default()
            })
        }
        FilterProvider::External(client) => {
            let decoded: Vec<&str> = candidates.iter().map(|&c| vocab.token(c)).collect();
            let prompt = render_prompt(vocab.token(original), &sequence_text(seq, vocab), &decoded);
            let reply = parse_reply(&client.complete(&prompt)?)?;
            let mut picked = Vec::new();
            let mut rejected = 0;
            for w in &reply.words {
                match vocab.id(w).filter(|id| candidates.contains(id)) {
                    Some(id) => picked.push(id),
                    None => rejected += 1,
                }
            }
            let (synonyms, truncated) = finish(candidates, original, |c| picked.contains(&c), cap);
            Ok(FilterOutcome {
                synonyms,
                duplicates: reply.duplicates,
                rejected,
                truncated,
            })
        }
    }
}

fn annotate_one<F: Scalar>(
    params: &ModelParams<F>,
    seq: &Sequence,
    provider: &FilterProvider,
    vocab: &Vocabulary,
    k: usize,
    cap: usize,
) -> Result<(AnnotatedSequence, BuildReport)> {
    let mut report = BuildReport {
        sequences: 1,
        ..BuildReport::default()
    };
    let mut annotations = Vec::with_capacity(seq.content_positions.len());
    let positions: Vec<usize> = seq
        .content_positions
        .iter()
        .copied()
        .filter(|&p| p > 0)
        .collect();
    if !positions.is_empty() {
        // One pass over the full sequence; row p-1 only sees the prefix before p.
        let out = forward(params, &seq.token_ids)?;
        for p in positions {
            let candidates = rank_candidates(out.logits.row(p - 1), k);
            let f = filter_synonyms(&candidates, seq, p, provider, vocab, cap)?;
            report.annotations += 1;
            report.empty_sets += usize::from(f.synonyms.is_empty());
            report.duplicates += f.duplicates;
            report.rejected += f.rejected;
            report.truncated += f.truncated;
            annotations.push(ConceptAnnotation::new(p, seq.token_ids[p], f.synonyms));
        }
    }
    Ok((
        AnnotatedSequence {
            sequence: seq.clone(),
            annotations,
        },
        report,
    ))
}

/// Annotates every content position of every sequence, in parallel over sequences.
pub fn build_dataset<F: Scalar>(
    params: &ModelParams<F>,
    corpus: &[Sequence],
    provider: &FilterProvider,
    vocab: &Vocabulary,
    k: usize,
    cap: usize,
) -> Result<(Vec<AnnotatedSequence>, BuildReport)> {
    if corpus.is_empty() {
        return Err(Error::EmptySet("corpus for concept dataset".into()));
    }
    if k == 0 {
        return Err(Error::config("candidate count k must be >= 1"));
    }
    let results: Vec<Result<(AnnotatedSequence, BuildReport)>> = corpus
        .par_iter()
        .map(|seq| annotate_one(params, seq, provider, vocab, k, cap))
        .collect();
    let mut dataset = Vec::with_capacity(corpus.len());
    let mut total = BuildReport::default();
    for r in results {
        let (item, rep) = r?;
        dataset.push(item);
        total.sequences += rep.sequences;
        total.annotations += rep.annotations;
        total.empty_sets += rep.empty_sets;
        total.duplicates += rep.duplicates;
        total.rejected += rep.rejected;
        total.truncated += rep.truncated;
    }
    if total.duplicates > 0 {
        log::info!("removed {} duplicate provider synonyms", total.duplicates);
    }
    Ok((dataset, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conceptset::{CompletionTransport, ExternalConfig, TransportFailure};
    use crate::corpus::{build_vocabulary, VocabConfig};
    use crate::model::{init_params, ModelConfig};
    use crate::objective::softmax;

    fn vocab() -> Vocabulary {
        build_vocabulary(&VocabConfig {
            n_domains: 2,
            concepts_per_domain: 2,
            tokens_per_concept: 3,
            n_function: 4,
            seed: 1,
        })
        .unwrap()
    }

    fn seq(v: &Vocabulary) -> Sequence {
        let c = v.content_tokens();
        let f = v.function_tokens();
        Sequence::from_tokens(vec![v.bos(), f[0], c[0], f[1], c[4]], v)
    }

    #[test]
    fn ranking_matches_brute_force_softmax_sort() {
        let row = [0.3f64, 1.2, -0.5, 1.2, 0.0, 2.0];
        let p = softmax(&row);
        let r = rank_candidates(&row, 6);
        assert_eq!(r, vec![5, 1, 3, 0, 4, 2]);
        for w in r.windows(2) {
            assert!(p[w[0]] >= p[w[1]]);
        }
        assert_eq!(rank_candidates(&[0.0f32; 5], 3), vec![0, 1, 2]);
        assert_eq!(rank_candidates(&row, 200).len(), 6);
    }

    #[test]
    fn uniform_model_candidates_are_lowest_ids() {
        let v = vocab();
        let mut p = init_params::<f64>(ModelConfig::tiny(v.len()), 0).unwrap();
        p.output_projection.fill(0.0);
        let s = seq(&v);
        assert_eq!(extract_candidates(&p, &s, 2, 4).unwrap(), vec![0, 1, 2, 3]);
        let all = extract_candidates(&p, &s, 2, v.len()).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, (0..v.len()).collect::<Vec<_>>());
        assert!(matches!(
            extract_candidates(&p, &s, 1, 4),
            Err(Error::NotContent { position: 1 })
        ));
    }

    #[test]
    fn oracle_keeps_concept_members_by_rank() {
        let v = vocab();
        let s = seq(&v);
        let orig = s.token_ids[2];
        let members = v.concept_members(v.concept_of(orig).unwrap()).to_vec();
        let others: Vec<usize> = members.iter().copied().filter(|&m| m != orig).collect();
        let mut cands: Vec<usize> = (0..v.len()).rev().collect();
        let f = filter_synonyms(&cands, &s, 2, &FilterProvider::Oracle, &v, 10).unwrap();
        let mut expect = others.clone();
        expect.sort_by(|a, b| b.cmp(a));
        assert_eq!(f.synonyms, expect);
        let g = filter_synonyms(&cands, &s, 2, &FilterProvider::Oracle, &v, 1).unwrap();
        assert_eq!(g.synonyms, vec![expect[0]]);
        assert_eq!(g.truncated, expect.len() - 1);
        cands.retain(|c| !others.contains(c));
        let h = filter_synonyms(&cands, &s, 2, &FilterProvider::Oracle, &v, 10).unwrap();
        assert!(h.synonyms.is_empty());
    }

    struct Canned(String);

    impl CompletionTransport for Canned {
        fn complete(&self, _: &str) -> std::result::Result<String, TransportFailure> {
            Ok(self.0.clone())
        }
    }

    fn external(reply: &str) -> FilterProvider {
        FilterProvider::External(ExternalProvider::with_transport(
            Box::new(Canned(reply.into())),
            &ExternalConfig::default(),
        ))
    }

    #[test]
    fn external_reply_mapped_to_candidates() {
        let v = vocab();
        let s = seq(&v);
        let c = v.content_tokens();
        let cands = vec![c[3], c[1], c[2]];
        let reply = format!(
            "[{}, {}, {}, {}, nonsense]",
            v.token(c[1]),
            v.token(c[3]),
            v.token(c[1]),
            v.token(c[5])
        );
        let f = filter_synonyms(&cands, &s, 2, &external(&reply), &v, 10).unwrap();
        assert_eq!(f.synonyms, vec![c[3], c[1]]);
        assert_eq!(f.duplicates, 1);
        assert_eq!(f.rejected, 2);

        let e = filter_synonyms(&cands, &s, 2, &external("[]"), &v, 10).unwrap();
        assert!(e.synonyms.is_empty());
        assert!(matches!(
            filter_synonyms(&cands, &s, 2, &external("I think: surf"), &v, 10),
            Err(Error::ProviderReply(_))
        ));
    }

    #[test]
    fn dataset_has_one_annotation_per_content_position() {
        let v = vocab();
        let p = init_params::<f64>(ModelConfig::tiny(v.len()), 0).unwrap();
        let s = seq(&v);
        let (d, rep) = build_dataset(
            &p,
            std::slice::from_ref(&s),
            &FilterProvider::Oracle,
            &v,
            200,
            10,
        )
        .unwrap();
        assert_eq!(d[0].annotations.len(), 2);
        assert_eq!(rep.annotations, 2);
        for a in &d[0].annotations {
            for &syn in &a.synonyms {
                assert_eq!(v.concept_of(syn), v.concept_of(a.original));
            }
        }
        let (again, _) = build_dataset(&p, &[s], &FilterProvider::Oracle, &v, 200, 10).unwrap();
        assert_eq!(d, again);
        assert!(build_dataset(&p, &[], &FilterProvider::Oracle, &v, 200, 10).is_err());
    }
}
