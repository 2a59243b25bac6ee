//! Model-dependent measurements: per-token scoring, hidden-state clustering
//! under synonym substitution, and word-similarity alignment.

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;

use super::metrics::{
    clustering_score, cosine, normalize, spearman, ClusteringStats, PerTokenRecord,
};
use crate::conceptset::AnnotatedSequence;
use crate::corpus::{GroundTruthSimilarity, ProbeTemplate, Sequence, TokenId};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::objective::token_nll;
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreSummary {
    pub sequences: usize,
    pub records: usize,
    /// Sequences cut to the context window before scoring.
    pub truncated: usize,
}

/// One record per next-token position of every sequence, in corpus order.
pub fn score_corpus<F: Scalar>(
    params: &ModelParams<F>,
    corpus: &[Sequence],
) -> Result<(Vec<PerTokenRecord>, ScoreSummary)> {
    let max = params.config.max_context;
    let per_seq: Vec<Result<Vec<PerTokenRecord>>> = corpus
        .par_iter()
        .enumerate()
        .map(|(sid, seq)| {
            let ids = &seq.token_ids[..seq.len().min(max)];
            if ids.len() < 2 {
                return Ok(Vec::new());
            }
            let out = forward(params, ids)?;
            Ok((0..ids.len() - 1)
                .map(|r| {
                    let row = out.logits.row(r);
                    PerTokenRecord {
                        sequence_id: sid,
                        position: r + 1,
                        is_content: seq.is_content_position(r + 1),
                        nll: token_nll(row, ids[r + 1]).as_f64(),
                        correct: argmax(row) == ids[r + 1],
                    }
                })
                .collect())
        })
        .collect();
    let mut records = Vec::new();
    for r in per_seq {
        records.extend(r?);
    }
    let truncated = corpus.iter().filter(|s| s.len() > max).count();
    if truncated > 0 {
        log::warn!("{truncated} sequences truncated to the {max}-token context");
    }
    let summary = ScoreSummary {
        sequences: corpus.len(),
        records: records.len(),
        truncated,
    };
    Ok((records, summary))
}

/// Final-layer hidden state at `position` after reading `ids[..=position]`.
pub fn hidden_at<F: Scalar>(
    params: &ModelParams<F>,
    ids: &[TokenId],
    position: usize,
) -> Result<Vec<f64>> {
    let out = forward(params, &ids[..=position])?;
    Ok(out
        .final_hidden
        .row(position)
        .iter()
        .map(|x| x.as_f64())
        .collect())
}

/// For up to `sample` sequences with a non-empty synonym set, substitutes the
/// original and then each synonym at one annotated position and groups the
/// resulting hidden states per sequence.
pub fn clustering_metrics<F: Scalar>(
    params: &ModelParams<F>,
    dataset: &[AnnotatedSequence],
    sample_size: usize,
    seed: u64,
) -> Result<ClusteringStats> {
    let eligible: Vec<usize> = dataset
        .iter()
        .enumerate()
        .filter(|(_, d)| d.annotations.iter().any(|a| !a.synonyms.is_empty()))
        .map(|(i, _)| i)
        .collect();
    if eligible.len() < 2 {
        return Err(Error::EmptySet(
            "fewer than two sequences with synonyms".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut picked = sample(&mut rng, eligible.len(), sample_size.min(eligible.len())).into_vec();
    picked.sort_unstable();
    let jobs: Vec<(usize, usize)> = picked
        .into_iter()
        .map(|k| {
            let item = &dataset[eligible[k]];
            let with_syn: Vec<usize> = (0..item.annotations.len())
                .filter(|&j| !item.annotations[j].synonyms.is_empty())
                .collect();
            (eligible[k], with_syn[rng.random_range(0..with_syn.len())])
        })
        .collect();
    let groups: Vec<Vec<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(si, ai)| {
            let item = &dataset[si];
            let a = &item.annotations[ai];
            let mut ids = item.sequence.token_ids.clone();
            std::iter::once(a.original)
                .chain(a.synonyms.iter().copied())
                .map(|t| {
                    ids[a.position] = t;
                    hidden_at(params, &ids, a.position)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    clustering_score(&groups)
}

/// Mean of the final hidden states from the word onward, over every
/// template. Positions before the word cannot see it and are left out.
pub fn pooled_representation<F: Scalar>(
    params: &ModelParams<F>,
    templates: &[ProbeTemplate],
    word: TokenId,
) -> Result<Vec<f64>> {
    if templates.is_empty() {
        return Err(Error::EmptySet("probe templates".into()));
    }
    let mut pooled = vec![0.0; params.config.d_model];
    let mut n = 0usize;
    for t in templates {
        let ids = t.wrap(word);
        let out = forward(params, &ids)?;
        for r in t.before.len()..ids.len() {
            for (p, x) in pooled.iter_mut().zip(out.final_hidden.row(r)) {
                *p += x.as_f64();
            }
            n += 1;
        }
    }
    Ok(pooled.into_iter().map(|x| x / n as f64).collect())
}

/// Spearman correlation between probe-representation cosines and the
/// ground-truth similarity of every benchmark pair.
pub fn semantic_alignment<F: Scalar>(
    params: &ModelParams<F>,
    benchmark: &GroundTruthSimilarity,
    templates: &[ProbeTemplate],
) -> Result<f64> {
    if benchmark.is_empty() {
        return Err(Error::EmptySet("similarity benchmark".into()));
    }
    let tokens = benchmark.tokens();
    let reps: Vec<(TokenId, Vec<f64>)> = tokens
        .par_iter()
        .map(|&t| {
            let v = pooled_representation(params, templates, t)?;
            let u = normalize(&v).map_err(|_| Error::Normalization(format!("token {t} probe")))?;
            Ok((t, u))
        })
        .collect::<Result<_>>()?;
    let lookup = |t: TokenId| {
        &reps[reps
            .binary_search_by_key(&t, |(k, _)| *k)
            .expect("benchmark token")]
        .1
    };
    let mut model = Vec::with_capacity(benchmark.len());
    let mut truth = Vec::with_capacity(benchmark.len());
    for &(a, b, s) in benchmark.pairs() {
        model.push(cosine(lookup(a), lookup(b))?);
        truth.push(s);
    }
    spearman(&model, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn uniform_model_scores_ln_v() {
        let mut p = init_params::<f64>(ModelConfig::tiny(10), 0).unwrap();
        p.output_projection.fill(0.0);
        let corpus = vec![
            Sequence::new(vec![0, 3, 4, 5], vec![2]),
            Sequence::new(vec![0, 1], vec![1]),
        ];
        let (r, s) = score_corpus(&p, &corpus).unwrap();
        assert_eq!(s.records, 4);
        assert_eq!(r.len(), 4);
        for x in &r {
            assert!((x.nll - 10f64.ln()).abs() < 1e-12);
            // all logits tie, so the predicted token is id 0
            assert!(!x.correct);
        }
        assert!(r[1].is_content && !r[0].is_content && r[3].is_content);
        assert_eq!((r[3].sequence_id, r[3].position), (1, 1));
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn truncation_counted() {
        let p = init_params::<f64>(ModelConfig::tiny(10), 0).unwrap();
        let corpus = vec![Sequence::new(vec![1; 20], vec![])];
        let (r, s) = score_corpus(&p, &corpus).unwrap();
        assert_eq!(s.truncated, 1);
        assert_eq!(r.len(), 11);
    }
}
