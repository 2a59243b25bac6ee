//! Small end-to-end cases with values frozen from an independent oracle
//! (plain softmax, pair and resample enumeration done outside this crate).

use conceptlm::conceptset::{
    build_dataset, extract_candidates, filter_synonyms, randomize_synonyms, subsample_supervision,
    AnnotatedSequence, ConceptAnnotation, FilterProvider, SupervisionProportion,
};
use conceptlm::corpus::{
    build_vocabulary, generate_corpus_with, ground_truth_similarity, CorpusConfig, Profile,
    Sequence, VocabConfig, FRAMES,
};
use conceptlm::eval::{
    clustering_score, content_word_ppl, exact_paired_bootstrap, score_corpus, spearman,
    PairedMetric, PerTokenRecord,
};
use conceptlm::model::{init_params, ModelConfig};
use conceptlm::objective::{combined_loss, concept_loss, ntp_loss, ObjectiveConfig};
use conceptlm::tensor::Tensor;
use conceptlm::trainer::{train, TrainConfig};

const TOL: f64 = 1e-12;

fn rec(nll: f64) -> PerTokenRecord {
    PerTokenRecord {
        sequence_id: 0,
        position: 1,
        is_content: true,
        nll,
        correct: false,
    }
}

#[test]
fn concept_loss_on_four_logits() {
    // mass is about 0.73, so the gate is lifted to read the raw value
    let t = concept_loss(&[2.0f64, 1.0, 0.0, -1.0], &[2], 0, 1.0).unwrap();
    assert!(!t.gated);
    assert!((-t.log_mass - 0.3132616875182228).abs() < TOL);
    assert!((t.loss - 0.3132616875182228).abs() < TOL);
}

#[test]
fn ntp_mean_over_two_positions() {
    let logits = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 0.5, -1.0, 2.0]);
    let l = ntp_loss(&logits, &[2, 0]).unwrap();
    assert!((l - 1.0744586305507686).abs() < TOL);
}

#[test]
fn gate_at_mass_point_seven() {
    // mass of {0} is 0.7 when its logit is ln(0.7/0.3) above a lone rival
    let row = [(0.7f64 / 0.3).ln(), 0.0];
    let t = concept_loss(&row, &[], 0, 0.6).unwrap();
    assert!((t.mass - 0.7).abs() < TOL);
    assert!(t.gated);
    assert_eq!(t.loss, 0.0);
}

#[test]
fn lambda_zero_combined_is_ntp() {
    let ntp = [0.3f64, 1.25, 2.0];
    let concept = [Some(concept_loss(&[0.0f64, 1.0], &[], 0, 0.6).unwrap())];
    let b = combined_loss(&ntp, &concept, &ObjectiveConfig::with_weight(0.0));
    assert_eq!(b.combined, b.ntp_loss);
}

#[test]
fn perplexity_of_ln2_and_ln8() {
    let r = [rec(2f64.ln()), rec(8f64.ln())];
    assert!((content_word_ppl(&r).unwrap() - 4.0).abs() < TOL);
}

#[test]
fn clustering_of_three_planar_groups() {
    let g = vec![
        vec![vec![1.0, 0.0], vec![0.9, 0.2], vec![1.1, -0.1]],
        vec![vec![0.0, 1.0], vec![0.2, 0.8]],
        vec![vec![-1.0, -1.0], vec![-0.8, -1.2], vec![-1.1, -0.7]],
    ];
    let s = clustering_score(&g).unwrap();
    assert!((s.score - 1.4499784096432622).abs() < TOL);
    assert!((s.centroid_similarity - -0.45588630958828413).abs() < TOL);
}

#[test]
fn spearman_with_tied_ground_truth() {
    let truth = [1.0, 0.5, 0.5, 0.0, 0.8];
    let model = [0.9, 0.3, 0.6, 0.1, 0.2];
    assert!((spearman(&truth, &model).unwrap() - 0.6668859288553503).abs() < TOL);
}

#[test]
fn bootstrap_of_three_pairs() {
    let a: Vec<_> = [0.2, 1.7, 0.9].iter().map(|&v| rec(v)).collect();
    let b: Vec<_> = [0.5, 1.1, 1.6].iter().map(|&v| rec(v)).collect();
    let (mut a, mut b) = (a, b);
    for (i, (x, y)) in a.iter_mut().zip(b.iter_mut()).enumerate() {
        x.sequence_id = i;
        y.sequence_id = i;
    }
    let ci = exact_paired_bootstrap(&a, &b, PairedMetric::Nll, 0.95).unwrap();
    assert!((ci.lower - -0.6).abs() < TOL && (ci.upper - 0.7).abs() < TOL);
    assert!((ci.estimate - 0.1333333333333334).abs() < TOL);
    let ci = exact_paired_bootstrap(&a, &b, PairedMetric::Nll, 0.5).unwrap();
    assert!(
        (ci.lower - -0.16666666666666655).abs() < TOL
            && (ci.upper - 0.43333333333333335).abs() < TOL
    );
}

#[test]
fn similarity_pairs_enumerated() {
    let v = build_vocabulary(&VocabConfig::default()).unwrap();
    let sim = ground_truth_similarity(&v);
    let content = v.content_tokens();
    let n = content.len();
    assert_eq!(sim.len(), n * (n - 1) / 2);
    for (i, &a) in content.iter().enumerate() {
        for &b in &content[i + 1..] {
            assert_eq!(sim.score(a, b), sim.score(b, a));
            assert!(sim.score(a, b).is_some());
        }
    }
}

#[test]
fn profiles_differ_in_frame_usage() {
    let v = build_vocabulary(&VocabConfig::default()).unwrap();
    let counts = |p| {
        let c = generate_corpus_with(&v, &CorpusConfig::default(), 1500, p, 0.28, 5).unwrap();
        let mut n = vec![0f64; FRAMES.len()];
        for f in c.frames.iter().flatten() {
            n[*f] += 1.0;
        }
        n
    };
    let (a, b) = (counts(Profile::A), counts(Profile::B));
    // chi-square test of homogeneity on the 2 x frames table
    let (ta, tb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    let mut chi = 0.0;
    for (x, y) in a.iter().zip(&b) {
        let col = x + y;
        if col == 0.0 {
            continue;
        }
        let (ea, eb) = (col * ta / (ta + tb), col * tb / (ta + tb));
        chi += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
    }
    // 0.999 quantile of chi-square with 9 degrees of freedom
    assert!(chi > 27.88, "chi-square {chi}");
}

#[test]
fn candidates_capped_by_vocabulary() {
    let v = build_vocabulary(&VocabConfig {
        n_domains: 2,
        concepts_per_domain: 2,
        tokens_per_concept: 3,
        n_function: 5,
        seed: 0,
    })
    .unwrap();
    assert!(v.len() < 200);
    let p = init_params::<f64>(ModelConfig::desk(v.len()), 1).unwrap();
    let c = generate_corpus_with(&v, &CorpusConfig::default(), 3, Profile::A, 0.28, 1).unwrap();
    let s = &c.sequences[0];
    let cands = extract_candidates(&p, s, s.content_positions[0], 200).unwrap();
    assert_eq!(cands.len(), v.len());
}

#[test]
fn oracle_keeps_ten_best_ranked_of_twelve() {
    let v = build_vocabulary(&VocabConfig {
        n_domains: 1,
        concepts_per_domain: 2,
        tokens_per_concept: 13,
        n_function: 5,
        seed: 0,
    })
    .unwrap();
    let members = v.concept_members(0).to_vec();
    let original = members[0];
    let other = v.concept_members(1)[0];
    // interleave a foreign token; the 12 synonyms arrive in a known rank order
    let mut ranked = vec![other];
    ranked.extend(members[1..].iter().rev());
    let seq = Sequence::from_tokens(vec![v.bos(), original], &v);
    let out = filter_synonyms(&ranked, &seq, 1, &FilterProvider::Oracle, &v, 10).unwrap();
    let want: Vec<usize> = members[1..].iter().rev().take(10).copied().collect();
    assert_eq!(out.synonyms, want);
    assert_eq!(out.truncated, 2);
}

fn small_dataset() -> (conceptlm::corpus::Vocabulary, Vec<AnnotatedSequence>) {
    let v = build_vocabulary(&VocabConfig::default()).unwrap();
    let c = generate_corpus_with(&v, &CorpusConfig::default(), 60, Profile::A, 0.28, 2).unwrap();
    let p = init_params::<f64>(ModelConfig::desk(v.len()), 2).unwrap();
    let (d, _) = build_dataset(&p, &c.sequences, &FilterProvider::Oracle, &v, 200, 10).unwrap();
    (v, d)
}

#[test]
fn oracle_synonyms_share_the_concept() {
    let (v, d) = small_dataset();
    let mut n = 0;
    for it in &d {
        for a in &it.annotations {
            for &s in &a.synonyms {
                assert_eq!(v.concept_of(s), v.concept_of(a.original));
                n += 1;
            }
        }
    }
    assert!(n > 0);
}

#[test]
fn noise_keeps_cardinality_histogram() {
    let (_, d) = small_dataset();
    let r = randomize_synonyms(&d, 9).unwrap();
    let hist = |x: &[AnnotatedSequence]| {
        let mut h = std::collections::BTreeMap::new();
        for a in x.iter().flat_map(|i| &i.annotations) {
            *h.entry(a.synonyms.len()).or_insert(0) += 1;
        }
        h
    };
    assert_eq!(hist(&d), hist(&r));
    for (x, y) in d.iter().zip(&r) {
        let pos = |i: &AnnotatedSequence| {
            i.annotations
                .iter()
                .map(|a| (a.position, a.synonyms.len()))
                .collect::<Vec<_>>()
        };
        assert_eq!(pos(x), pos(y));
    }
}

#[test]
fn quarter_of_hundred_annotations() {
    let seq = Sequence::new((0..101).map(|i| i % 7).collect(), (1..101).collect());
    let item = AnnotatedSequence {
        annotations: (1..101)
            .map(|p| ConceptAnnotation::new(p, seq.token_ids[p], vec![100]))
            .collect(),
        sequence: seq,
    };
    let (out, rep) = subsample_supervision(&[item], SupervisionProportion::Quarter, 4);
    assert_eq!(rep.annotations_out, 25);
    assert_eq!(out[0].annotations.len(), 25);
}

#[test]
fn last_only_keeps_final_position() {
    let (_, d) = small_dataset();
    let (out, _) = subsample_supervision(&d, SupervisionProportion::LastOnly, 0);
    assert!(!out.is_empty());
    for it in &out {
        assert_eq!(it.annotations.len(), 1);
        assert_eq!(it.annotations[0].position, it.sequence.token_ids.len() - 1);
    }
}

#[test]
fn record_content_share_matches_corpus() {
    let v = build_vocabulary(&VocabConfig::default()).unwrap();
    let c = generate_corpus_with(&v, &CorpusConfig::default(), 20, Profile::B, 0.28, 8).unwrap();
    let p = init_params::<f32>(ModelConfig::desk(v.len()), 3).unwrap();
    let (recs, _) = score_corpus(&p, &c.sequences).unwrap();
    let flagged = recs.iter().filter(|r| r.is_content).count();
    let content: usize = c.sequences.iter().map(|s| s.content_positions.len()).sum();
    let positions: usize = c.sequences.iter().map(|s| s.token_ids.len() - 1).sum();
    assert_eq!(flagged, content);
    assert_eq!(recs.len(), positions);
}

#[test]
fn validation_ntp_decreases_for_three_epochs() {
    let v = build_vocabulary(&VocabConfig::default()).unwrap();
    let c = generate_corpus_with(&v, &CorpusConfig::default(), 200, Profile::A, 0.28, 12).unwrap();
    let data: Vec<AnnotatedSequence> = c
        .sequences
        .into_iter()
        .map(AnnotatedSequence::unannotated)
        .collect();
    let cfg = TrainConfig {
        max_epochs: 3,
        early_stop_patience: 0,
        objective: ObjectiveConfig::with_weight(0.0),
        ..TrainConfig::default()
    };
    let p = init_params::<f32>(ModelConfig::desk(v.len()), 12).unwrap();
    let (_, log) = train(p, &data, &cfg).unwrap();
    let curve = log.val_ntp_curve();
    assert!(curve.len() >= 4, "{curve:?}");
    assert!(curve[..4].windows(2).all(|w| w[1] < w[0]), "{curve:?}");
}
