//! Perplexity, accuracy, clustering geometry, similarity alignment and paired
//! bootstrap intervals.

mod bootstrap;
mod metrics;
mod probe;

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bootstrap::{
    exact_paired_bootstrap, paired_bootstrap, paired_differences, quantile_sorted, BootstrapCI,
    PairedMetric, DEFAULT_LEVEL, DEFAULT_RESAMPLES, EXACT_MAX_RECORDS,
};
pub use metrics::{
    average_ranks, clustering_score, content_accuracy, content_records, content_word_ppl, cosine,
    dot, global_accuracy, global_ppl, l2_norm, normalize, pearson, spearman, ClusteringStats,
    PerTokenRecord,
};
pub use probe::{
    argmax, clustering_metrics, hidden_at, pooled_representation, score_corpus, semantic_alignment,
    ScoreSummary,
};

use crate::conceptset::AnnotatedSequence;
use crate::corpus::{GroundTruthSimilarity, ProbeTemplate, Sequence};
use crate::error::Result;
use crate::model::{write_atomic, ModelParams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    InDomain,
    Ood,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::InDomain => "in_domain",
            DomainTag::Ood => "ood",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Named interval of a paired difference against a reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCI {
    pub metric: String,
    pub ci: BootstrapCI,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub domain: DomainTag,
    pub content_ppl: f64,
    pub global_ppl: f64,
    pub content_acc: f64,
    pub global_acc: f64,
    pub clustering_score: f64,
    pub centroid_similarity: f64,
    pub spearman_alignment: f64,
    pub cis: Vec<MetricCI>,
}

pub const EVAL_CSV_HEADER: &str = "model,domain,content_ppl,global_ppl,content_acc,global_acc,clustering_score,centroid_similarity,spearman_alignment,content_nll_diff,content_nll_lower,content_nll_upper,content_acc_diff,content_acc_lower,content_acc_upper";

fn fmt_opt(ci: Option<&MetricCI>) -> [String; 3] {
    match ci {
        Some(m) => [
            format!("{:.9}", m.ci.estimate),
            format!("{:.9}", m.ci.lower),
            format!("{:.9}", m.ci.upper),
        ],
        None => [String::new(), String::new(), String::new()],
    }
}

impl EvalReport {
    pub fn ci(&self, metric: &str) -> Option<&MetricCI> {
        self.cis.iter().find(|c| c.metric == metric)
    }

    pub fn csv_row(&self) -> String {
        let nll = fmt_opt(self.ci("content_nll"));
        let acc = fmt_opt(self.ci("content_acc"));
        format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{},{},{},{},{},{}",
            self.model,
            self.domain,
            self.content_ppl,
            self.global_ppl,
            self.content_acc,
            self.global_acc,
            self.clustering_score,
            self.centroid_similarity,
            self.spearman_alignment,
            nll[0],
            nll[1],
            nll[2],
            acc[0],
            acc[1],
            acc[2]
        )
    }
}

pub fn write_eval_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Per-token records as JSON lines.
pub fn write_records_jsonl(path: &Path, records: &[PerTokenRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n")?;
    }
    write_atomic(path, &buf)
}

/// Everything one evaluation pass reads besides the model.
pub struct EvalInputs<'a> {
    pub held_out: &'a [Sequence],
    /// Annotated held-out sequences for the clustering probe.
    pub annotated: &'a [AnnotatedSequence],
    pub benchmark: &'a GroundTruthSimilarity,
    /// Contexts wrapping each benchmark word for the alignment probe.
    pub templates: &'a [ProbeTemplate],
    pub cluster_sample: usize,
    pub seed: u64,
}

/// Scores one model on one domain. Intervals are filled in separately once a
/// reference model's records are available.
pub fn evaluate<F: Scalar>(
    params: &ModelParams<F>,
    model: &str,
    domain: DomainTag,
    inputs: &EvalInputs<'_>,
) -> Result<(EvalReport, Vec<PerTokenRecord>)> {
    let (records, _) = score_corpus(params, inputs.held_out)?;
    let clustering =
        clustering_metrics(params, inputs.annotated, inputs.cluster_sample, inputs.seed)?;
    let report = EvalReport {
        model: model.to_string(),
        domain,
        content_ppl: content_word_ppl(&records)?,
        global_ppl: global_ppl(&records)?,
        content_acc: content_accuracy(&records)?,
        global_acc: global_accuracy(&records)?,
        clustering_score: clustering.score,
        centroid_similarity: clustering.centroid_similarity,
        spearman_alignment: semantic_alignment(params, inputs.benchmark, inputs.templates)?,
        cis: Vec::new(),
    };
    Ok((report, records))
}

/// Content-word NLL and accuracy intervals of `model - reference`.
pub fn content_cis(
    reference: &[PerTokenRecord],
    model: &[PerTokenRecord],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<Vec<MetricCI>> {
    let a = content_records(reference);
    let b = content_records(model);
    Ok(vec![
        MetricCI {
            metric: "content_nll".into(),
            ci: paired_bootstrap(&a, &b, PairedMetric::Nll, resamples, level, seed)?,
        },
        MetricCI {
            metric: "content_acc".into(),
            ci: paired_bootstrap(&a, &b, PairedMetric::Acc, resamples, level, seed)?,
        },
    ])
}
