//! Plot-ready long-format report: one row per (model, λ, mode, proportion,
//! metric, domain), read only from artifacts the manifest lists.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use conceptlm::eval::{DomainTag, EvalReport, MetricCI};
use conceptlm::model::write_atomic;
use conceptlm::{Error, Result};

use crate::manifest::{RunManifest, RunStatus};
use crate::pipeline::{read_stored_eval, Workspace};

pub const REPORT_HEADER: &str =
    "model,profile,model_size,lambda,mode,proportion,domain,metric,value,ci_lower,ci_upper,reference,baseline";

/// Metrics taken straight from an evaluation.
pub const POINT_METRICS: [&str; 7] = [
    "content_ppl",
    "global_ppl",
    "content_acc",
    "global_acc",
    "clustering_score",
    "centroid_similarity",
    "spearman_alignment",
];

/// Paired differences against the reference, with intervals.
pub const DIFF_METRICS: [&str; 2] = ["content_nll_diff", "content_acc_diff"];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub profile: String,
    pub model_size: String,
    /// Empty for the pretrained base.
    pub lambda: Option<f64>,
    pub mode: String,
    pub proportion: String,
    pub domain: DomainTag,
    pub metric: String,
    pub value: f64,
    pub ci: Option<(f64, f64)>,
    pub reference: String,
    pub baseline: bool,
}

impl ReportRow {
    fn csv(&self) -> String {
        let lambda = self.lambda.map(|l| format!("{l:.2}")).unwrap_or_default();
        let (lo, hi) = match self.ci {
            Some((a, b)) => (format!("{a:.9}"), format!("{b:.9}")),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{},{},{:.9},{},{},{},{}",
            self.model,
            self.profile,
            self.model_size,
            lambda,
            self.mode,
            self.proportion,
            self.domain,
            self.metric,
            self.value,
            lo,
            hi,
            self.reference,
            self.baseline
        )
    }
}

fn point_value(r: &EvalReport, metric: &str) -> f64 {
    match metric {
        "content_ppl" => r.content_ppl,
        "global_ppl" => r.global_ppl,
        "content_acc" => r.content_acc,
        "global_acc" => r.global_acc,
        "clustering_score" => r.clustering_score,
        "centroid_similarity" => r.centroid_similarity,
        "spearman_alignment" => r.spearman_alignment,
        _ => unreachable!("unknown metric {metric}"),
    }
}

fn diff_ci<'a>(r: &'a EvalReport, metric: &str) -> Option<&'a MetricCI> {
    r.ci(metric.trim_end_matches("_diff"))
}

struct ModelRef<'a> {
    model: String,
    profile: String,
    size: String,
    lambda: Option<f64>,
    mode: String,
    proportion: String,
    baseline: bool,
    artifacts: &'a std::collections::BTreeMap<String, PathBuf>,
}

fn rows_for(
    root: &Path,
    m: &ModelRef<'_>,
    domains: &[DomainTag],
    out: &mut Vec<ReportRow>,
) -> Result<()> {
    for &domain in domains {
        let key = format!("eval-{domain}");
        let rel = m
            .artifacts
            .get(&key)
            .ok_or_else(|| Error::MissingArtifact(PathBuf::from(format!("{}: {key}", m.model))))?;
        let stored = read_stored_eval(&root.join(rel))?;
        let reference = stored.reference.clone().unwrap_or_default();
        let row = |metric: &str, value: f64, ci: Option<(f64, f64)>, reference: String| ReportRow {
            model: m.model.clone(),
            profile: m.profile.clone(),
            model_size: m.size.clone(),
            lambda: m.lambda,
            mode: m.mode.clone(),
            proportion: m.proportion.clone(),
            domain,
            metric: metric.to_string(),
            value,
            ci,
            reference,
            baseline: m.baseline,
        };
        for metric in POINT_METRICS {
            out.push(row(
                metric,
                point_value(&stored.report, metric),
                None,
                String::new(),
            ));
        }
        for metric in DIFF_METRICS {
            if let Some(c) = diff_ci(&stored.report, metric) {
                out.push(row(
                    metric,
                    c.ci.estimate,
                    Some((c.ci.lower, c.ci.upper)),
                    reference.clone(),
                ));
            }
        }
    }
    Ok(())
}

/// Rows for every evaluated base model and finished run in the manifest.
/// Runs without evaluation artifacts are left out and returned by id.
pub fn collect_rows(
    root: &Path,
    manifest: &RunManifest,
    domains: &[DomainTag],
) -> Result<(Vec<ReportRow>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (key, artifacts) in &manifest.bases {
        let (profile, size) = key.split_once('-').unwrap_or((key.as_str(), ""));
        let m = ModelRef {
            model: format!("base-{key}"),
            profile: profile.to_string(),
            size: size.to_string(),
            lambda: None,
            mode: "pretrained".into(),
            proportion: String::new(),
            baseline: true,
            artifacts,
        };
        rows_for(root, &m, domains, &mut rows)?;
    }
    let mut runs: Vec<_> = manifest
        .runs
        .iter()
        .filter(|r| r.status == RunStatus::Done)
        .collect();
    runs.sort_by(|a, b| {
        let ka = (
            a.point.profile,
            &a.point.model_size,
            a.point.mode,
            a.point.proportion.as_str(),
        );
        let kb = (
            b.point.profile,
            &b.point.model_size,
            b.point.mode,
            b.point.proportion.as_str(),
        );
        ka.cmp(&kb).then(a.point.lambda.total_cmp(&b.point.lambda))
    });
    for r in runs {
        if domains
            .iter()
            .any(|d| !r.artifacts.contains_key(&format!("eval-{d}")))
        {
            missing.push(r.id.clone());
            continue;
        }
        let m = ModelRef {
            model: r.id.clone(),
            profile: r.point.profile.as_str().to_string(),
            size: r.point.model_size.clone(),
            lambda: Some(r.point.lambda),
            mode: r.point.mode.to_string(),
            proportion: r.point.proportion.as_str().to_string(),
            baseline: r.point.lambda == 0.0,
            artifacts: &r.artifacts,
        };
        rows_for(root, &m, domains, &mut rows)?;
    }
    Ok((rows, missing))
}

pub fn render(rows: &[ReportRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub path: PathBuf,
    pub rows: usize,
    /// Finished runs that have not been evaluated yet.
    pub unevaluated: Vec<String>,
}

pub fn write_report(ws: &Workspace) -> Result<ReportSummary> {
    let manifest = ws.manifest().load()?;
    let (rows, unevaluated) = collect_rows(&ws.root, &manifest, &ws.domains_evaluated())?;
    let path = ws.report_path();
    write_atomic(&path, render(&rows).as_bytes())?;
    Ok(ReportSummary {
        path,
        rows: rows.len(),
        unevaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_format() {
        let r = ReportRow {
            model: "A-desk-concepts-all-l0.50".into(),
            profile: "A".into(),
            model_size: "desk".into(),
            lambda: Some(0.5),
            mode: "concepts".into(),
            proportion: "all".into(),
            domain: DomainTag::Ood,
            metric: "content_nll_diff".into(),
            value: -0.25,
            ci: Some((-0.5, -0.125)),
            reference: "base".into(),
            baseline: false,
        };
        assert_eq!(
            r.csv(),
            "A-desk-concepts-all-l0.50,A,desk,0.50,concepts,all,ood,content_nll_diff,-0.250000000,-0.500000000,-0.125000000,base,false"
        );
        let text = render(&[r]);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next(), Some(REPORT_HEADER));
        assert_eq!(
            REPORT_HEADER.split(',').count(),
            text.lines().nth(1).unwrap().split(',').count()
        );
    }
}
