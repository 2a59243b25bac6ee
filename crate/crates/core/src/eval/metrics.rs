//! Model-free metric kernels: perplexity, accuracy, cosine geometry, rank correlation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored next-token position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerTokenRecord {
    pub sequence_id: usize,
    /// Position of the predicted token.
    pub position: usize,
    pub is_content: bool,
    pub nll: f64,
    pub correct: bool,
}

fn mean_nll<'a>(records: impl Iterator<Item = &'a PerTokenRecord>, what: &str) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in records {
        sum += r.nll;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptySet(format!("no {what} records to score")));
    }
    Ok(sum / n as f64)
}

fn accuracy<'a>(records: impl Iterator<Item = &'a PerTokenRecord>, what: &str) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for r in records {
        hit += usize::from(r.correct);
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptySet(format!("no {what} records to score")));
    }
    Ok(hit as f64 / n as f64)
}

/// `exp` of the mean NLL over content positions.
pub fn content_word_ppl(records: &[PerTokenRecord]) -> Result<f64> {
    Ok(mean_nll(records.iter().filter(|r| r.is_content), "content")?.exp())
}

/// `exp` of the mean NLL over every position.
pub fn global_ppl(records: &[PerTokenRecord]) -> Result<f64> {
    Ok(mean_nll(records.iter(), "scored")?.exp())
}

pub fn content_accuracy(records: &[PerTokenRecord]) -> Result<f64> {
    accuracy(records.iter().filter(|r| r.is_content), "content")
}

pub fn global_accuracy(records: &[PerTokenRecord]) -> Result<f64> {
    accuracy(records.iter(), "scored")
}

pub fn content_records(records: &[PerTokenRecord]) -> Vec<PerTokenRecord> {
    records.iter().filter(|r| r.is_content).cloned().collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit-length copy; zero vectors are an error.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(a);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Normalization(format!("vector norm {n}")));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(dot(&normalize(a)?, &normalize(b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringStats {
    /// `intra - inter`, in `[-2, 2]`.
    pub score: f64,
    pub intra: f64,
    pub inter: f64,
    /// Mean pairwise cosine between group centroids.
    pub centroid_similarity: f64,
    pub groups: usize,
    /// Groups with one vector, which contribute no within-group pairs.
    pub singleton_groups: usize,
}

/// Pooled pairwise-cosine geometry of vector groups.
///
/// `intra` averages over all within-group pairs, `inter` over all pairs drawn
/// from different groups; centroids are means of the raw vectors.
pub fn clustering_score(groups: &[Vec<Vec<f64>>]) -> Result<ClusteringStats> {
    let units: Vec<Vec<Vec<f64>>> = groups
        .iter()
        .map(|g| g.iter().map(|v| normalize(v)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let (mut intra_sum, mut intra_n) = (0.0, 0usize);
    let mut singleton_groups = 0;
    for g in &units {
        if g.len() < 2 {
            singleton_groups += 1;
        }
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                intra_sum += dot(&g[i], &g[j]);
                intra_n += 1;
            }
        }
    }
    let (mut inter_sum, mut inter_n) = (0.0, 0usize);
    for a in 0..units.len() {
        for b in a + 1..units.len() {
            for x in &units[a] {
                for y in &units[b] {
                    inter_sum += dot(x, y);
                    inter_n += 1;
                }
            }
        }
    }
    if intra_n == 0 {
        return Err(Error::EmptySet("no within-group vector pairs".into()));
    }
    if inter_n == 0 {
        return Err(Error::EmptySet(
            "clustering needs at least two non-empty groups".into(),
        ));
    }
    let centroids: Vec<Vec<f64>> = groups
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            let mut c = vec![0.0; g[0].len()];
            for v in g {
                for (ci, vi) in c.iter_mut().zip(v) {
                    *ci += vi;
                }
            }
            c.iter().map(|x| x / g.len() as f64).collect()
        })
        .collect();
    let (mut cen_sum, mut cen_n) = (0.0, 0usize);
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            cen_sum += cosine(&centroids[a], &centroids[b])?;
            cen_n += 1;
        }
    }
    let intra = intra_sum / intra_n as f64;
    let inter = inter_sum / inter_n as f64;
    Ok(ClusteringStats {
        score: intra - inter,
        intra,
        inter,
        centroid_similarity: cen_sum / cen_n as f64,
        groups: groups.len(),
        singleton_groups,
    })
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!(
            "correlation of {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Numerical("correlation of a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(nll: f64, content: bool, correct: bool) -> PerTokenRecord {
        PerTokenRecord {
            sequence_id: 0,
            position: 1,
            is_content: content,
            nll,
            correct,
        }
    }

    #[test]
    fn perplexity_arithmetic() {
        let one = [rec(4f64.ln(), true, false)];
        assert!((content_word_ppl(&one).unwrap() - 4.0).abs() < 1e-12);
        let two = [rec(2f64.ln(), true, true), rec(8f64.ln(), true, false)];
        assert!((content_word_ppl(&two).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(content_word_ppl(&two).unwrap(), global_ppl(&two).unwrap());
        assert_eq!(content_accuracy(&two).unwrap(), 0.5);
        let none = [rec(1.0, false, true)];
        assert!(matches!(content_word_ppl(&none), Err(Error::EmptySet(_))));
    }

    #[test]
    fn clustering_extremes() {
        let g = vec![
            vec![vec![1.0, 0.0], vec![2.0, 0.0]],
            vec![vec![0.0, 1.0], vec![0.0, 3.0]],
        ];
        let s = clustering_score(&g).unwrap();
        assert!((s.score - 1.0).abs() < 1e-15);
        assert!(s.centroid_similarity.abs() < 1e-15);
        let same = vec![vec![vec![1.0, 1.0]; 2]; 3];
        assert!(clustering_score(&same).unwrap().score.abs() < 1e-15);
        assert!(matches!(
            clustering_score(&[vec![vec![0.0, 0.0]], vec![vec![1.0, 0.0]]]),
            Err(Error::Normalization(_))
        ));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 5.0]),
            vec![2.5, 4.0, 2.5, 1.0]
        );
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[2.0, 4.0, 8.0, 16.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }
}
