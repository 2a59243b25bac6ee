//! Next-token loss, concept-set loss with the probability-mass gate, and the
//! λ-interpolated batch objective together with its gradient w.r.t. logits.
//!
//! All log-probabilities go through max-subtracted log-sum-exp so that small
//! set masses never underflow to zero.

use serde::{Deserialize, Serialize};

use crate::conceptset::AnnotatedSequence;
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_MASS_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// λ: 0 is pure next-token training, 1 is pure concept training.
    pub concept_weight: f64,
    /// Annotations whose concept mass exceeds this contribute nothing.
    pub mass_threshold: f64,
    /// Count the original token's probability inside the concept mass.
    pub include_original_in_mass: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            concept_weight: 0.5,
            mass_threshold: DEFAULT_MASS_THRESHOLD,
            include_original_in_mass: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn with_weight(concept_weight: f64) -> Self {
        Self {
            concept_weight,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.concept_weight) {
            return Err(Error::config(format!(
                "concept weight {} outside [0, 1]",
                self.concept_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.mass_threshold) {
            return Err(Error::config(format!(
                "mass threshold {} outside [0, 1]",
                self.mass_threshold
            )));
        }
        Ok(())
    }
}

/// Per-batch loss summary.
///
/// `combined = (1-λ)·ntp_loss + λ·concept_loss`, where `ntp_loss` averages over
/// every next-token position in the batch and `concept_loss` over the active
/// (non-gated, non-empty) annotations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ntp_loss: f64,
    pub concept_loss: f64,
    pub combined: f64,
    pub concept_weight: f64,
    pub mass_threshold: f64,
    pub ntp_positions: usize,
    pub gated_count: usize,
    pub active_count: usize,
    pub skipped_empty: usize,
    pub total_annotations: usize,
}

impl LossBreakdown {
    pub fn gated_fraction(&self) -> f64 {
        let supervised = self.gated_count + self.active_count;
        if supervised == 0 {
            0.0
        } else {
            self.gated_count as f64 / supervised as f64
        }
    }
}

fn check_finite<F: Scalar>(row: &[F]) -> Result<()> {
    if row.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical("non-finite logit row".into()))
    }
}

/// `max + ln Σ exp(z - max)`.
pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = row.iter().map(|&z| (z - m).exp()).sum();
    m + s.ln()
}

/// Log-sum-exp over the entries of `row` selected by `ids`.
///
/// The maximal selected term contributes exactly `exp(0) = 1`, so the result
/// is never below the largest selected logit; this keeps the concept loss
/// bounded by the NLL of any token it contains, bit for bit.
pub fn log_sum_exp_subset<F: Scalar>(row: &[F], ids: &[TokenId]) -> F {
    let m = ids.iter().map(|&i| row[i]).fold(F::neg_infinity(), F::max);
    let s: F = ids.iter().map(|&i| (row[i] - m).exp()).sum();
    m + s.ln()
}

pub fn softmax<F: Scalar>(row: &[F]) -> Vec<F> {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = row.iter().map(|&z| (z - m).exp()).collect();
    let s: F = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `-ln softmax(row)[target]`.
pub fn token_nll<F: Scalar>(row: &[F], target: TokenId) -> F {
    log_sum_exp(row) - row[target]
}

/// Mean next-token NLL: row `i` of `logits` is scored against `targets[i]`.
pub fn ntp_loss<F: Scalar>(logits: &Tensor<F>, targets: &[TokenId]) -> Result<F> {
    if logits.rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Ok(F::zero());
    }
    let mut total = F::zero();
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        check_finite(row)?;
        if t >= row.len() {
            return Err(Error::Shape(format!(
                "target {t} outside vocabulary of {}",
                row.len()
            )));
        }
        total += token_nll(row, t);
    }
    Ok(total / F::from_usize_lossy(targets.len()))
}

/// Token set whose mass the concept loss scores: `T* ∪ {T}` (or just `T*`).
pub fn concept_mass_set(
    synonyms: &[TokenId],
    original: TokenId,
    include_original: bool,
) -> Vec<TokenId> {
    let mut set: Vec<TokenId> = synonyms.to_vec();
    if include_original {
        set.push(original);
    }
    set.sort_unstable();
    set.dedup();
    set
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConceptTerm<F> {
    /// `-ln mass`, or zero when gated.
    pub loss: F,
    /// `ln mass`, kept even when gated.
    pub log_mass: F,
    pub mass: F,
    pub gated: bool,
}

/// `-ln Σ_{t ∈ set} softmax(row)[t]`, zeroed when that mass exceeds `threshold`.
pub fn concept_loss_for_set<F: Scalar>(
    row: &[F],
    set: &[TokenId],
    threshold: F,
) -> Result<ConceptTerm<F>> {
    check_finite(row)?;
    if set.is_empty() {
        return Err(Error::EmptySet("concept mass set".into()));
    }
    if let Some(&bad) = set.iter().find(|&&t| t >= row.len()) {
        return Err(Error::Vocabulary(format!(
            "synonym id {bad} outside vocabulary"
        )));
    }
    let log_mass = log_sum_exp_subset(row, set) - log_sum_exp(row);
    let mass = log_mass.exp();
    let gated = mass > threshold;
    Ok(ConceptTerm {
        loss: if gated { F::zero() } else { -log_mass },
        log_mass,
        mass,
        gated,
    })
}

/// Concept loss with the original token always counted in the mass.
pub fn concept_loss<F: Scalar>(
    row: &[F],
    synonyms: &[TokenId],
    original: TokenId,
    threshold: F,
) -> Result<ConceptTerm<F>> {
    concept_loss_for_set(row, &concept_mass_set(synonyms, original, true), threshold)
}

/// Aggregates per-position NLLs and per-annotation concept terms (`None` for
/// skipped empty sets) into a [`LossBreakdown`].
pub fn combined_loss<F: Scalar>(
    ntp_terms: &[F],
    concept_terms: &[Option<ConceptTerm<F>>],
    cfg: &ObjectiveConfig,
) -> LossBreakdown {
    let ntp_sum: F = ntp_terms.iter().copied().sum();
    let ntp_loss = if ntp_terms.is_empty() {
        0.0
    } else {
        (ntp_sum / F::from_usize_lossy(ntp_terms.len())).as_f64()
    };
    let mut active = 0usize;
    let mut gated = 0usize;
    let mut skipped = 0usize;
    let mut concept_sum = F::zero();
    for term in concept_terms {
        match term {
            None => skipped += 1,
            Some(t) if t.gated => gated += 1,
            Some(t) => {
                active += 1;
                concept_sum += t.loss;
            }
        }
    }
    let concept_loss = if active == 0 {
        0.0
    } else {
        (concept_sum / F::from_usize_lossy(active)).as_f64()
    };
    let lambda = cfg.concept_weight;
    LossBreakdown {
        ntp_loss,
        concept_loss,
        combined: (1.0 - lambda) * ntp_loss + lambda * concept_loss,
        concept_weight: lambda,
        mass_threshold: cfg.mass_threshold,
        ntp_positions: ntp_terms.len(),
        gated_count: gated,
        active_count: active,
        skipped_empty: skipped,
        total_annotations: concept_terms.len(),
    }
}

/// Adds `weight · (softmax(row) - onehot(target))` into `out`.
pub fn add_ntp_row_grad<F: Scalar>(row: &[F], target: TokenId, weight: F, out: &mut [F]) {
    let p = softmax(row);
    for (j, (o, pj)) in out.iter_mut().zip(p).enumerate() {
        let y = if j == target { F::one() } else { F::zero() };
        *o += (pj - y) * weight;
    }
}

/// Adds `weight · ∂(-ln mass)/∂row` into `out`: `p_j - [j∈set]·p_j/mass`.
pub fn add_concept_row_grad<F: Scalar>(row: &[F], set: &[TokenId], weight: F, out: &mut [F]) {
    let lse_all = log_sum_exp(row);
    let lse_set = log_sum_exp_subset(row, set);
    for (o, &z) in out.iter_mut().zip(row) {
        *o += (z - lse_all).exp() * weight;
    }
    for &j in set {
        out[j] -= (row[j] - lse_set).exp() * weight;
    }
}

/// Batch objective over per-sequence logits (`logits[b]` has one row per
/// token of `batch[b]`). Returns the breakdown and, if requested, `∂combined/∂logits`.
///
/// The concept term at annotation position `p` scores row `p - 1`. At λ = 0
/// the concept gradient is never formed and at λ = 1 the NTP gradient is never
/// formed, so the endpoints reduce exactly to the single objectives.
pub fn batch_objective<F: Scalar>(
    logits: &[Tensor<F>],
    batch: &[AnnotatedSequence],
    cfg: &ObjectiveConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor<F>>>)> {
    cfg.validate()?;
    if logits.len() != batch.len() {
        return Err(Error::Shape(format!(
            "{} logit blocks for {} sequences",
            logits.len(),
            batch.len()
        )));
    }
    let threshold = F::lit(cfg.mass_threshold);
    let mut ntp_terms = Vec::new();
    let mut concept_terms = Vec::new();
    // (sequence, row, mass set) of every active annotation
    let mut active_sets: Vec<(usize, usize, Vec<TokenId>)> = Vec::new();

    for (b, (l, item)) in logits.iter().zip(batch).enumerate() {
        let ids = &item.sequence.token_ids;
        if l.rows() != ids.len() {
            return Err(Error::Shape(format!(
                "sequence {b}: {} logit rows for {} tokens",
                l.rows(),
                ids.len()
            )));
        }
        for r in 0..ids.len().saturating_sub(1) {
            let row = l.row(r);
            check_finite(row).map_err(|_| {
                Error::Numerical(format!("sequence {b}: non-finite logits at position {r}"))
            })?;
            ntp_terms.push(token_nll(row, ids[r + 1]));
        }
        for a in &item.annotations {
            if a.position == 0 || a.position >= ids.len() {
                return Err(Error::NotContent {
                    position: a.position,
                });
            }
            if a.synonyms.is_empty() {
                concept_terms.push(None);
                continue;
            }
            let set = concept_mass_set(&a.synonyms, a.original, cfg.include_original_in_mass);
            let term = concept_loss_for_set(l.row(a.position - 1), &set, threshold)?;
            if !term.gated {
                active_sets.push((b, a.position - 1, set));
            }
            concept_terms.push(Some(term));
        }
    }

    let breakdown = combined_loss(&ntp_terms, &concept_terms, cfg);
    if !breakdown.combined.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite combined loss (ntp {}, concept {})",
            breakdown.ntp_loss, breakdown.concept_loss
        )));
    }
    if !want_grad {
        return Ok((breakdown, None));
    }

    let mut grads: Vec<Tensor<F>> = logits.iter().map(|l| Tensor::zeros(l.shape())).collect();
    let lambda = cfg.concept_weight;
    if lambda < 1.0 && !ntp_terms.is_empty() {
        let w = F::lit(1.0 - lambda) / F::from_usize_lossy(ntp_terms.len());
        for (l, (g, item)) in logits.iter().zip(grads.iter_mut().zip(batch)) {
            let ids = &item.sequence.token_ids;
            for r in 0..ids.len().saturating_sub(1) {
                add_ntp_row_grad(l.row(r), ids[r + 1], w, g.row_mut(r));
            }
        }
    }
    if lambda > 0.0 && !active_sets.is_empty() {
        let w = F::lit(lambda) / F::from_usize_lossy(active_sets.len());
        for (b, r, set) in &active_sets {
            add_concept_row_grad(logits[*b].row(*r), set, w, grads[*b].row_mut(*r));
        }
    }
    Ok((breakdown, Some(grads)))
}
