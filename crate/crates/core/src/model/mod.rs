//! Small decoder-only transformer with exact reverse-mode gradients.

mod checkpoint;
mod config;
mod forward;
mod params;

pub use checkpoint::{
    decode_tensors, encode_tensors, load_params, params_from_file, read_tensor_file, save_params,
    write_atomic, TensorFile, FORMAT_VERSION, MAGIC,
};
pub use config::ModelConfig;
pub use forward::{backward, forward, forward_cached, ForwardCache, ForwardOutput, LAYER_NORM_EPS};
pub use params::{init_params, LayerParams, ModelParams, INIT_STD};

use crate::conceptset::AnnotatedSequence;
use crate::error::{Error, Result};
use crate::objective::{
    add_ntp_row_grad, batch_objective, token_nll, LossBreakdown, ObjectiveConfig,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Combined objective over `batch` and its gradient w.r.t. every parameter.
pub fn loss_and_grad<F: Scalar>(
    params: &ModelParams<F>,
    batch: &[AnnotatedSequence],
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, ModelParams<F>)> {
    let mut logits = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    for item in batch {
        let (out, cache) = forward_cached(params, &item.sequence.token_ids)?;
        logits.push(out.logits);
        caches.push(cache);
    }
    let (breakdown, dlogits) = batch_objective(&logits, batch, cfg, true)?;
    let mut grads = params.zeros_like();
    for (cache, d) in caches.iter().zip(dlogits.expect("gradient requested")) {
        backward(params, cache, &d, &mut grads);
    }
    Ok((breakdown, grads))
}

/// Combined objective without gradients.
pub fn batch_loss<F: Scalar>(
    params: &ModelParams<F>,
    batch: &[AnnotatedSequence],
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let logits = batch
        .iter()
        .map(|item| forward(params, &item.sequence.token_ids).map(|o| o.logits))
        .collect::<Result<Vec<_>>>()?;
    Ok(batch_objective(&logits, batch, cfg, false)?.0)
}

/// Plain next-token loss and gradient, ignoring annotations entirely.
pub fn ntp_loss_and_grad<F: Scalar>(
    params: &ModelParams<F>,
    sequences: &[&[usize]],
) -> Result<(f64, ModelParams<F>)> {
    let n: usize = sequences.iter().map(|s| s.len().saturating_sub(1)).sum();
    let mut outs = Vec::with_capacity(sequences.len());
    let mut total = F::zero();
    for (b, ids) in sequences.iter().enumerate() {
        let (out, cache) = forward_cached(params, ids)?;
        for r in 0..ids.len() - 1 {
            let nll = token_nll(out.logits.row(r), ids[r + 1]);
            if !nll.is_finite() {
                return Err(Error::Numerical(format!(
                    "sequence {b}: non-finite NLL at position {r}"
                )));
            }
            total += nll;
        }
        outs.push((out, cache));
    }
    let mut grads = params.zeros_like();
    if n == 0 {
        return Ok((0.0, grads));
    }
    let w = F::one() / F::from_usize_lossy(n);
    for (ids, (out, cache)) in sequences.iter().zip(&outs) {
        let mut d = Tensor::zeros(out.logits.shape());
        for r in 0..ids.len() - 1 {
            add_ntp_row_grad(out.logits.row(r), ids[r + 1], w, d.row_mut(r));
        }
        backward(params, cache, &d, &mut grads);
    }
    Ok(((total / F::from_usize_lossy(n)).as_f64(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conceptset::ConceptAnnotation;
    use crate::corpus::Sequence;

    fn item(ids: Vec<usize>, ann: Vec<ConceptAnnotation>) -> AnnotatedSequence {
        let positions = ann.iter().map(|a| a.position).collect();
        AnnotatedSequence {
            sequence: Sequence::new(ids, positions),
            annotations: ann,
        }
    }

    #[test]
    fn lambda_zero_matches_pure_ntp() {
        let p = init_params::<f64>(ModelConfig::tiny(10), 3).unwrap();
        let batch = vec![
            item(
                vec![0, 4, 5, 6],
                vec![ConceptAnnotation::new(2, 5, vec![7, 8])],
            ),
            item(vec![0, 1, 2], vec![]),
        ];
        let (b, g) = loss_and_grad(&p, &batch, &ObjectiveConfig::with_weight(0.0)).unwrap();
        let seqs: Vec<&[usize]> = batch
            .iter()
            .map(|i| i.sequence.token_ids.as_slice())
            .collect();
        let (l, h) = ntp_loss_and_grad(&p, &seqs).unwrap();
        assert_eq!(b.combined.to_bits(), l.to_bits());
        assert_eq!(g, h);
    }

    #[test]
    fn no_annotations_at_lambda_one_is_zero() {
        let p = init_params::<f64>(ModelConfig::tiny(10), 3).unwrap();
        let batch = vec![item(vec![0, 4, 5, 6], vec![])];
        let (b, g) = loss_and_grad(&p, &batch, &ObjectiveConfig::with_weight(1.0)).unwrap();
        assert_eq!(b.concept_loss, 0.0);
        assert_eq!(b.combined, 0.0);
        assert!(g.flatten().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut p = init_params::<f64>(ModelConfig::tiny(10), 9).unwrap();
        // larger weights so every tensor gets a well-conditioned gradient
        for (_, t) in p.tensors_mut() {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x += 0.3 * ((i as f64) * 0.7).sin();
            }
        }
        let batch = vec![
            item(
                vec![0, 4, 5, 6, 2],
                vec![ConceptAnnotation::new(2, 5, vec![7, 8])],
            ),
            item(vec![0, 1, 3], vec![ConceptAnnotation::new(1, 1, vec![9])]),
        ];
        let cfg = ObjectiveConfig::with_weight(0.5);
        let (_, g) = loss_and_grad(&p, &batch, &cfg).unwrap();
        let eps = 1e-5;
        let flat = g.flatten();
        let mut idx = 0;
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let len = p
                .tensors()
                .into_iter()
                .find(|(n, _)| *n == name)
                .unwrap()
                .1
                .len();
            let mut num = Vec::with_capacity(len);
            for j in 0..len {
                let mut q = p.clone();
                let bump = |q: &mut ModelParams<f64>, d: f64| {
                    for (n, t) in q.tensors_mut() {
                        if n == name {
                            t.data_mut()[j] += d;
                        }
                    }
                };
                bump(&mut q, eps);
                let up = batch_loss(&q, &batch, &cfg).unwrap().combined;
                bump(&mut q, -2.0 * eps);
                let down = batch_loss(&q, &batch, &cfg).unwrap().combined;
                num.push((up - down) / (2.0 * eps));
            }
            let ana = &flat[idx..idx + len];
            idx += len;
            let diff: f64 = ana
                .iter()
                .zip(&num)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            assert!(diff / scale < 1e-6, "{name}: rel err {}", diff / scale);
        }
    }
}
