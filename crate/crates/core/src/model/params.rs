use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm_gain: Tensor<F>,
    pub attn_norm_bias: Tensor<F>,
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
    pub mlp_norm_gain: Tensor<F>,
    pub mlp_norm_bias: Tensor<F>,
    pub w_in: Tensor<F>,
    pub b_in: Tensor<F>,
    pub w_out: Tensor<F>,
    pub b_out: Tensor<F>,
}

/// Every trainable tensor of the decoder. Also used as the gradient and
/// optimizer-moment container, since those share its shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<F>,
    pub position_embedding: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm_gain: Tensor<F>,
    pub final_norm_bias: Tensor<F>,
    pub output_projection: Tensor<F>,
}

impl<F: Scalar> LayerParams<F> {
    fn filled(cfg: &ModelConfig, gain: F) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff());
        Self {
            attn_norm_gain: Tensor::filled(&[d], gain),
            attn_norm_bias: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            mlp_norm_gain: Tensor::filled(&[d], gain),
            mlp_norm_bias: Tensor::zeros(&[d]),
            w_in: Tensor::zeros(&[d, f]),
            b_in: Tensor::zeros(&[f]),
            w_out: Tensor::zeros(&[f, d]),
            b_out: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<F>); 12] {
        [
            ("attn_norm.gain", &self.attn_norm_gain),
            ("attn_norm.bias", &self.attn_norm_bias),
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("mlp_norm.gain", &self.mlp_norm_gain),
            ("mlp_norm.bias", &self.mlp_norm_bias),
            ("mlp.w_in", &self.w_in),
            ("mlp.b_in", &self.b_in),
            ("mlp.w_out", &self.w_out),
            ("mlp.b_out", &self.b_out),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 12] {
        [
            ("attn_norm.gain", &mut self.attn_norm_gain),
            ("attn_norm.bias", &mut self.attn_norm_bias),
            ("attn.wq", &mut self.wq),
            ("attn.wk", &mut self.wk),
            ("attn.wv", &mut self.wv),
            ("attn.wo", &mut self.wo),
            ("mlp_norm.gain", &mut self.mlp_norm_gain),
            ("mlp_norm.bias", &mut self.mlp_norm_bias),
            ("mlp.w_in", &mut self.w_in),
            ("mlp.b_in", &mut self.b_in),
            ("mlp.w_out", &mut self.w_out),
            ("mlp.b_out", &mut self.b_out),
        ]
    }
}

impl<F: Scalar> ModelParams<F> {
    fn filled(config: ModelConfig, gain: F) -> Self {
        let (v, d, c) = (config.vocab_size, config.d_model, config.max_context);
        Self {
            config,
            token_embedding: Tensor::zeros(&[v, d]),
            position_embedding: Tensor::zeros(&[c, d]),
            layers: (0..config.n_layers)
                .map(|_| LayerParams::filled(&config, gain))
                .collect(),
            final_norm_gain: Tensor::filled(&[d], gain),
            final_norm_bias: Tensor::zeros(&[d]),
            output_projection: Tensor::zeros(&[d, v]),
        }
    }

    /// All-zero tensors with the shapes implied by `config` (gradient buffer).
    pub fn zeros(config: ModelConfig) -> Self {
        Self::filled(config, F::zero())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Named tensors in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("position_embedding".into(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm.gain".into(), &self.final_norm_gain));
        out.push(("final_norm.bias".into(), &self.final_norm_bias));
        out.push(("output_projection".into(), &self.output_projection));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("position_embedding".into(), &mut self.position_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.named_mut() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm.gain".into(), &mut self.final_norm_gain));
        out.push(("final_norm.bias".into(), &mut self.final_norm_bias));
        out.push(("output_projection".into(), &mut self.output_projection));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Checks every tensor against the shapes implied by `config`.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = Self::zeros(self.config);
        for ((name, a), (_, b)) in self.tensors().iter().zip(reference.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "{name}: shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Shape(format!(
                "{} layers, config says {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: F) {
        for (_, t) in self.tensors_mut() {
            t.scale(s);
        }
    }

    /// Flat copy of every value in canonical order.
    pub fn flatten(&self) -> Vec<F> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let mut config = self.config;
        config.dtype = G::DTYPE;
        let mut out = ModelParams::<G>::zeros(config);
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }
}

/// Normal(0, 0.02) weights and embeddings, unit norm gains, zero biases.
pub fn init_params<F: Scalar>(config: ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut params = ModelParams::filled(config, F::one());
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    for (name, t) in params.tensors_mut() {
        let is_norm_or_bias =
            name.contains("norm") || name.ends_with("b_in") || name.ends_with("b_out");
        if is_norm_or_bias {
            continue;
        }
        for x in t.data_mut() {
            *x = F::lit(normal.sample(&mut rng));
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_init() {
        let c = ModelConfig::tiny(20);
        let a = init_params::<f64>(c, 3).unwrap();
        let b = init_params::<f64>(c, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params::<f64>(c, 4).unwrap());
    }

    #[test]
    fn norms_identity_biases_zero() {
        let p = init_params::<f32>(ModelConfig::desk(50), 0).unwrap();
        for (name, t) in p.tensors() {
            if name.ends_with("gain") {
                assert!(t.data().iter().all(|&x| x == 1.0), "{name}");
            }
            if name.ends_with("bias") || name.ends_with("b_in") || name.ends_with("b_out") {
                assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
        let w = p.layers[0].wq.data();
        let mean = w.iter().sum::<f32>() / w.len() as f32;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / w.len() as f32;
        assert!((var.sqrt() - 0.02).abs() < 0.003);
    }

    #[test]
    fn count_matches_closed_form() {
        for c in [ModelConfig::tiny(17), ModelConfig::desk(289)] {
            let p = init_params::<f64>(c, 0).unwrap();
            let summed: usize = p
                .tensors()
                .iter()
                .map(|(_, t)| t.shape().iter().product::<usize>())
                .sum();
            assert_eq!(summed, c.param_count());
            assert_eq!(p.num_params(), summed);
        }
    }

    #[test]
    fn names_are_unique() {
        let p = ModelParams::<f32>::zeros(ModelConfig::tiny(5));
        let mut names: Vec<_> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(n, names.len());
    }
}
