use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || self.eps <= 0.0 {
            return Err(Error::config(
                "adam betas must lie in [0, 1) and eps be positive",
            ));
        }
        Ok(())
    }
}

/// Bias-corrected Adam with moment buffers shaped like the parameters.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub cfg: AdamConfig,
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
    pub t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ModelParams<F>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>, lr: F) {
        self.t += 1;
        let b1 = F::lit(self.cfg.beta1);
        let b2 = F::lit(self.cfg.beta2);
        let eps = F::lit(self.cfg.eps);
        let c1 = F::one() - b1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = F::one() - b2.powi(self.t.min(i32::MAX as u64) as i32);
        let one = F::one();
        let ps = params.tensors_mut();
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let p0 = init_params::<f64>(ModelConfig::tiny(6), 0).unwrap();
        let mut p = p0.clone();
        let mut g = p.zeros_like();
        g.output_projection.data_mut()[0] = 3.0;
        g.output_projection.data_mut()[1] = -0.5;
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &g, 0.1);
        let d0 = p0.output_projection.data()[0] - p.output_projection.data()[0];
        let d1 = p0.output_projection.data()[1] - p.output_projection.data()[1];
        assert!((d0 - 0.1).abs() < 1e-8);
        assert!((d1 + 0.1).abs() < 1e-7);
        assert_eq!(p.token_embedding, p0.token_embedding);
    }
}
