//! Causal pre-norm decoder: forward pass with an activation cache and the
//! matching hand-derived reverse pass.
//!
//! Block: `x += Attn(LN(x))`, `x += W2·gelu(W1·LN(x) + b1) + b2`; then a final
//! LayerNorm whose output is the reported hidden state and feeds the untied
//! output projection.

use super::params::ModelParams;
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gemm_view, matmul, matmul_a_bt, matmul_at_b_acc, Tensor, View};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<F> {
    /// `[positions × vocab]`
    pub logits: Tensor<F>,
    /// `[positions × d_model]`, after the final norm.
    pub final_hidden: Tensor<F>,
}

struct NormCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

struct LayerCache<F> {
    ln1: NormCache<F>,
    h1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `[heads × T × T]`, zero above the diagonal.
    probs: Vec<F>,
    att: Vec<F>,
    ln2: NormCache<F>,
    h2: Vec<F>,
    pre: Vec<F>,
    act: Vec<F>,
}

/// Activations retained by [`forward_cached`] for [`backward`].
pub struct ForwardCache<F> {
    tokens: Vec<TokenId>,
    layers: Vec<LayerCache<F>>,
    final_norm: NormCache<F>,
    final_hidden: Vec<F>,
}

fn layer_norm<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    t: usize,
    d: usize,
) -> (Vec<F>, NormCache<F>) {
    let eps = F::lit(LAYER_NORM_EPS);
    let inv_d = F::one() / F::from_usize_lossy(d);
    let mut out = vec![F::zero(); t * d];
    let mut xhat = vec![F::zero(); t * d];
    let mut rstd = vec![F::zero(); t];
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[i * d + j] = xh;
            out[i * d + j] = xh * gain[j] + bias[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

/// Accumulates parameter grads and adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<F: Scalar>(
    dout: &[F],
    cache: &NormCache<F>,
    gain: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
    dx: &mut [F],
    t: usize,
    d: usize,
) {
    let inv_d = F::one() / F::from_usize_lossy(d);
    let mut dxhat = vec![F::zero(); d];
    for i in 0..t {
        let go = &dout[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean1 = F::zero();
        let mut mean2 = F::zero();
        for j in 0..d {
            dgain[j] += go[j] * xh[j];
            dbias[j] += go[j];
            dxhat[j] = go[j] * gain[j];
            mean1 += dxhat[j];
            mean2 += dxhat[j] * xh[j];
        }
        mean1 *= inv_d;
        mean2 *= inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] += r * (dxhat[j] - mean1 - xh[j] * mean2);
        }
    }
}

fn gelu_consts<F: Scalar>() -> (F, F) {
    (
        F::lit((2.0 / std::f64::consts::PI).sqrt()),
        F::lit(0.044715),
    )
}

/// tanh-approximated GELU.
fn gelu<F: Scalar>(u: F) -> F {
    let (c, a) = gelu_consts::<F>();
    let half = F::lit(0.5);
    half * u * (F::one() + (c * (u + a * u * u * u)).tanh())
}

fn gelu_grad<F: Scalar>(u: F) -> F {
    let (c, a) = gelu_consts::<F>();
    let half = F::lit(0.5);
    let th = (c * (u + a * u * u * u)).tanh();
    half * (F::one() + th)
        + half * u * (F::one() - th * th) * c * (F::one() + F::lit(3.0) * a * u * u)
}

fn check_input<F: Scalar>(params: &ModelParams<F>, tokens: &[TokenId]) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::Shape("empty input sequence".into()));
    }
    if tokens.len() > cfg.max_context {
        return Err(Error::Context {
            len: tokens.len(),
            max: cfg.max_context,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Vocabulary(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Forward pass that keeps every activation needed by [`backward`].
pub fn forward_cached<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[TokenId],
) -> Result<(ForwardOutput<F>, ForwardCache<F>)> {
    check_input(params, tokens)?;
    let cfg = &params.config;
    let (t, d, v) = (tokens.len(), cfg.d_model, cfg.vocab_size);
    let (n_heads, dh, f) = (cfg.n_heads, cfg.head_dim(), cfg.d_ff());
    let scale = F::one() / F::from_usize_lossy(dh).sqrt();

    let mut x = vec![F::zero(); t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let e = params.token_embedding.row(tok);
        let p = params.position_embedding.row(i);
        for j in 0..d {
            x[i * d + j] = e[j] + p[j];
        }
    }

    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (h1, ln1) = layer_norm(&x, lp.attn_norm_gain.data(), lp.attn_norm_bias.data(), t, d);
        let mut q = vec![F::zero(); t * d];
        let mut k = vec![F::zero(); t * d];
        let mut val = vec![F::zero(); t * d];
        matmul(&h1, lp.wq.data(), &mut q, t, d, d, false);
        matmul(&h1, lp.wk.data(), &mut k, t, d, d, false);
        matmul(&h1, lp.wv.data(), &mut val, t, d, d, false);

        let mut probs = vec![F::zero(); n_heads * t * t];
        let mut att = vec![F::zero(); t * d];
        for h in 0..n_heads {
            let block = &mut probs[h * t * t..(h + 1) * t * t];
            gemm_view(
                t,
                dh,
                t,
                scale,
                &q,
                View::new(h * dh, d, 1),
                &k,
                View::new(h * dh, 1, d),
                F::zero(),
                block,
                View::new(0, t, 1),
            );
            for i in 0..t {
                let row = &mut block[i * t..(i + 1) * t];
                let m = row[..=i].iter().copied().fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for x in row[..=i].iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                for x in row[..=i].iter_mut() {
                    *x /= s;
                }
                for x in row[i + 1..].iter_mut() {
                    *x = F::zero();
                }
            }
            gemm_view(
                t,
                t,
                dh,
                F::one(),
                block,
                View::new(0, t, 1),
                &val,
                View::new(h * dh, d, 1),
                F::zero(),
                &mut att,
                View::new(h * dh, d, 1),
            );
        }
        // x += att · Wo
        matmul(&att, lp.wo.data(), &mut x, t, d, d, true);

        let (h2, ln2) = layer_norm(&x, lp.mlp_norm_gain.data(), lp.mlp_norm_bias.data(), t, d);
        let mut pre = vec![F::zero(); t * f];
        for i in 0..t {
            pre[i * f..(i + 1) * f].copy_from_slice(lp.b_in.data());
        }
        matmul(&h2, lp.w_in.data(), &mut pre, t, d, f, true);
        let act: Vec<F> = pre.iter().map(|&u| gelu(u)).collect();
        for i in 0..t {
            for (xj, bj) in x[i * d..(i + 1) * d].iter_mut().zip(lp.b_out.data()) {
                *xj += *bj;
            }
        }
        matmul(&act, lp.w_out.data(), &mut x, t, f, d, true);

        layers.push(LayerCache {
            ln1,
            h1,
            q,
            k,
            v: val,
            probs,
            att,
            ln2,
            h2,
            pre,
            act,
        });
    }

    let (hidden, final_norm) = layer_norm(
        &x,
        params.final_norm_gain.data(),
        params.final_norm_bias.data(),
        t,
        d,
    );
    let mut logits = vec![F::zero(); t * v];
    matmul(
        &hidden,
        params.output_projection.data(),
        &mut logits,
        t,
        d,
        v,
        false,
    );

    let out = ForwardOutput {
        logits: Tensor::from_vec(&[t, v], logits),
        final_hidden: Tensor::from_vec(&[t, d], hidden.clone()),
    };
    let cache = ForwardCache {
        tokens: tokens.to_vec(),
        layers,
        final_norm,
        final_hidden: hidden,
    };
    Ok((out, cache))
}

/// Logits and final-layer hidden states for one sequence.
pub fn forward<F: Scalar>(params: &ModelParams<F>, tokens: &[TokenId]) -> Result<ForwardOutput<F>> {
    forward_cached(params, tokens).map(|(out, _)| out)
}

/// Reverse pass: accumulates `∂loss/∂params` into `grads` given `∂loss/∂logits`.
pub fn backward<F: Scalar>(
    params: &ModelParams<F>,
    cache: &ForwardCache<F>,
    dlogits: &Tensor<F>,
    grads: &mut ModelParams<F>,
) {
    let cfg = &params.config;
    let t = cache.tokens.len();
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let (n_heads, dh, f) = (cfg.n_heads, cfg.head_dim(), cfg.d_ff());
    let scale = F::one() / F::from_usize_lossy(dh).sqrt();
    assert_eq!(dlogits.shape(), &[t, v], "dlogits shape");

    matmul_at_b_acc(
        &cache.final_hidden,
        dlogits.data(),
        grads.output_projection.data_mut(),
        t,
        d,
        v,
    );
    let mut dhidden = vec![F::zero(); t * d];
    matmul_a_bt(
        dlogits.data(),
        params.output_projection.data(),
        &mut dhidden,
        t,
        v,
        d,
        false,
    );

    let mut dx = vec![F::zero(); t * d];
    layer_norm_backward(
        &dhidden,
        &cache.final_norm,
        params.final_norm_gain.data(),
        grads.final_norm_gain.data_mut(),
        grads.final_norm_bias.data_mut(),
        &mut dx,
        t,
        d,
    );

    for (li, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let lg = &mut grads.layers[li];

        // MLP branch: dx flows through the residual and into the branch.
        for i in 0..t {
            for (gb, g) in lg.b_out.data_mut().iter_mut().zip(&dx[i * d..(i + 1) * d]) {
                *gb += *g;
            }
        }
        matmul_at_b_acc(&lc.act, &dx, lg.w_out.data_mut(), t, f, d);
        let mut dpre = vec![F::zero(); t * f];
        matmul_a_bt(&dx, lp.w_out.data(), &mut dpre, t, d, f, false);
        for (g, &u) in dpre.iter_mut().zip(&lc.pre) {
            *g *= gelu_grad(u);
        }
        for i in 0..t {
            for (gb, g) in lg.b_in.data_mut().iter_mut().zip(&dpre[i * f..(i + 1) * f]) {
                *gb += *g;
            }
        }
        matmul_at_b_acc(&lc.h2, &dpre, lg.w_in.data_mut(), t, d, f);
        let mut dh2 = vec![F::zero(); t * d];
        matmul_a_bt(&dpre, lp.w_in.data(), &mut dh2, t, f, d, false);
        layer_norm_backward(
            &dh2,
            &lc.ln2,
            lp.mlp_norm_gain.data(),
            lg.mlp_norm_gain.data_mut(),
            lg.mlp_norm_bias.data_mut(),
            &mut dx,
            t,
            d,
        );

        // Attention branch.
        matmul_at_b_acc(&lc.att, &dx, lg.wo.data_mut(), t, d, d);
        let mut datt = vec![F::zero(); t * d];
        matmul_a_bt(&dx, lp.wo.data(), &mut datt, t, d, d, false);

        let mut dq = vec![F::zero(); t * d];
        let mut dk = vec![F::zero(); t * d];
        let mut dv = vec![F::zero(); t * d];
        let mut dscores = vec![F::zero(); t * t];
        for h in 0..n_heads {
            let probs = &lc.probs[h * t * t..(h + 1) * t * t];
            // dP = dAtt_h · V_hᵀ
            gemm_view(
                t,
                dh,
                t,
                F::one(),
                &datt,
                View::new(h * dh, d, 1),
                &lc.v,
                View::new(h * dh, 1, d),
                F::zero(),
                &mut dscores,
                View::new(0, t, 1),
            );
            // dV_h = Pᵀ · dAtt_h
            gemm_view(
                t,
                t,
                dh,
                F::one(),
                probs,
                View::new(0, 1, t),
                &datt,
                View::new(h * dh, d, 1),
                F::zero(),
                &mut dv,
                View::new(h * dh, d, 1),
            );
            // softmax backward, causal part only
            for i in 0..t {
                let p = &probs[i * t..(i + 1) * t];
                let ds = &mut dscores[i * t..(i + 1) * t];
                let mut dot = F::zero();
                for j in 0..=i {
                    dot += ds[j] * p[j];
                }
                for j in 0..=i {
                    ds[j] = p[j] * (ds[j] - dot);
                }
                for x in ds[i + 1..].iter_mut() {
                    *x = F::zero();
                }
            }
            // dQ_h = scale · dS · K_h ; dK_h = scale · dSᵀ · Q_h
            gemm_view(
                t,
                t,
                dh,
                scale,
                &dscores,
                View::new(0, t, 1),
                &lc.k,
                View::new(h * dh, d, 1),
                F::zero(),
                &mut dq,
                View::new(h * dh, d, 1),
            );
            gemm_view(
                t,
                t,
                dh,
                scale,
                &dscores,
                View::new(0, 1, t),
                &lc.q,
                View::new(h * dh, d, 1),
                F::zero(),
                &mut dk,
                View::new(h * dh, d, 1),
            );
        }
        matmul_at_b_acc(&lc.h1, &dq, lg.wq.data_mut(), t, d, d);
        matmul_at_b_acc(&lc.h1, &dk, lg.wk.data_mut(), t, d, d);
        matmul_at_b_acc(&lc.h1, &dv, lg.wv.data_mut(), t, d, d);
        let mut dh1 = vec![F::zero(); t * d];
        matmul_a_bt(&dq, lp.wq.data(), &mut dh1, t, d, d, false);
        matmul_a_bt(&dk, lp.wk.data(), &mut dh1, t, d, d, true);
        matmul_a_bt(&dv, lp.wv.data(), &mut dh1, t, d, d, true);
        layer_norm_backward(
            &dh1,
            &lc.ln1,
            lp.attn_norm_gain.data(),
            lg.attn_norm_gain.data_mut(),
            lg.attn_norm_bias.data_mut(),
            &mut dx,
            t,
            d,
        );
    }

    for (i, &tok) in cache.tokens.iter().enumerate() {
        let g = &dx[i * d..(i + 1) * d];
        for (e, gj) in grads.token_embedding.row_mut(tok).iter_mut().zip(g) {
            *e += *gj;
        }
        for (p, gj) in grads.position_embedding.row_mut(i).iter_mut().zip(g) {
            *p += *gj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::objective::softmax;

    #[test]
    fn single_token_gives_one_row() {
        let p = init_params::<f64>(ModelConfig::tiny(10), 0).unwrap();
        let out = forward(&p, &[3]).unwrap();
        assert_eq!(out.logits.shape(), &[1, 10]);
        assert_eq!(out.final_hidden.shape(), &[1, 8]);
    }

    #[test]
    fn rows_are_distributions() {
        let p = init_params::<f32>(ModelConfig::desk(50), 1).unwrap();
        let out = forward(&p, &[0, 4, 9, 2, 2, 7]).unwrap();
        for i in 0..6 {
            let s: f32 = softmax(out.logits.row(i)).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let mut p = init_params::<f64>(ModelConfig::tiny(10), 0).unwrap();
        p.output_projection.fill(0.0);
        let out = forward(&p, &[1, 2, 3]).unwrap();
        for i in 0..3 {
            for &x in softmax(out.logits.row(i)).iter() {
                assert!((x - 0.1).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn future_tokens_do_not_leak() {
        let p = init_params::<f64>(ModelConfig::tiny(10), 2).unwrap();
        let a = forward(&p, &[1, 2, 3, 4, 5, 6]).unwrap();
        let b = forward(&p, &[1, 2, 3, 9, 0, 7]).unwrap();
        for i in 0..3 {
            for (x, y) in a.logits.row(i).iter().zip(b.logits.row(i)) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_ne!(a.logits.row(3), b.logits.row(3));
    }

    #[test]
    fn input_errors() {
        let p = init_params::<f64>(ModelConfig::tiny(10), 0).unwrap();
        assert!(matches!(
            forward(&p, &[0; 13]),
            Err(Error::Context { len: 13, max: 12 })
        ));
        assert!(matches!(forward(&p, &[10]), Err(Error::Vocabulary(_))));
        assert!(forward(&p, &[]).is_err());
    }

    #[test]
    fn gelu_derivative() {
        for &u in &[-3.0f64, -0.5, 0.0, 0.3, 2.0] {
            let fd = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }
}
