//! Forward pass: pre-norm blocks (norm -> masked attention -> add;
//! norm -> GELU feedforward -> add), a final norm, and the tied output
//! projection. Every intermediate needed for the exact backward pass is
//! cached in the returned trace.

use super::{embed, ModelError, ModelParameters, Tensor};
use crate::batching::Batch;

const NORM_EPS: f64 = 1e-5;

/// LayerNorm cache: normalized activations before gain/bias, plus the
/// reciprocal std per position.
#[derive(Debug)]
pub(super) struct NormCache {
    pub x_hat: Vec<f64>,
    pub rstd: Vec<f64>,
}

#[derive(Debug)]
pub(super) struct LayerTrace {
    pub norm1: NormCache,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Attention weights, rows x heads x len x len. Masked pairs hold 0.
    pub attn: Vec<f64>,
    /// Concatenated head outputs before the output projection.
    pub head_out: Vec<f64>,
    pub norm2: NormCache,
    /// Feedforward pre-activation, rows x len x d_ff.
    pub ff_pre: Vec<f64>,
    /// Feedforward post-GELU, rows x len x d_ff.
    pub ff_act: Vec<f64>,
}

/// Everything forward computed, sufficient for an exact backward pass.
/// Recomputing from the same batch and parameters reproduces `logits`
/// bit-identically: evaluation order is fixed and single-threaded.
#[derive(Debug)]
pub struct ForwardTrace {
    pub rows: usize,
    pub len: usize,
    /// rows x len x vocab_size
    pub logits: Vec<f64>,
    pub(super) layers: Vec<LayerTrace>,
    pub(super) final_norm: NormCache,
    /// Final normed activations fed to the output projection.
    pub(super) final_out: Vec<f64>,
    pub(super) batch_fingerprint: u64,
    pub(super) params_revision: u64,
}

/// `y[p] = x[p] @ w^T` for `positions` rows of width `w.cols()`.
pub(super) fn linear(x: &[f64], w: &Tensor, positions: usize, out: &mut [f64]) {
    let (rows_w, cols_w) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), positions * cols_w);
    debug_assert_eq!(out.len(), positions * rows_w);
    for p in 0..positions {
        let xr = &x[p * cols_w..(p + 1) * cols_w];
        let or = &mut out[p * rows_w..(p + 1) * rows_w];
        for (o, wr) in or.iter_mut().zip(w.data.chunks_exact(cols_w)) {
            let mut acc = 0.0;
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            *o = acc;
        }
    }
}

pub(super) fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    positions: usize,
    d: usize,
) -> (NormCache, Vec<f64>) {
    let mut x_hat = vec![0.0f64; positions * d];
    let mut rstd = vec![0.0f64; positions];
    let mut y = vec![0.0f64; positions * d];
    for p in 0..positions {
        let xr = &x[p * d..(p + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + NORM_EPS).sqrt();
        rstd[p] = r;
        for i in 0..d {
            let h = (xr[i] - mean) * r;
            x_hat[p * d + i] = h;
            y[p * d + i] = gain[i] * h + bias[i];
        }
    }
    (NormCache { x_hat, rstd }, y)
}

pub(super) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn check_finite(values: &[f64], site: &str) -> Result<(), ModelError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteActivation {
            site: site.to_string(),
        });
    }
    Ok(())
}

/// Run the network over a batch. Attention weight is exactly zero wherever
/// the batch mask is zero; positions whose mask row is entirely zero (padding)
/// produce a zero attention output.
pub fn forward(batch: &Batch, params: &ModelParameters) -> Result<ForwardTrace, ModelError> {
    let cfg = &params.config;
    let (rows, len, d) = (batch.rows, batch.max_len, cfg.d_model);
    let positions = rows * len;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = embed(batch, params)?;
    let mut layers = Vec::with_capacity(cfg.n_layers);

    for (li, layer) in params.layers.iter().enumerate() {
        let (norm1, n1) = layer_norm(
            &x,
            &layer.attn_norm.gain.data,
            &layer.attn_norm.bias.data,
            positions,
            d,
        );

        let mut q = vec![0.0f64; positions * d];
        let mut k = vec![0.0f64; positions * d];
        let mut v = vec![0.0f64; positions * d];
        linear(&n1, &layer.wq, positions, &mut q);
        linear(&n1, &layer.wk, positions, &mut k);
        linear(&n1, &layer.wv, positions, &mut v);

        let mut attn = vec![0.0f64; rows * heads * len * len];
        let mut head_out = vec![0.0f64; positions * d];
        let mut scores = vec![0.0f64; len];
        for b in 0..rows {
            let mrow = &batch.attention_mask[b * len * len..(b + 1) * len * len];
            for h in 0..heads {
                let ho = h * hd;
                for i in 0..len {
                    let qi = &q[(b * len + i) * d + ho..(b * len + i) * d + ho + hd];
                    let mask_i = &mrow[i * len..(i + 1) * len];
                    let mut max_score = f64::NEG_INFINITY;
                    for j in 0..len {
                        if mask_i[j] == 0 {
                            continue;
                        }
                        let kj = &k[(b * len + j) * d + ho..(b * len + j) * d + ho + hd];
                        let mut s = 0.0;
                        for (a, c) in qi.iter().zip(kj) {
                            s += a * c;
                        }
                        s *= scale;
                        scores[j] = s;
                        if s > max_score {
                            max_score = s;
                        }
                    }
                    if max_score == f64::NEG_INFINITY {
                        continue; // nothing visible: zero output row
                    }
                    let arow_base = ((b * heads + h) * len + i) * len;
                    let mut denom = 0.0;
                    for j in 0..len {
                        if mask_i[j] == 0 {
                            continue;
                        }
                        let e = (scores[j] - max_score).exp();
                        attn[arow_base + j] = e;
                        denom += e;
                    }
                    let out = &mut head_out[(b * len + i) * d + ho..(b * len + i) * d + ho + hd];
                    for j in 0..len {
                        let w = attn[arow_base + j];
                        if w == 0.0 {
                            continue;
                        }
                        let w = w / denom;
                        attn[arow_base + j] = w;
                        let vj = &v[(b * len + j) * d + ho..(b * len + j) * d + ho + hd];
                        for (o, c) in out.iter_mut().zip(vj) {
                            *o += w * c;
                        }
                    }
                }
            }
        }

        let mut attn_out = vec![0.0f64; positions * d];
        linear(&head_out, &layer.wo, positions, &mut attn_out);
        for (xv, a) in x.iter_mut().zip(&attn_out) {
            *xv += a;
        }

        let (norm2, n2) = layer_norm(
            &x,
            &layer.ff_norm.gain.data,
            &layer.ff_norm.bias.data,
            positions,
            d,
        );
        let mut ff_pre = vec![0.0f64; positions * cfg.d_ff];
        linear(&n2, &layer.w1, positions, &mut ff_pre);
        let ff_act: Vec<f64> = ff_pre.iter().map(|&h| gelu(h)).collect();
        let mut ff_out = vec![0.0f64; positions * d];
        linear(&ff_act, &layer.w2, positions, &mut ff_out);
        for (xv, f) in x.iter_mut().zip(&ff_out) {
            *xv += f;
        }
        check_finite(&x, &format!("layer{li}"))?;

        layers.push(LayerTrace {
            norm1,
            q,
            k,
            v,
            attn,
            head_out,
            norm2,
            ff_pre,
            ff_act,
        });
    }

    let (final_norm, final_out) = layer_norm(
        &x,
        &params.final_norm.gain.data,
        &params.final_norm.bias.data,
        positions,
        d,
    );
    let mut logits = vec![0.0f64; positions * cfg.vocab_size];
    linear(&final_out, params.output_projection(), positions, &mut logits);
    check_finite(&logits, "logits")?;

    Ok(ForwardTrace {
        rows,
        len,
        logits,
        layers,
        final_norm,
        final_out,
        batch_fingerprint: batch.fingerprint(),
        params_revision: params.revision,
    })
}

/// Mean negative log-likelihood over masked positions, in nats per token.
///
/// A position t with `loss_mask == 1` is predicted from the logits at t-1,
/// so response tokens (and the closing EOS) condition only on what precedes
/// them. Also returns the per-position loss grid (zeros where unmasked).
pub fn nll_loss(trace: &ForwardTrace, batch: &Batch) -> Result<(f64, Vec<f64>), ModelError> {
    let vocab = trace.logits.len() / (trace.rows * trace.len);
    let mut per_token = vec![0.0f64; trace.rows * trace.len];
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..trace.rows {
        for t in 0..trace.len {
            if batch.loss_mask[b * trace.len + t] == 0 {
                continue;
            }
            if t == 0 {
                return Err(ModelError::InvalidLossMask);
            }
            let target = batch.token_ids[b * trace.len + t] as usize;
            let row = &trace.logits[(b * trace.len + t - 1) * vocab..(b * trace.len + t) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            let nll = lse - row[target];
            per_token[b * trace.len + t] = nll;
            total += nll;
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::EmptyLossMask);
    }
    Ok((total / count as f64, per_token))
}
