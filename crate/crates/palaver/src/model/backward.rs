//! Exact analytic gradients of the mean NLL with respect to every parameter
//! tensor, mirroring the forward pass step by step in reverse.

use super::forward::{gelu_grad, ForwardTrace, NormCache};
use super::{ModelError, ModelParameters, Tensor};
use crate::batching::Batch;

/// Gradients of [`super::nll_loss`]'s scalar with respect to every tensor in
/// `params`, returned in an identically-shaped container.
pub fn backward(
    trace: &ForwardTrace,
    batch: &Batch,
    params: &ModelParameters,
) -> Result<ModelParameters, ModelError> {
    backward_scaled(trace, batch, params, 1.0)
}

/// As [`backward`], for `loss_scale * nll`. Gradients are linear in the
/// scale, which the tests lean on.
pub fn backward_scaled(
    trace: &ForwardTrace,
    batch: &Batch,
    params: &ModelParameters,
    loss_scale: f64,
) -> Result<ModelParameters, ModelError> {
    if trace.batch_fingerprint != batch.fingerprint() || trace.params_revision != params.revision {
        return Err(ModelError::StaleTrace);
    }
    let cfg = &params.config;
    let (rows, len, d) = (trace.rows, trace.len, cfg.d_model);
    let positions = rows * len;
    let vocab = cfg.vocab_size;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mask_total: usize = batch.loss_mask.iter().map(|&m| m as usize).sum();
    if mask_total == 0 {
        return Err(ModelError::EmptyLossMask);
    }
    let coef = loss_scale / mask_total as f64;

    let mut grads = params.zeros_like();

    // d loss / d logits: softmax minus one-hot at each predicting position.
    let mut d_logits = vec![0.0f64; positions * vocab];
    for b in 0..rows {
        for t in 0..len {
            if batch.loss_mask[b * len + t] == 0 {
                continue;
            }
            if t == 0 {
                return Err(ModelError::InvalidLossMask);
            }
            let target = batch.token_ids[b * len + t] as usize;
            let src = (b * len + t - 1) * vocab;
            let row = &trace.logits[src..src + vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|l| (l - max).exp()).sum();
            let dst = &mut d_logits[src..src + vocab];
            for (dv, l) in dst.iter_mut().zip(row) {
                *dv += coef * (l - max).exp() / denom;
            }
            dst[target] -= coef;
        }
    }

    // Output projection (the token table when tied).
    let mut d_final_out = vec![0.0f64; positions * d];
    {
        let projection = params.output_projection();
        let d_projection = match &mut grads.output {
            Some(o) => o,
            None => &mut grads.embed_token,
        };
        linear_backward(
            &d_logits,
            &trace.final_out,
            projection,
            positions,
            d_projection,
            &mut d_final_out,
        );
    }

    let mut dx = layer_norm_backward(
        &d_final_out,
        &trace.final_norm,
        &params.final_norm.gain.data,
        positions,
        d,
        &mut grads.final_norm.gain.data,
        &mut grads.final_norm.bias.data,
    );

    for li in (0..cfg.n_layers).rev() {
        let layer = &params.layers[li];
        let lg = &mut grads.layers[li];
        let lt = &trace.layers[li];

        // Feedforward residual branch.
        let mut d_ff_act = vec![0.0f64; positions * cfg.d_ff];
        linear_backward(
            &dx,
            &lt.ff_act,
            &layer.w2,
            positions,
            &mut lg.w2,
            &mut d_ff_act,
        );
        let d_ff_pre: Vec<f64> = d_ff_act
            .iter()
            .zip(&lt.ff_pre)
            .map(|(g, &h)| g * gelu_grad(h))
            .collect();
        let n2_out = apply_gain_bias(
            &lt.norm2.x_hat,
            &layer.ff_norm.gain.data,
            &layer.ff_norm.bias.data,
            positions,
            d,
        );
        let mut d_n2_out = vec![0.0f64; positions * d];
        linear_backward(
            &d_ff_pre,
            &n2_out,
            &layer.w1,
            positions,
            &mut lg.w1,
            &mut d_n2_out,
        );
        let d_mid_from_ff = layer_norm_backward(
            &d_n2_out,
            &lt.norm2,
            &layer.ff_norm.gain.data,
            positions,
            d,
            &mut lg.ff_norm.gain.data,
            &mut lg.ff_norm.bias.data,
        );
        for (a, b) in dx.iter_mut().zip(&d_mid_from_ff) {
            *a += b;
        }
        // dx now holds the gradient at x_mid.

        // Attention residual branch.
        let mut d_head_out = vec![0.0f64; positions * d];
        linear_backward(
            &dx,
            &lt.head_out,
            &layer.wo,
            positions,
            &mut lg.wo,
            &mut d_head_out,
        );

        let mut d_q = vec![0.0f64; positions * d];
        let mut d_k = vec![0.0f64; positions * d];
        let mut d_v = vec![0.0f64; positions * d];
        let mut d_attn_row = vec![0.0f64; len];
        for b in 0..rows {
            for h in 0..heads {
                let ho = h * hd;
                for i in 0..len {
                    let arow = &lt.attn[((b * heads + h) * len + i) * len..][..len];
                    let d_out = &d_head_out[(b * len + i) * d + ho..][..hd];
                    let mut row_dot = 0.0;
                    for j in 0..len {
                        let w = arow[j];
                        if w == 0.0 {
                            d_attn_row[j] = 0.0;
                            continue;
                        }
                        let vj = &lt.v[(b * len + j) * d + ho..][..hd];
                        let dv = &mut d_v[(b * len + j) * d + ho..][..hd];
                        let mut da = 0.0;
                        for x in 0..hd {
                            dv[x] += w * d_out[x];
                            da += d_out[x] * vj[x];
                        }
                        d_attn_row[j] = da;
                        row_dot += w * da;
                    }
                    // Softmax Jacobian: ds_j = a_j * (da_j - sum_k a_k da_k).
                    let qi_base = (b * len + i) * d + ho;
                    for j in 0..len {
                        let w = arow[j];
                        if w == 0.0 {
                            continue;
                        }
                        let ds = w * (d_attn_row[j] - row_dot) * scale;
                        let kj = &lt.k[(b * len + j) * d + ho..][..hd];
                        let dk = &mut d_k[(b * len + j) * d + ho..][..hd];
                        for x in 0..hd {
                            dk[x] += ds * lt.q[qi_base + x];
                        }
                        let qi_grad = &mut d_q[qi_base..qi_base + hd];
                        for x in 0..hd {
                            qi_grad[x] += ds * kj[x];
                        }
                    }
                }
            }
        }

        let n1_out = apply_gain_bias(
            &lt.norm1.x_hat,
            &layer.attn_norm.gain.data,
            &layer.attn_norm.bias.data,
            positions,
            d,
        );
        let mut d_n1_out = vec![0.0f64; positions * d];
        linear_backward(&d_q, &n1_out, &layer.wq, positions, &mut lg.wq, &mut d_n1_out);
        linear_backward(&d_k, &n1_out, &layer.wk, positions, &mut lg.wk, &mut d_n1_out);
        linear_backward(&d_v, &n1_out, &layer.wv, positions, &mut lg.wv, &mut d_n1_out);

        let d_in_from_attn = layer_norm_backward(
            &d_n1_out,
            &lt.norm1,
            &layer.attn_norm.gain.data,
            positions,
            d,
            &mut lg.attn_norm.gain.data,
            &mut lg.attn_norm.bias.data,
        );
        for (a, b) in dx.iter_mut().zip(&d_in_from_attn) {
            *a += b;
        }
        // dx now holds the gradient at the layer input.
    }

    // Scatter into the four embedding tables; padded slots carry zero
    // gradient and are skipped.
    for b in 0..rows {
        let real = batch.row_len(b);
        for l in 0..real {
            let slot = b * len + l;
            let row = &dx[slot * d..(slot + 1) * d];
            add_row(&mut grads.embed_token, batch.token_ids[slot] as usize, row);
            add_row(
                &mut grads.embed_position,
                batch.position_ids[slot] as usize,
                row,
            );
            add_row(&mut grads.embed_type, batch.type_ids[slot] as usize, row);
            add_row(&mut grads.embed_role, batch.role_ids[slot] as usize, row);
        }
    }

    Ok(grads)
}

fn add_row(table: &mut Tensor, row: usize, values: &[f64]) {
    let cols = table.cols();
    let dst = &mut table.data[row * cols..(row + 1) * cols];
    for (a, b) in dst.iter_mut().zip(values) {
        *a += b;
    }
}

fn apply_gain_bias(x_hat: &[f64], gain: &[f64], bias: &[f64], positions: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; positions * d];
    for p in 0..positions {
        for i in 0..d {
            out[p * d + i] = gain[i] * x_hat[p * d + i] + bias[i];
        }
    }
    out
}

/// Accumulate `dw += dy^T x` and `dx += dy @ w` for `y = x w^T`.
fn linear_backward(
    dy: &[f64],
    x: &[f64],
    w: &Tensor,
    positions: usize,
    dw: &mut Tensor,
    dx: &mut [f64],
) {
    let (out_dim, in_dim) = (w.rows(), w.cols());
    debug_assert_eq!(dy.len(), positions * out_dim);
    debug_assert_eq!(x.len(), positions * in_dim);
    debug_assert_eq!(dx.len(), positions * in_dim);
    for p in 0..positions {
        let dyr = &dy[p * out_dim..(p + 1) * out_dim];
        let xr = &x[p * in_dim..(p + 1) * in_dim];
        let dxr = &mut dx[p * in_dim..(p + 1) * in_dim];
        for o in 0..out_dim {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            let wr = &w.data[o * in_dim..(o + 1) * in_dim];
            let dwr = &mut dw.data[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
}

/// LayerNorm backward. Returns dx and accumulates the gain/bias gradients.
fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    gain: &[f64],
    positions: usize,
    d: usize,
    d_gain: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0f64; positions * d];
    for p in 0..positions {
        let dyr = &dy[p * d..(p + 1) * d];
        let xh = &cache.x_hat[p * d..(p + 1) * d];
        let r = cache.rstd[p];
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for i in 0..d {
            let dxh = dyr[i] * gain[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[i];
            d_gain[i] += dyr[i] * xh[i];
            d_bias[i] += dyr[i];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let dxr = &mut dx[p * d..(p + 1) * d];
        for i in 0..d {
            let dxh = dyr[i] * gain[i];
            dxr[i] = r * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
        }
    }
    dx
}
