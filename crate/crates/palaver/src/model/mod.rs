//! The generation model: summed token/position/type/role embeddings feeding
//! pre-norm transformer blocks under a prefix attention mask, with exact
//! hand-written gradients.
//!
//! All arithmetic runs in f64 with a fixed evaluation order, so repeated
//! forward passes are bit-identical. Trainable state is quantized to f32
//! values at init and after every optimizer step, which makes the 32-bit
//! checkpoint format lossless for anything the training loop produces.

mod backward;
mod forward;

pub use backward::{backward, backward_scaled};
pub use forward::{forward, nll_loss, ForwardTrace};

use crate::batching::Batch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{kind} id {id} out of range for table of {table} (row {row}, position {pos})")]
    IdOutOfRange {
        kind: &'static str,
        id: u32,
        table: usize,
        row: usize,
        pos: usize,
    },
    #[error("non-finite activation at {site}")]
    NonFiniteActivation { site: String },
    #[error("loss mask selects no positions")]
    EmptyLossMask,
    #[error("loss mask set at position 0, which has no predecessor to predict from")]
    InvalidLossMask,
    #[error("stale trace: batch or parameters changed since forward")]
    StaleTrace,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_types: usize,
    pub n_roles: usize,
    pub max_positions: usize,
    /// Share the token embedding table with the output projection.
    pub tie_output: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Laptop-sized defaults used throughout the tests.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 512,
            n_types: 3,
            n_roles: 9,
            max_positions: 384,
            tie_output: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return err("all dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_roles < 2 {
            return err(format!("n_roles {} < 2", self.n_roles));
        }
        if self.n_types < 2 {
            return err(format!("n_types {} < 2", self.n_types));
        }
        if self.vocab_size < 5 {
            return err(format!("vocab_size {} leaves no room after specials", self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A shaped block of f64 values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Row view of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl NormParams {
    fn new(d: usize) -> Self {
        let mut gain = Tensor::zeros(&[d]);
        gain.data.fill(1.0);
        Self {
            gain,
            bias: Tensor::zeros(&[d]),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gain: Tensor::zeros(&[d]),
            bias: Tensor::zeros(&[d]),
        }
    }
}

/// Per-block weights. Linear layers are bias-free; `wq/wk/wv/wo` are
/// `[d_model, d_model]` and the feedforward pair is `[d_ff, d_model]` /
/// `[d_model, d_ff]`, all applied as `y = x W^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: NormParams,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ff_norm: NormParams,
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Every trainable tensor. The same container doubles as the gradient set
/// and the optimizer moment buffers, which keeps shapes aligned by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    pub embed_token: Tensor,
    pub embed_position: Tensor,
    pub embed_type: Tensor,
    pub embed_role: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: NormParams,
    /// Output projection when embeddings are untied.
    pub output: Option<Tensor>,
    /// Bumped on every optimizer update; lets backward notice stale traces.
    pub revision: u64,
}

impl ModelParameters {
    /// Same shapes, all zeros. Used for gradients and Adam moments.
    pub fn zeros_like(&self) -> Self {
        let c = &self.config;
        Self {
            config: c.clone(),
            embed_token: Tensor::zeros(&[c.vocab_size, c.d_model]),
            embed_position: Tensor::zeros(&[c.max_positions, c.d_model]),
            embed_type: Tensor::zeros(&[c.n_types, c.d_model]),
            embed_role: Tensor::zeros(&[c.n_roles, c.d_model]),
            layers: (0..c.n_layers)
                .map(|_| LayerParams {
                    attn_norm: NormParams::zeros(c.d_model),
                    wq: Tensor::zeros(&[c.d_model, c.d_model]),
                    wk: Tensor::zeros(&[c.d_model, c.d_model]),
                    wv: Tensor::zeros(&[c.d_model, c.d_model]),
                    wo: Tensor::zeros(&[c.d_model, c.d_model]),
                    ff_norm: NormParams::zeros(c.d_model),
                    w1: Tensor::zeros(&[c.d_ff, c.d_model]),
                    w2: Tensor::zeros(&[c.d_model, c.d_ff]),
                })
                .collect(),
            final_norm: NormParams::zeros(c.d_model),
            output: if c.tie_output {
                None
            } else {
                Some(Tensor::zeros(&[c.vocab_size, c.d_model]))
            },
            revision: 0,
        }
    }

    /// All tensors with stable names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.token".to_string(), &self.embed_token),
            ("embed.position".to_string(), &self.embed_position),
            ("embed.type".to_string(), &self.embed_type),
            ("embed.role".to_string(), &self.embed_role),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm.gain"), &layer.attn_norm.gain));
            out.push((format!("layer{i}.attn_norm.bias"), &layer.attn_norm.bias));
            out.push((format!("layer{i}.attn.wq"), &layer.wq));
            out.push((format!("layer{i}.attn.wk"), &layer.wk));
            out.push((format!("layer{i}.attn.wv"), &layer.wv));
            out.push((format!("layer{i}.attn.wo"), &layer.wo));
            out.push((format!("layer{i}.ff_norm.gain"), &layer.ff_norm.gain));
            out.push((format!("layer{i}.ff_norm.bias"), &layer.ff_norm.bias));
            out.push((format!("layer{i}.ff.w1"), &layer.w1));
            out.push((format!("layer{i}.ff.w2"), &layer.w2));
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm.gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm.bias));
        if let Some(output) = &self.output {
            out.push(("output.weight".to_string(), output));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed.token".to_string(), &mut self.embed_token),
            ("embed.position".to_string(), &mut self.embed_position),
            ("embed.type".to_string(), &mut self.embed_type),
            ("embed.role".to_string(), &mut self.embed_role),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.attn_norm.gain"), &mut layer.attn_norm.gain));
            out.push((format!("layer{i}.attn_norm.bias"), &mut layer.attn_norm.bias));
            out.push((format!("layer{i}.attn.wq"), &mut layer.wq));
            out.push((format!("layer{i}.attn.wk"), &mut layer.wk));
            out.push((format!("layer{i}.attn.wv"), &mut layer.wv));
            out.push((format!("layer{i}.attn.wo"), &mut layer.wo));
            out.push((format!("layer{i}.ff_norm.gain"), &mut layer.ff_norm.gain));
            out.push((format!("layer{i}.ff_norm.bias"), &mut layer.ff_norm.bias));
            out.push((format!("layer{i}.ff.w1"), &mut layer.w1));
            out.push((format!("layer{i}.ff.w2"), &mut layer.w2));
        }
        out.push(("final_norm.gain".to_string(), &mut self.final_norm.gain));
        out.push(("final_norm.bias".to_string(), &mut self.final_norm.bias));
        if let Some(output) = &mut self.output {
            out.push(("output.weight".to_string(), output));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// The projection used for logits: the token table when tied.
    pub fn output_projection(&self) -> &Tensor {
        self.output.as_ref().unwrap_or(&self.embed_token)
    }

    /// Round every value to its nearest f32. Keeps live state identical to
    /// what a checkpoint round-trip would produce.
    pub fn quantize_to_f32(&mut self) {
        for (_, tensor) in self.named_tensors_mut() {
            for v in &mut tensor.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Gaussian init (std 0.02), with the residual-output projections `wo` and
/// `w2` scaled down by 1/sqrt(2 * n_layers). Norm gains start at 1, biases
/// at 0. Deterministic in the seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParameters, ModelError> {
    config.validate()?;
    let mut params = ModelParameters {
        config: config.clone(),
        embed_token: Tensor::zeros(&[config.vocab_size, config.d_model]),
        embed_position: Tensor::zeros(&[config.max_positions, config.d_model]),
        embed_type: Tensor::zeros(&[config.n_types, config.d_model]),
        embed_role: Tensor::zeros(&[config.n_roles, config.d_model]),
        layers: Vec::new(),
        final_norm: NormParams::new(config.d_model),
        output: None,
        revision: 0,
    };
    params.layers = (0..config.n_layers)
        .map(|_| LayerParams {
            attn_norm: NormParams::new(config.d_model),
            wq: Tensor::zeros(&[config.d_model, config.d_model]),
            wk: Tensor::zeros(&[config.d_model, config.d_model]),
            wv: Tensor::zeros(&[config.d_model, config.d_model]),
            wo: Tensor::zeros(&[config.d_model, config.d_model]),
            ff_norm: NormParams::new(config.d_model),
            w1: Tensor::zeros(&[config.d_ff, config.d_model]),
            w2: Tensor::zeros(&[config.d_model, config.d_ff]),
        })
        .collect();
    if !config.tie_output {
        params.output = Some(Tensor::zeros(&[config.vocab_size, config.d_model]));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0f64, 0.02).expect("valid std");
    let residual_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
    let residual = Normal::new(0.0f64, residual_std).expect("valid std");

    for (name, tensor) in params.named_tensors_mut() {
        if name.contains("norm") {
            continue; // gains stay 1, biases stay 0
        }
        let dist = if name.ends_with("attn.wo") || name.ends_with("ff.w2") {
            &residual
        } else {
            &base
        };
        for v in &mut tensor.data {
            *v = dist.sample(&mut rng);
        }
    }
    params.quantize_to_f32();
    Ok(params)
}

/// Sum the four embedding tables over a batch: `rows * max_len * d_model`.
pub fn embed(batch: &Batch, params: &ModelParameters) -> Result<Vec<f64>, ModelError> {
    let d = params.config.d_model;
    let mut out = vec![0.0f64; batch.rows * batch.max_len * d];
    let tables: [(&'static str, &Tensor, &[u32]); 4] = [
        ("token", &params.embed_token, &batch.token_ids),
        ("position", &params.embed_position, &batch.position_ids),
        ("type", &params.embed_type, &batch.type_ids),
        ("role", &params.embed_role, &batch.role_ids),
    ];
    for (kind, table, ids) in tables {
        for (slot, &id) in ids.iter().enumerate() {
            if id as usize >= table.rows() {
                return Err(ModelError::IdOutOfRange {
                    kind,
                    id,
                    table: table.rows(),
                    row: slot / batch.max_len,
                    pos: slot % batch.max_len,
                });
            }
            let src = table.row(id as usize);
            let dst = &mut out[slot * d..(slot + 1) * d];
            for (o, s) in dst.iter_mut().zip(src) {
                *o += s;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::{Batch, PackedSample, TYPE_CONTEXT, TYPE_RESPONSE};
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 24,
            n_types: 3,
            n_roles: 4,
            max_positions: 32,
            tie_output: true,
            init_seed: 0,
        }
    }

    /// Hand-built packed sample with pseudo-random in-range ids.
    fn toy_sample(cfg: &ModelConfig, context_len: usize, response_len: usize, seed: u64) -> PackedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = context_len + response_len + 2;
        let mut token_ids: Vec<u32> =
            (0..context_len).map(|_| rng.random_range(4..cfg.vocab_size as u32)).collect();
        token_ids.push(crate::tokenizer::BOS_ID);
        token_ids.extend((0..response_len).map(|_| rng.random_range(4..cfg.vocab_size as u32)));
        token_ids.push(crate::tokenizer::EOS_ID);
        let mut role_ids: Vec<u32> =
            (0..context_len).map(|_| rng.random_range(0..cfg.n_roles as u32)).collect();
        role_ids.extend(std::iter::repeat(0).take(response_len + 2));
        let mut type_ids = vec![TYPE_CONTEXT; context_len];
        type_ids.extend(std::iter::repeat(TYPE_RESPONSE).take(response_len + 2));
        let mut loss_mask = vec![0u8; context_len + 1];
        loss_mask.extend(std::iter::repeat(1u8).take(response_len + 1));
        PackedSample {
            token_ids,
            position_ids: (0..total as u32).collect(),
            type_ids,
            role_ids,
            loss_mask,
            context_len,
            response_len,
        }
    }

    fn toy_batch(cfg: &ModelConfig, spans: &[(usize, usize)], seed: u64) -> Batch {
        let samples: Vec<PackedSample> = spans
            .iter()
            .enumerate()
            .map(|(i, &(c, r))| toy_sample(cfg, c, r, seed + i as u64))
            .collect();
        Batch::from_samples(&samples)
    }

    fn loss_of(params: &ModelParameters, batch: &Batch) -> f64 {
        let trace = forward(batch, params).unwrap();
        nll_loss(&trace, batch).unwrap().0
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small_config();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            for (x, y) in ta.data.iter().zip(&tb.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let c = init_params(&cfg, 8).unwrap();
        assert_ne!(a.embed_token.data, c.embed_token.data);
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let cfg = ModelConfig {
            d_model: 65,
            ..small_config()
        };
        let err = init_params(&cfg, 0).unwrap_err();
        assert!(matches!(err, ModelError::InvalidConfig(_)), "{err}");
    }

    #[test]
    fn paper_scale_config_validates() {
        let cfg = ModelConfig {
            n_layers: 72,
            n_heads: 32,
            d_model: 3072,
            d_ff: 18432,
            vocab_size: 8000,
            n_types: 3,
            n_roles: 9,
            max_positions: 2048,
            tie_output: true,
            init_seed: 0,
        };
        cfg.validate().unwrap();
    }

    #[test]
    fn residual_projections_use_scaled_std() {
        // Enough entries for a tight sample-std estimate: d_model 256 gives
        // 65536 per wo tensor, 131072 across two layers.
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 256,
            d_ff: 64,
            vocab_size: 64,
            n_types: 3,
            n_roles: 4,
            max_positions: 32,
            tie_output: true,
            init_seed: 0,
        };
        let params = init_params(&cfg, 3).unwrap();
        let mut wo_values = Vec::new();
        let mut wq_values = Vec::new();
        for layer in &params.layers {
            wo_values.extend_from_slice(&layer.wo.data);
            wq_values.extend_from_slice(&layer.wq.data);
        }
        assert!(wo_values.len() >= 100_000);
        let std = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let expected = 0.02 / (2.0f64 * 2.0).sqrt(); // 0.01 for two layers
        let got = std(&wo_values);
        assert!(
            (got - expected).abs() / expected < 0.05,
            "wo std {got} vs {expected}"
        );
        let got_base = std(&wq_values);
        assert!(
            (got_base - 0.02).abs() / 0.02 < 0.05,
            "wq std {got_base} vs 0.02"
        );
    }

    #[test]
    fn embed_sums_four_tables() {
        let cfg = small_config();
        let batch = toy_batch(&cfg, &[(3, 2)], 11);
        let zero = init_params(&cfg, 0).unwrap().zeros_like();
        let out = embed(&batch, &zero).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        // Only the role table nonzero: positions sharing a role id embed
        // identically, and perturbing row 0 touches exactly role-0 slots.
        let mut role_only = zero.clone();
        for (i, v) in role_only.embed_role.data.iter_mut().enumerate() {
            *v = (i as f64) * 0.25 + 1.0;
        }
        let out = embed(&batch, &role_only).unwrap();
        let d = cfg.d_model;
        for a in 0..batch.max_len {
            for b in 0..batch.max_len {
                if batch.role_ids[a] == batch.role_ids[b] {
                    assert_eq!(out[a * d..(a + 1) * d], out[b * d..(b + 1) * d]);
                }
            }
        }
        let mut perturbed = role_only.clone();
        perturbed.embed_role.data[0] += 0.5;
        let out2 = embed(&batch, &perturbed).unwrap();
        for slot in 0..batch.max_len {
            let changed = out[slot * d..(slot + 1) * d] != out2[slot * d..(slot + 1) * d];
            assert_eq!(changed, batch.role_ids[slot] == 0, "slot {slot}");
        }
    }

    #[test]
    fn embed_rejects_out_of_range_ids() {
        let cfg = small_config();
        let mut batch = toy_batch(&cfg, &[(2, 2)], 5);
        batch.token_ids[0] = cfg.vocab_size as u32;
        let err = embed(&batch, &init_params(&cfg, 0).unwrap()).unwrap_err();
        assert!(matches!(err, ModelError::IdOutOfRange { kind: "token", .. }), "{err}");
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let cfg = small_config();
        let params = init_params(&cfg, 1).unwrap();
        let batch = toy_batch(&cfg, &[(4, 3), (2, 5)], 2);
        let a = forward(&batch, &params).unwrap();
        let b = forward(&batch, &params).unwrap();
        assert_eq!(a.logits.len(), b.logits.len());
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn forward_single_position_shape() {
        let cfg = small_config();
        let params = init_params(&cfg, 1).unwrap();
        // One context token, zero response tokens: L = 3 (ctx, BOS, EOS).
        let batch = toy_batch(&cfg, &[(1, 0)], 3);
        let trace = forward(&batch, &params).unwrap();
        assert_eq!(trace.logits.len(), 3 * cfg.vocab_size);
    }

    #[test]
    fn context_rows_ignore_response_tokens() {
        let cfg = small_config();
        let params = init_params(&cfg, 9).unwrap();
        let batch = toy_batch(&cfg, &[(4, 3)], 21);
        let base = forward(&batch, &params).unwrap();
        let mut altered = batch.clone();
        // Change the last response token; context rows must not notice.
        let idx = 4 + 1 + 2; // third response token
        altered.token_ids[idx] = (altered.token_ids[idx] + 1 - 4) % (cfg.vocab_size as u32 - 4) + 4;
        let changed = forward(&altered, &params).unwrap();
        let v = cfg.vocab_size;
        for pos in 0..4 {
            for k in 0..v {
                assert_eq!(
                    base.logits[pos * v + k].to_bits(),
                    changed.logits[pos * v + k].to_bits(),
                    "context position {pos} moved"
                );
            }
        }
    }

    #[test]
    fn response_perturbation_respects_causality() {
        let cfg = small_config();
        let params = init_params(&cfg, 13).unwrap();
        let spans = (4usize, 4usize);
        let batch = toy_batch(&cfg, &[spans], 31);
        let base = forward(&batch, &params).unwrap();
        let total = spans.0 + spans.1 + 2;
        let v = cfg.vocab_size;
        // Perturb each response-span position in turn (skip BOS/EOS markers
        // is unnecessary: any token change behaves the same way).
        for t in spans.0 + 1..total - 1 {
            let mut altered = batch.clone();
            altered.token_ids[t] = (altered.token_ids[t] + 3 - 4) % (v as u32 - 4) + 4;
            let changed = forward(&altered, &params).unwrap();
            for pos in 0..total {
                let same = (0..v)
                    .all(|k| base.logits[pos * v + k].to_bits() == changed.logits[pos * v + k].to_bits());
                if pos < t {
                    assert!(same, "position {pos} changed when token {t} moved");
                } else if pos == t {
                    assert!(!same, "position {t} should see its own new embedding");
                }
            }
        }
        // A context perturbation is allowed to reach everything.
        let mut altered = batch.clone();
        altered.token_ids[0] = (altered.token_ids[0] + 3 - 4) % (v as u32 - 4) + 4;
        let changed = forward(&altered, &params).unwrap();
        assert_ne!(base.logits, changed.logits);
    }

    #[test]
    fn uniform_logits_cost_log_vocab() {
        let cfg = small_config();
        // All-zero parameters produce exactly uniform logits.
        let zero = init_params(&cfg, 0).unwrap().zeros_like();
        let batch = toy_batch(&cfg, &[(3, 4)], 17);
        let (loss, per_token) = {
            let trace = forward(&batch, &zero).unwrap();
            nll_loss(&trace, &batch).unwrap()
        };
        let expected = (cfg.vocab_size as f64).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        let masked: usize = batch.loss_mask.iter().map(|&m| m as usize).sum();
        assert_eq!(per_token.iter().filter(|&&l| l != 0.0).count(), masked);
    }

    #[test]
    fn spiked_logits_drive_loss_to_zero() {
        let cfg = small_config();
        let params = init_params(&cfg, 2).unwrap();
        let batch = toy_batch(&cfg, &[(2, 3)], 19);
        let mut trace = forward(&batch, &params).unwrap();
        let v = cfg.vocab_size;
        for t in 0..batch.max_len {
            if batch.loss_mask[t] == 0 {
                continue;
            }
            let target = batch.token_ids[t] as usize;
            let row = &mut trace.logits[(t - 1) * v..t * v];
            for (k, l) in row.iter_mut().enumerate() {
                *l = if k == target { 1e4 } else { 0.0 };
            }
        }
        let (loss, _) = nll_loss(&trace, &batch).unwrap();
        assert!(loss.abs() < 1e-9, "spiked loss {loss}");
    }

    #[test]
    fn nll_matches_independent_oracle() {
        // Oracle: a from-scratch log-softmax-and-gather, sharing no code
        // with the implementation above.
        fn oracle(logits: &[f64], batch: &Batch, vocab: usize) -> f64 {
            let mut sum = 0.0;
            let mut n = 0;
            for b in 0..batch.rows {
                for t in 0..batch.max_len {
                    if batch.loss_mask[b * batch.max_len + t] == 0 {
                        continue;
                    }
                    let row = &logits[(b * batch.max_len + t - 1) * vocab..][..vocab];
                    let target = batch.token_ids[b * batch.max_len + t] as usize;
                    let mut best = f64::NEG_INFINITY;
                    for &l in row {
                        if l > best {
                            best = l;
                        }
                    }
                    let z: f64 = row.iter().map(|l| (l - best).exp()).sum();
                    sum += -(row[target] - best - z.ln());
                    n += 1;
                }
            }
            sum / n as f64
        }
        let cfg = small_config();
        let params = init_params(&cfg, 23).unwrap();
        let batch = toy_batch(&cfg, &[(3, 4), (5, 2)], 29);
        let trace = forward(&batch, &params).unwrap();
        let (loss, _) = nll_loss(&trace, &batch).unwrap();
        let expected = oracle(&trace.logits, &batch, cfg.vocab_size);
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
    }

    #[test]
    fn empty_loss_mask_is_an_error() {
        let cfg = small_config();
        let params = init_params(&cfg, 2).unwrap();
        let mut batch = toy_batch(&cfg, &[(2, 2)], 7);
        batch.loss_mask.fill(0);
        let trace = forward(&batch, &params).unwrap();
        assert!(matches!(
            nll_loss(&trace, &batch),
            Err(ModelError::EmptyLossMask)
        ));
    }

    #[test]
    fn backward_scales_linearly() {
        let cfg = small_config();
        let params = init_params(&cfg, 5).unwrap();
        let batch = toy_batch(&cfg, &[(3, 3)], 37);
        let trace = forward(&batch, &params).unwrap();
        let g1 = backward(&trace, &batch, &params).unwrap();
        let g2 = backward_scaled(&trace, &batch, &params, 2.0).unwrap();
        for ((_, a), (_, b)) in g1.named_tensors().iter().zip(g2.named_tensors().iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} {y}");
            }
        }
    }

    #[test]
    fn masked_out_rows_contribute_nothing() {
        let cfg = small_config();
        let params = init_params(&cfg, 6).unwrap();
        // Two rows of identical span so max_len matches the solo batch.
        let batch_two = toy_batch(&cfg, &[(3, 3), (3, 3)], 41);
        let mut silenced = batch_two.clone();
        for t in 0..silenced.max_len {
            silenced.loss_mask[silenced.max_len + t] = 0;
        }
        let solo = {
            let samples = batch_two.unpack();
            Batch::from_samples(&samples[..1])
        };
        let trace_silenced = forward(&silenced, &params).unwrap();
        let trace_solo = forward(&solo, &params).unwrap();
        let g_silenced = backward(&trace_silenced, &silenced, &params).unwrap();
        let g_solo = backward(&trace_solo, &solo, &params).unwrap();
        for ((_, a), (_, b)) in g_silenced
            .named_tensors()
            .iter()
            .zip(g_solo.named_tensors().iter())
        {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn pad_positions_are_inert() {
        let cfg = small_config();
        let params = init_params(&cfg, 8).unwrap();
        // Unequal rows force padding in the shorter one.
        let batch = toy_batch(&cfg, &[(5, 4), (2, 1)], 43);
        assert!(batch.pad_count > 0);
        let loss_a = loss_of(&params, &batch);
        let trace = forward(&batch, &params).unwrap();
        let grads_a = backward(&trace, &batch, &params).unwrap();

        let mut altered = batch.clone();
        let row1_len = altered.row_len(1);
        for t in row1_len..altered.max_len {
            altered.token_ids[altered.max_len + t] = 9;
            altered.role_ids[altered.max_len + t] = 1;
            altered.type_ids[altered.max_len + t] = 1;
        }
        let loss_b = loss_of(&params, &altered);
        let trace_b = forward(&altered, &params).unwrap();
        let grads_b = backward(&trace_b, &altered, &params).unwrap();
        assert_eq!(loss_a.to_bits(), loss_b.to_bits());
        for ((_, a), (_, b)) in grads_a.named_tensors().iter().zip(grads_b.named_tensors().iter()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stale_trace_is_rejected() {
        let cfg = small_config();
        let params = init_params(&cfg, 10).unwrap();
        let batch = toy_batch(&cfg, &[(2, 2)], 47);
        let trace = forward(&batch, &params).unwrap();
        let mut moved = params.clone();
        moved.revision += 1;
        assert!(matches!(
            backward(&trace, &batch, &moved),
            Err(ModelError::StaleTrace)
        ));
        let other_batch = toy_batch(&cfg, &[(2, 2)], 48);
        assert!(matches!(
            backward(&trace, &other_batch, &params),
            Err(ModelError::StaleTrace)
        ));
    }

    #[test]
    fn non_finite_activations_name_their_layer() {
        let cfg = small_config();
        let mut params = init_params(&cfg, 11).unwrap();
        params.embed_token.data[5 * cfg.d_model] = f64::INFINITY;
        let mut batch = toy_batch(&cfg, &[(2, 2)], 51);
        batch.token_ids[0] = 5;
        let err = forward(&batch, &params).unwrap_err();
        match err {
            ModelError::NonFiniteActivation { site } => assert_eq!(site, "layer0"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn role_assignment_changes_logits_but_relabeling_does_not() {
        let cfg = small_config();
        let params = init_params(&cfg, 12).unwrap();
        let batch = toy_batch(&cfg, &[(4, 3)], 53);
        let base = forward(&batch, &params).unwrap();

        // Different role ids on the same text: logits must move.
        let mut reroled = batch.clone();
        for t in 0..4 {
            reroled.role_ids[t] = (reroled.role_ids[t] + 1) % cfg.n_roles as u32;
        }
        let moved = forward(&reroled, &params).unwrap();
        let max_diff = base
            .logits
            .iter()
            .zip(&moved.logits)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-6, "role ids had no effect ({max_diff})");

        // Permuting table rows together with the ids is a no-op.
        let perm: Vec<usize> = (0..cfg.n_roles).map(|r| (r + 1) % cfg.n_roles).collect();
        let mut permuted_params = params.clone();
        for (r, &dst) in perm.iter().enumerate() {
            let src_row = params.embed_role.row(r).to_vec();
            let d = cfg.d_model;
            permuted_params.embed_role.data[dst * d..(dst + 1) * d].copy_from_slice(&src_row);
        }
        let mut permuted_batch = batch.clone();
        for role in permuted_batch.role_ids.iter_mut() {
            *role = perm[*role as usize] as u32;
        }
        let same = forward(&permuted_batch, &permuted_params).unwrap();
        let max_diff = base
            .logits
            .iter()
            .zip(&same.logits)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6, "relabeling moved logits by {max_diff}");
    }

    #[test]
    fn gradients_match_finite_differences_on_a_small_net() {
        let cfg = small_config();
        let params = init_params(&cfg, 14).unwrap();
        let batch = toy_batch(&cfg, &[(3, 3), (2, 4)], 59);
        let trace = forward(&batch, &params).unwrap();
        let grads = backward(&trace, &batch, &params).unwrap();

        let h = 1e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let numel = params
                .named_tensors()
                .iter()
                .find(|(n, _)| n == &name)
                .unwrap()
                .1
                .numel();
            let mut picks: Vec<usize> = (0..6.min(numel)).map(|_| rng.random_range(0..numel)).collect();
            // Always include the biggest analytic entry.
            let g_tensor = grads
                .named_tensors()
                .into_iter()
                .find(|(n, _)| n == &name)
                .unwrap()
                .1
                .clone();
            let argmax = g_tensor
                .data
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            picks.push(argmax);

            for idx in picks {
                let mut plus = params.clone();
                let mut minus = params.clone();
                for (n, t) in plus.named_tensors_mut() {
                    if n == name {
                        t.data[idx] += h;
                    }
                }
                for (n, t) in minus.named_tensors_mut() {
                    if n == name {
                        t.data[idx] -= h;
                    }
                }
                let numeric = (loss_of(&plus, &batch) - loss_of(&minus, &batch)) / (2.0 * h);
                let analytic = g_tensor.data[idx];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{name}[{idx}]: analytic {analytic} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }
}
