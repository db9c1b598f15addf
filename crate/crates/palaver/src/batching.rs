//! Packing samples into id sequences and padded, masked batches.
//!
//! A packed sample lays out `[context tokens][BOS][response tokens][EOS]`.
//! Context positions see the whole context bidirectionally; response
//! positions (BOS included) see the context plus the response causally.
//! Grouping by length keeps rows of similar size together so padding stays
//! small under a fixed per-batch token budget.

use crate::corpus::DialogueSample;
use crate::tokenizer::{self, Vocabulary, BOS_ID, EOS_ID, PAD_ID};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const TYPE_CONTEXT: u32 = 0;
pub const TYPE_RESPONSE: u32 = 1;
/// Reserved for grounding segments (knowledge, personas); never emitted here.
pub const TYPE_GROUNDING: u32 = 2;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("empty response")]
    EmptyResponse,
    #[error("sample has {roles} role ids for {turns} turns")]
    RoleCountMismatch { roles: usize, turns: usize },
    #[error("sample {index} is {len} tokens long, over the {budget}-token budget")]
    SampleExceedsBudget {
        index: usize,
        len: usize,
        budget: usize,
    },
    #[error("no samples to group")]
    NoSamples,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("batch dump: {0}")]
    BadDump(String),
}

/// Sequence-length caps applied when packing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackLimits {
    pub max_context_tokens: usize,
    pub max_response_tokens: usize,
}

impl Default for PackLimits {
    fn default() -> Self {
        Self {
            max_context_tokens: 256,
            max_response_tokens: 64,
        }
    }
}

/// One tokenized sample with all four id streams aligned position by
/// position, plus the loss mask marking response tokens and the closing EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSample {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub type_ids: Vec<u32>,
    pub role_ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub context_len: usize,
    pub response_len: usize,
}

impl PackedSample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Length of the response span: BOS + response tokens + EOS.
    pub fn response_span(&self) -> usize {
        self.response_len + 2
    }
}

/// Tokenize and pack one sample. The context keeps its newest tokens when it
/// exceeds the cap; the response keeps its oldest and always ends in EOS.
pub fn pack(
    sample: &DialogueSample,
    vocab: &Vocabulary,
    limits: PackLimits,
) -> Result<PackedSample, BatchError> {
    if sample.roles.len() != sample.context.len() + 1 {
        return Err(BatchError::RoleCountMismatch {
            roles: sample.roles.len(),
            turns: sample.context.len() + 1,
        });
    }

    let mut ctx_tokens: Vec<u32> = Vec::new();
    let mut ctx_roles: Vec<u32> = Vec::new();
    for (turn, &role) in sample.context.iter().zip(&sample.roles) {
        for id in tokenizer::encode(&turn.text, vocab) {
            ctx_tokens.push(id);
            ctx_roles.push(role);
        }
    }
    if ctx_tokens.len() > limits.max_context_tokens {
        let drop = ctx_tokens.len() - limits.max_context_tokens;
        ctx_tokens.drain(..drop);
        ctx_roles.drain(..drop);
    }

    let mut resp_tokens = tokenizer::encode(&sample.response.text, vocab);
    if resp_tokens.is_empty() {
        return Err(BatchError::EmptyResponse);
    }
    resp_tokens.truncate(limits.max_response_tokens.saturating_sub(1));
    let response_role = *sample.roles.last().expect("checked above");

    let context_len = ctx_tokens.len();
    let response_len = resp_tokens.len();
    let total = context_len + response_len + 2;

    let mut token_ids = ctx_tokens;
    token_ids.push(BOS_ID);
    token_ids.extend_from_slice(&resp_tokens);
    token_ids.push(EOS_ID);

    let mut role_ids = ctx_roles;
    role_ids.extend(std::iter::repeat(response_role).take(response_len + 2));

    let mut type_ids = vec![TYPE_CONTEXT; context_len];
    type_ids.extend(std::iter::repeat(TYPE_RESPONSE).take(response_len + 2));

    let mut loss_mask = vec![0u8; context_len + 1];
    loss_mask.extend(std::iter::repeat(1u8).take(response_len + 1));

    Ok(PackedSample {
        token_ids,
        position_ids: (0..total as u32).collect(),
        type_ids,
        role_ids,
        loss_mask,
        context_len,
        response_len,
    })
}

/// Square 0/1 attention mask for a context span of `context_len` followed by
/// a causal span of `response_len` positions, flattened row-major.
///
/// Row i may attend to column j iff both sit in the context, or i is in the
/// response and j is either in the context or a response position <= i.
pub fn build_prefix_mask(context_len: usize, response_len: usize) -> Vec<u8> {
    let n = context_len + response_len;
    let mut mask = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            let allowed = if i < context_len {
                j < context_len
            } else {
                j < context_len || j <= i
            };
            mask[i * n + j] = allowed as u8;
        }
    }
    mask
}

/// A padded batch of packed samples. Pad slots hold PAD/zero ids, their mask
/// rows and columns are all zero, and they never enter the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub max_len: usize,
    /// rows x max_len
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<u32>,
    pub type_ids: Vec<u32>,
    pub role_ids: Vec<u32>,
    /// rows x max_len x max_len
    pub attention_mask: Vec<u8>,
    /// rows x max_len
    pub loss_mask: Vec<u8>,
    pub pad_count: usize,
    /// (context_len, response_len) per row, in row order.
    pub row_spans: Vec<(usize, usize)>,
}

impl Batch {
    pub fn from_samples(samples: &[PackedSample]) -> Self {
        let rows = samples.len();
        let max_len = samples.iter().map(PackedSample::len).max().unwrap_or(0);
        let mut token_ids = vec![PAD_ID; rows * max_len];
        let mut position_ids = vec![0u32; rows * max_len];
        let mut type_ids = vec![0u32; rows * max_len];
        let mut role_ids = vec![0u32; rows * max_len];
        let mut attention_mask = vec![0u8; rows * max_len * max_len];
        let mut loss_mask = vec![0u8; rows * max_len];
        let mut pad_count = 0;
        let mut row_spans = Vec::with_capacity(rows);

        for (r, sample) in samples.iter().enumerate() {
            let len = sample.len();
            let base = r * max_len;
            token_ids[base..base + len].copy_from_slice(&sample.token_ids);
            position_ids[base..base + len].copy_from_slice(&sample.position_ids);
            type_ids[base..base + len].copy_from_slice(&sample.type_ids);
            role_ids[base..base + len].copy_from_slice(&sample.role_ids);
            loss_mask[base..base + len].copy_from_slice(&sample.loss_mask);

            let prefix = build_prefix_mask(sample.context_len, sample.response_span());
            let mbase = r * max_len * max_len;
            for i in 0..len {
                let src = i * len;
                let dst = mbase + i * max_len;
                attention_mask[dst..dst + len].copy_from_slice(&prefix[src..src + len]);
            }
            pad_count += max_len - len;
            row_spans.push((sample.context_len, sample.response_len));
        }

        Self {
            rows,
            max_len,
            token_ids,
            position_ids,
            type_ids,
            role_ids,
            attention_mask,
            loss_mask,
            pad_count,
            row_spans,
        }
    }

    /// True sequence length of a row (without padding).
    pub fn row_len(&self, row: usize) -> usize {
        let (c, r) = self.row_spans[row];
        c + r + 2
    }

    /// Total real (non-pad) tokens across rows.
    pub fn token_count(&self) -> usize {
        (0..self.rows).map(|r| self.row_len(r)).sum()
    }

    /// Fraction of slots occupied by padding.
    pub fn pad_ratio(&self) -> f64 {
        let slots = self.rows * self.max_len;
        if slots == 0 {
            0.0
        } else {
            self.pad_count as f64 / slots as f64
        }
    }

    /// Recover the exact packed samples this batch was built from.
    pub fn unpack(&self) -> Vec<PackedSample> {
        (0..self.rows)
            .map(|r| {
                let (context_len, response_len) = self.row_spans[r];
                let len = context_len + response_len + 2;
                let base = r * self.max_len;
                PackedSample {
                    token_ids: self.token_ids[base..base + len].to_vec(),
                    position_ids: self.position_ids[base..base + len].to_vec(),
                    type_ids: self.type_ids[base..base + len].to_vec(),
                    role_ids: self.role_ids[base..base + len].to_vec(),
                    loss_mask: self.loss_mask[base..base + len].to_vec(),
                    context_len,
                    response_len,
                }
            })
            .collect()
    }

    /// Content hash used to detect a forward trace being replayed against a
    /// different batch.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.rows as u64);
        eat(self.max_len as u64);
        for &t in &self.token_ids {
            eat(t as u64);
        }
        for &(c, r) in &self.row_spans {
            eat(c as u64);
            eat(r as u64);
        }
        h
    }
}

/// One planned batch: which sample indices go together and how much padding
/// that costs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub indices: Vec<usize>,
    pub max_len: usize,
    pub pad: usize,
}

/// Greedily cut the given order into batches obeying
/// `rows x max_len <= token_budget`, without reordering.
pub fn plan_in_order(lengths: &[usize], token_budget: usize) -> Result<Vec<BatchPlan>, BatchError> {
    if lengths.is_empty() {
        return Err(BatchError::NoSamples);
    }
    if let Some(index) = (0..lengths.len()).find(|&i| lengths[i] > token_budget) {
        return Err(BatchError::SampleExceedsBudget {
            index,
            len: lengths[index],
            budget: token_budget,
        });
    }
    let mut plans = Vec::new();
    let mut indices: Vec<usize> = Vec::new();
    let mut max_len = 0usize;
    for (i, &len) in lengths.iter().enumerate() {
        let grown = max_len.max(len);
        if !indices.is_empty() && (indices.len() + 1) * grown > token_budget {
            plans.push(finish_plan(std::mem::take(&mut indices), max_len, lengths));
            max_len = 0;
        }
        max_len = max_len.max(len);
        indices.push(i);
    }
    plans.push(finish_plan(indices, max_len, lengths));
    Ok(plans)
}

fn finish_plan(indices: Vec<usize>, max_len: usize, lengths: &[usize]) -> BatchPlan {
    let pad = indices.iter().map(|&i| max_len - lengths[i]).sum();
    BatchPlan {
        indices,
        max_len,
        pad,
    }
}

/// Sort by length (stable, index tie-break), then cut greedily. Returns plans
/// whose indices refer to the original sample order.
pub fn plan_sorted(lengths: &[usize], token_budget: usize) -> Result<Vec<BatchPlan>, BatchError> {
    // Check against original indices so the error names the right sample.
    if let Some(index) = (0..lengths.len()).find(|&i| lengths[i] > token_budget) {
        return Err(BatchError::SampleExceedsBudget {
            index,
            len: lengths[index],
            budget: token_budget,
        });
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let sorted_lengths: Vec<usize> = order.iter().map(|&i| lengths[i]).collect();
    let plans = plan_in_order(&sorted_lengths, token_budget)?;
    Ok(plans
        .into_iter()
        .map(|p| BatchPlan {
            indices: p.indices.into_iter().map(|i| order[i]).collect(),
            max_len: p.max_len,
            pad: p.pad,
        })
        .collect())
}

/// Length-sorted batching: the padding-minimizing path used by training.
pub fn group_by_length(
    samples: &[PackedSample],
    token_budget: usize,
) -> Result<Vec<Batch>, BatchError> {
    let lengths: Vec<usize> = samples.iter().map(PackedSample::len).collect();
    let plans = plan_sorted(&lengths, token_budget)?;
    Ok(plans
        .iter()
        .map(|plan| {
            let rows: Vec<PackedSample> =
                plan.indices.iter().map(|&i| samples[i].clone()).collect();
            Batch::from_samples(&rows)
        })
        .collect())
}

/// Padding ratio across a whole set of batches.
pub fn padding_ratio(batches: &[Batch]) -> f64 {
    let slots: usize = batches.iter().map(|b| b.rows * b.max_len).sum();
    let pads: usize = batches.iter().map(|b| b.pad_count).sum();
    if slots == 0 {
        0.0
    } else {
        pads as f64 / slots as f64
    }
}

// ---------------------------------------------------------------------------
// Debug dump: dimensions header, per-row spans, then the five id matrices as
// little-endian 32-bit values. The attention mask is rebuilt from the spans.

const DUMP_MAGIC: &[u8; 4] = b"PBT1";

pub fn write_batch<W: Write>(mut w: W, batch: &Batch) -> Result<(), BatchError> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(batch.rows as u32).to_le_bytes())?;
    w.write_all(&(batch.max_len as u32).to_le_bytes())?;
    for &(c, r) in &batch.row_spans {
        w.write_all(&(c as u32).to_le_bytes())?;
        w.write_all(&(r as u32).to_le_bytes())?;
    }
    for matrix in [
        &batch.token_ids,
        &batch.position_ids,
        &batch.type_ids,
        &batch.role_ids,
    ] {
        for &v in matrix.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for &v in &batch.loss_mask {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_batch<R: Read>(mut r: R) -> Result<Batch, BatchError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(BatchError::BadDump("bad magic".into()));
    }
    let mut u32_buf = [0u8; 4];
    let mut next = |r: &mut R| -> Result<u32, BatchError> {
        r.read_exact(&mut u32_buf)?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let rows = next(&mut r)? as usize;
    let max_len = next(&mut r)? as usize;
    if rows.saturating_mul(max_len) > 1 << 28 {
        return Err(BatchError::BadDump("unreasonable dimensions".into()));
    }
    let mut row_spans = Vec::with_capacity(rows);
    for _ in 0..rows {
        let c = next(&mut r)? as usize;
        let resp = next(&mut r)? as usize;
        if c + resp + 2 > max_len {
            return Err(BatchError::BadDump("row span exceeds max_len".into()));
        }
        row_spans.push((c, resp));
    }
    let matrix = |r: &mut R| -> Result<Vec<u32>, BatchError> {
        let mut m = Vec::with_capacity(rows * max_len);
        for _ in 0..rows * max_len {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)?;
            m.push(u32::from_le_bytes(buf));
        }
        Ok(m)
    };
    let token_ids = matrix(&mut r)?;
    let position_ids = matrix(&mut r)?;
    let type_ids = matrix(&mut r)?;
    let role_ids = matrix(&mut r)?;
    let loss_mask: Vec<u8> = matrix(&mut r)?.into_iter().map(|v| v as u8).collect();

    let mut attention_mask = vec![0u8; rows * max_len * max_len];
    let mut pad_count = 0;
    for (row, &(c, resp)) in row_spans.iter().enumerate() {
        let len = c + resp + 2;
        let prefix = build_prefix_mask(c, resp + 2);
        let mbase = row * max_len * max_len;
        for i in 0..len {
            attention_mask[mbase + i * max_len..mbase + i * max_len + len]
                .copy_from_slice(&prefix[i * len..i * len + len]);
        }
        pad_count += max_len - len;
    }

    Ok(Batch {
        rows,
        max_len,
        token_ids,
        position_ids,
        type_ids,
        role_ids,
        attention_mask,
        loss_mask,
        pad_count,
        row_spans,
    })
}

pub fn write_batch_file(path: &Path, batch: &Batch) -> Result<(), BatchError> {
    let file = std::fs::File::create(path)?;
    write_batch(std::io::BufWriter::new(file), batch)
}

pub fn read_batch_file(path: &Path) -> Result<Batch, BatchError> {
    let file = std::fs::File::open(path)?;
    read_batch(std::io::BufReader::new(file))
}
