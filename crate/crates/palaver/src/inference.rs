//! Autoregressive decoding, perplexity evaluation, and the mechanized
//! self-chat harness.

use crate::batching::{self, Batch, PackLimits, PackedSample, TYPE_CONTEXT, TYPE_RESPONSE};
use crate::corpus::{assign_roles, DialogueSample, Turn};
use crate::model::{forward, nll_loss, ModelError, ModelParameters};
use crate::tokenizer::{self, Vocabulary, BOS_ID, EOS_ID};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid decode config: {0}")]
    BadConfig(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("distinct-n needs n in {{1, 2}}, got {0}")]
    BadNgramOrder(usize),
    #[error("no generated turns to score")]
    EmptyTranscripts,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Batch(#[from] batching::BatchError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    TopK,
    TopP,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: DecodeStrategy::TopP,
            top_k: 40,
            top_p: 0.9,
            temperature: 0.9,
            max_new_tokens: 48,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self, limits: PackLimits) -> Result<(), InferenceError> {
        let err = |m: String| Err(InferenceError::BadConfig(m));
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return err(format!("top_p {} outside (0, 1]", self.top_p));
        }
        if self.top_k == 0 {
            return err("top_k must be at least 1".into());
        }
        if self.temperature <= 0.0 {
            return err(format!("temperature {} must be positive", self.temperature));
        }
        if self.max_new_tokens == 0 {
            return err("max_new_tokens must be at least 1".into());
        }
        if self.max_new_tokens > limits.max_response_tokens {
            return err(format!(
                "max_new_tokens {} over the response cap {}",
                self.max_new_tokens, limits.max_response_tokens
            ));
        }
        Ok(())
    }

    /// Short stable digest recorded in transcripts so a run can be traced
    /// back to its exact decoding settings.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        hash.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Generate a response to `context`, speaking as `speaker`. Roles are
/// reassigned so the generator is role 0, the context is front-truncated to
/// the caps, and decoding stops at EOS or `max_new_tokens`.
pub fn generate(
    context: &[Turn],
    speaker: &str,
    params: &ModelParameters,
    vocab: &Vocabulary,
    limits: PackLimits,
    cfg: &DecodeConfig,
) -> Result<String, InferenceError> {
    cfg.validate(limits)?;

    // Role assignment with the generator as the response author.
    let skeleton = assign_roles(
        DialogueSample {
            context: context.to_vec(),
            response: Turn {
                text: String::new(),
                user: speaker.to_string(),
            },
            roles: Vec::new(),
        },
        params.config.n_roles as u32 - 1,
    );

    let mut ctx_tokens: Vec<u32> = Vec::new();
    let mut ctx_roles: Vec<u32> = Vec::new();
    for (turn, &role) in skeleton.context.iter().zip(&skeleton.roles) {
        for id in tokenizer::encode(&turn.text, vocab) {
            ctx_tokens.push(id);
            ctx_roles.push(role);
        }
    }
    // Keep the whole generation within the position table.
    let max_ctx = limits
        .max_context_tokens
        .min(params.config.max_positions.saturating_sub(cfg.max_new_tokens + 2));
    if ctx_tokens.len() > max_ctx {
        let drop = ctx_tokens.len() - max_ctx;
        ctx_tokens.drain(..drop);
        ctx_roles.drain(..drop);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut generated: Vec<u32> = Vec::new();
    loop {
        let sample = generation_sample(&ctx_tokens, &ctx_roles, &generated);
        let batch = Batch::from_samples(std::slice::from_ref(&sample));
        let trace = forward(&batch, params)?;
        // The next token is predicted at the last real prefix position; the
        // padding EOS behind it is causally invisible there.
        let read_at = sample.len() - 2;
        let vocab_size = params.config.vocab_size;
        let row = &trace.logits[read_at * vocab_size..(read_at + 1) * vocab_size];
        let next = pick_token(row, cfg, &mut rng);
        if next == EOS_ID {
            break;
        }
        generated.push(next);
        if generated.len() >= cfg.max_new_tokens {
            break;
        }
    }
    Ok(tokenizer::decode(&generated, vocab).expect("generated ids are in range"))
}

/// Decoding prefix packed as a regular sample: context, BOS, the tokens
/// generated so far, and a closing EOS that keeps the span arithmetic intact
/// without influencing any earlier position.
fn generation_sample(ctx_tokens: &[u32], ctx_roles: &[u32], generated: &[u32]) -> PackedSample {
    let c = ctx_tokens.len();
    let r = generated.len();
    let total = c + r + 2;
    let mut token_ids = Vec::with_capacity(total);
    token_ids.extend_from_slice(ctx_tokens);
    token_ids.push(BOS_ID);
    token_ids.extend_from_slice(generated);
    token_ids.push(EOS_ID);
    let mut role_ids = Vec::with_capacity(total);
    role_ids.extend_from_slice(ctx_roles);
    role_ids.extend(std::iter::repeat(0).take(r + 2));
    let mut type_ids = vec![TYPE_CONTEXT; c];
    type_ids.extend(std::iter::repeat(TYPE_RESPONSE).take(r + 2));
    let mut loss_mask = vec![0u8; c + 1];
    loss_mask.extend(std::iter::repeat(1u8).take(r + 1));
    PackedSample {
        token_ids,
        position_ids: (0..total as u32).collect(),
        type_ids,
        role_ids,
        loss_mask,
        context_len: c,
        response_len: r,
    }
}

fn pick_token(logits: &[f64], cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> u32 {
    match cfg.strategy {
        DecodeStrategy::Greedy => argmax(logits),
        DecodeStrategy::TopK => sample_candidates(logits, cfg.temperature, cfg.top_k, 1.0, rng),
        DecodeStrategy::TopP => {
            sample_candidates(logits, cfg.temperature, logits.len(), cfg.top_p, rng)
        }
    }
}

fn argmax(values: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// Temperature softmax, candidates sorted by descending probability (id
/// ascending on ties), cut to `k` entries and nucleus mass `p`, then one
/// draw from the renormalized tail.
fn sample_candidates(
    logits: &[f64],
    temperature: f64,
    k: usize,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> u32 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|l| ((l - max) / temperature).exp()).collect();
    let total: f64 = scaled.iter().sum();

    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        scaled[b]
            .partial_cmp(&scaled[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut kept: Vec<(usize, f64)> = Vec::new();
    let mut mass = 0.0;
    for &id in order.iter().take(k) {
        let prob = scaled[id] / total;
        kept.push((id, prob));
        mass += prob;
        if mass >= p {
            break;
        }
    }

    let dart: f64 = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &(id, prob) in &kept {
        acc += prob;
        if dart < acc {
            return id as u32;
        }
    }
    kept.last().expect("at least one candidate").0 as u32
}

/// Token-weighted evaluation over a sample set.
#[derive(Debug, Clone, Copy)]
pub struct PerplexityReport {
    pub nll: f64,
    pub ppl: f64,
    pub tokens: usize,
}

/// Mean NLL per response token (EOS included) and its exponential.
pub fn perplexity(
    samples: &[DialogueSample],
    params: &ModelParameters,
    vocab: &Vocabulary,
    limits: PackLimits,
    token_budget: usize,
) -> Result<PerplexityReport, InferenceError> {
    if samples.is_empty() {
        return Err(InferenceError::EmptyCorpus);
    }
    let packed: Vec<PackedSample> = samples
        .iter()
        .map(|s| batching::pack(s, vocab, limits))
        .collect::<Result<_, _>>()?;
    let batches = batching::group_by_length(&packed, token_budget)?;
    let mut weighted = 0.0;
    let mut tokens = 0usize;
    for batch in &batches {
        let trace = forward(batch, params)?;
        let (loss, _) = nll_loss(&trace, batch)?;
        let count: usize = batch.loss_mask.iter().map(|&m| m as usize).sum();
        weighted += loss * count as f64;
        tokens += count;
    }
    let nll = weighted / tokens as f64;
    Ok(PerplexityReport {
        nll,
        ppl: nll.exp(),
        tokens,
    })
}

/// One transcript line. Round 0 is the seed topic; generated turns count
/// rounds in pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub round: u32,
    pub speaker: String,
    pub text: String,
}

/// A finished self-chat conversation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatState {
    pub turns: Vec<ChatTurn>,
    pub rounds: u32,
    pub config_digest: String,
}

impl ChatState {
    /// Turns the model produced (everything after the seed).
    pub fn generated_turns(&self) -> &[ChatTurn] {
        &self.turns[1..]
    }
}

pub const SPEAKER_A: &str = "P1";
pub const SPEAKER_B: &str = "P2";

/// The model talks to itself for `rounds` rounds (two turns per round),
/// starting from a seed topic spoken by P1. Before each turn the roles are
/// reassigned so the current speaker is role 0. Each turn draws from a seed
/// derived from the config seed and the turn index, so transcripts are
/// reproducible.
pub fn self_chat(
    seed_topic: &str,
    rounds: u32,
    params: &ModelParameters,
    vocab: &Vocabulary,
    limits: PackLimits,
    cfg: &DecodeConfig,
) -> Result<ChatState, InferenceError> {
    if rounds == 0 {
        return Err(InferenceError::BadConfig("rounds must be at least 1".into()));
    }
    cfg.validate(limits)?;
    let digest = cfg.digest();
    let mut turns = vec![ChatTurn {
        round: 0,
        speaker: SPEAKER_A.to_string(),
        text: seed_topic.to_string(),
    }];
    let mut history: Vec<Turn> = vec![Turn {
        text: seed_topic.to_string(),
        user: SPEAKER_A.to_string(),
    }];

    for i in 0..2 * rounds {
        let speaker = if i % 2 == 0 { SPEAKER_B } else { SPEAKER_A };
        let turn_cfg = DecodeConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let text = generate(&history, speaker, params, vocab, limits, &turn_cfg)?;
        turns.push(ChatTurn {
            round: i / 2 + 1,
            speaker: speaker.to_string(),
            text: text.clone(),
        });
        history.push(Turn {
            text,
            user: speaker.to_string(),
        });
    }
    Ok(ChatState {
        turns,
        rounds,
        config_digest: digest,
    })
}

/// Serialize a transcript as JSON lines with the decode-config digest on
/// every row.
pub fn write_transcript<W: Write>(mut w: W, chat: &ChatState) -> Result<(), InferenceError> {
    for turn in &chat.turns {
        let line = serde_json::json!({
            "round": turn.round,
            "speaker": turn.speaker,
            "text": turn.text,
            "decode_config_digest": chat.config_digest,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Share of distinct word n-grams over all generated turns; n is 1 or 2.
pub fn distinct_n(transcripts: &[ChatState], n: usize) -> Result<f64, InferenceError> {
    if !(n == 1 || n == 2) {
        return Err(InferenceError::BadNgramOrder(n));
    }
    let mut seen: std::collections::HashSet<Vec<&str>> = std::collections::HashSet::new();
    let mut total = 0usize;
    for chat in transcripts {
        for turn in chat.generated_turns() {
            let words: Vec<&str> = turn.text.split_whitespace().collect();
            for gram in words.windows(n) {
                seen.insert(gram.to_vec());
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(InferenceError::EmptyTranscripts);
    }
    Ok(seen.len() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::tokenizer::train_bpe;

    fn test_vocab() -> Vocabulary {
        train_bpe(
            [
                "what do you think about tea",
                "i think tea is great",
                "coffee is also great stuff",
                "do you like coffee more",
                "maybe on some days yes",
            ],
            72,
        )
        .unwrap()
    }

    fn test_model(vocab: &Vocabulary) -> crate::model::ModelParameters {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: vocab.size().max(48),
            n_types: 3,
            n_roles: 4,
            max_positions: 128,
            tie_output: true,
            init_seed: 0,
        };
        init_params(&cfg, 15).unwrap()
    }

    fn turns(items: &[(&str, &str)]) -> Vec<Turn> {
        items
            .iter()
            .map(|(text, user)| Turn {
                text: text.to_string(),
                user: user.to_string(),
            })
            .collect()
    }

    fn limits() -> PackLimits {
        PackLimits {
            max_context_tokens: 96,
            max_response_tokens: 24,
        }
    }

    #[test]
    fn config_bounds_are_enforced() {
        let bad_p = DecodeConfig {
            top_p: 0.0,
            ..DecodeConfig::default()
        };
        assert!(bad_p.validate(limits()).is_err());
        let bad_k = DecodeConfig {
            top_k: 0,
            strategy: DecodeStrategy::TopK,
            ..DecodeConfig::default()
        };
        assert!(bad_k.validate(limits()).is_err());
        let bad_t = DecodeConfig {
            temperature: 0.0,
            ..DecodeConfig::default()
        };
        assert!(bad_t.validate(limits()).is_err());
        let bad_len = DecodeConfig {
            max_new_tokens: 25,
            ..DecodeConfig::default()
        };
        assert!(bad_len.validate(limits()).is_err());
    }

    #[test]
    fn vanishing_temperature_matches_greedy() {
        let vocab = test_vocab();
        let params = test_model(&vocab);
        let context = turns(&[("what do you think about tea", "P1")]);
        let greedy = generate(
            &context,
            "P2",
            &params,
            &vocab,
            limits(),
            &DecodeConfig {
                strategy: DecodeStrategy::Greedy,
                max_new_tokens: 12,
                ..DecodeConfig::default()
            },
        )
        .unwrap();
        let frozen = generate(
            &context,
            "P2",
            &params,
            &vocab,
            limits(),
            &DecodeConfig {
                strategy: DecodeStrategy::TopP,
                top_p: 1.0,
                temperature: 1e-9,
                max_new_tokens: 12,
                seed: 123,
                ..DecodeConfig::default()
            },
        )
        .unwrap();
        assert_eq!(greedy, frozen);
    }

    #[test]
    fn nucleus_with_full_mass_equals_full_top_k() {
        let vocab = test_vocab();
        let params = test_model(&vocab);
        let context = turns(&[("do you like coffee more", "P1")]);
        for seed in [1u64, 7, 42] {
            let a = generate(
                &context,
                "P2",
                &params,
                &vocab,
                limits(),
                &DecodeConfig {
                    strategy: DecodeStrategy::TopP,
                    top_p: 1.0,
                    temperature: 1.3,
                    max_new_tokens: 16,
                    seed,
                    ..DecodeConfig::default()
                },
            )
            .unwrap();
            let b = generate(
                &context,
                "P2",
                &params,
                &vocab,
                limits(),
                &DecodeConfig {
                    strategy: DecodeStrategy::TopK,
                    top_k: params.config.vocab_size,
                    temperature: 1.3,
                    max_new_tokens: 16,
                    seed,
                    ..DecodeConfig::default()
                },
            )
            .unwrap();
            assert_eq!(a, b, "seed {seed}");
        }
    }

    #[test]
    fn generation_stops_at_the_token_cap() {
        let vocab = test_vocab();
        let params = test_model(&vocab);
        let context = turns(&[("i think tea is great", "P1")]);
        let cfg = DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            max_new_tokens: 1,
            ..DecodeConfig::default()
        };
        let out = generate(&context, "P2", &params, &vocab, limits(), &cfg).unwrap();
        // With this init the random model's argmax is not EOS, so exactly one
        // token comes out: the text must be the decoding of a single id.
        assert!(!out.is_empty(), "expected one token, got none");
        let single = (0..vocab.size() as u32)
            .any(|id| crate::tokenizer::decode(&[id], &vocab).unwrap() == out);
        assert!(single, "{out:?} is not a single-token decoding");
    }

    #[test]
    fn speaker_identity_reaches_the_logits() {
        let vocab = test_vocab();
        let params = test_model(&vocab);
        let context = turns(&[
            ("what do you think about tea", "P1"),
            ("i think tea is great", "P2"),
        ]);
        let cfg = DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            max_new_tokens: 12,
            ..DecodeConfig::default()
        };
        // Same context, different generator: the role pivot moves, so under
        // a role-sensitive random model the outputs differ.
        let as_p1 = generate(&context, "P1", &params, &vocab, limits(), &cfg).unwrap();
        let as_p3 = generate(&context, "P3", &params, &vocab, limits(), &cfg).unwrap();
        assert_ne!(as_p1, as_p3);
    }

    #[test]
    fn self_chat_produces_two_turns_per_round_plus_seed() {
        let vocab = test_vocab();
        let params = test_model(&vocab);
        let cfg = DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            max_new_tokens: 8,
            ..DecodeConfig::default()
        };
        let chat = self_chat("do you like coffee", 5, &params, &vocab, limits(), &cfg).unwrap();
        assert_eq!(chat.turns.len(), 11);
        assert_eq!(chat.generated_turns().len(), 10);
        assert_eq!(chat.rounds, 5);
        assert_eq!(chat.turns[0].speaker, SPEAKER_A);
        for (i, turn) in chat.generated_turns().iter().enumerate() {
            let expect = if i % 2 == 0 { SPEAKER_B } else { SPEAKER_A };
            assert_eq!(turn.speaker, expect);
            assert_eq!(turn.round as usize, i / 2 + 1);
        }

        let single = self_chat("tea or coffee", 1, &params, &vocab, limits(), &cfg).unwrap();
        assert_eq!(single.generated_turns().len(), 2);
    }

    #[test]
    fn fixed_seed_transcripts_are_identical() {
        let vocab = test_vocab();
        let params = test_model(&vocab);
        let cfg = DecodeConfig {
            strategy: DecodeStrategy::TopP,
            seed: 9,
            max_new_tokens: 8,
            ..DecodeConfig::default()
        };
        let a = self_chat("tea time talk", 3, &params, &vocab, limits(), &cfg).unwrap();
        let b = self_chat("tea time talk", 3, &params, &vocab, limits(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transcripts_serialize_with_digest() {
        let vocab = test_vocab();
        let params = test_model(&vocab);
        let cfg = DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            max_new_tokens: 6,
            ..DecodeConfig::default()
        };
        let chat = self_chat("some topic here", 1, &params, &vocab, limits(), &cfg).unwrap();
        let mut buf = Vec::new();
        write_transcript(&mut buf, &chat).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("round").is_some());
            assert!(v.get("speaker").is_some());
            assert!(v.get("text").is_some());
            assert_eq!(
                v.get("decode_config_digest").and_then(|d| d.as_str()),
                Some(chat.config_digest.as_str())
            );
        }
        assert_eq!(chat.config_digest.len(), 12);
    }

    #[test]
    fn perplexity_of_one_sample_is_its_batch_loss() {
        let vocab = test_vocab();
        let params = test_model(&vocab);
        let sample = crate::corpus::assign_roles(
            DialogueSample {
                context: turns(&[("what do you think about tea", "u1")]),
                response: Turn {
                    text: "i think tea is great".into(),
                    user: "u2".into(),
                },
                roles: Vec::new(),
            },
            3,
        );
        let report =
            perplexity(std::slice::from_ref(&sample), &params, &vocab, limits(), 512).unwrap();
        let packed = crate::batching::pack(&sample, &vocab, limits()).unwrap();
        let batch = Batch::from_samples(std::slice::from_ref(&packed));
        let trace = forward(&batch, &params).unwrap();
        let (direct, _) = nll_loss(&trace, &batch).unwrap();
        assert!((report.nll - direct).abs() < 1e-12);
        assert!((report.ppl - direct.exp()).abs() < 1e-9);
    }

    #[test]
    fn untrained_perplexity_sits_near_vocab_size() {
        let vocab = test_vocab();
        let params = test_model(&vocab);
        let samples: Vec<DialogueSample> = (0..8)
            .map(|i| {
                crate::corpus::assign_roles(
                    DialogueSample {
                        context: turns(&[("do you like coffee more", "u1")]),
                        response: Turn {
                            text: if i % 2 == 0 {
                                "maybe on some days yes".into()
                            } else {
                                "coffee is also great stuff".into()
                            },
                            user: "u2".into(),
                        },
                        roles: Vec::new(),
                    },
                    3,
                )
            })
            .collect();
        let report = perplexity(&samples, &params, &vocab, limits(), 512).unwrap();
        let v = params.config.vocab_size as f64;
        assert!(
            (report.ppl - v).abs() / v < 0.02,
            "ppl {} vs vocab {v}",
            report.ppl
        );
    }

    #[test]
    fn distinct_n_counts_unique_ngrams() {
        let chat = |texts: &[&str]| ChatState {
            turns: std::iter::once(ChatTurn {
                round: 0,
                speaker: SPEAKER_A.into(),
                text: "seed".into(),
            })
            .chain(texts.iter().enumerate().map(|(i, t)| ChatTurn {
                round: i as u32 / 2 + 1,
                speaker: SPEAKER_B.into(),
                text: t.to_string(),
            }))
            .collect(),
            rounds: 1,
            config_digest: "x".into(),
        };
        let one = chat(&["a b a b"]);
        assert_eq!(distinct_n(std::slice::from_ref(&one), 1).unwrap(), 0.5);

        let repeated = chat(&["the same line", "the same line", "the same line"]);
        // 2 unique bigrams per turn, 6 total: ratio = 2/6.
        let d2 = distinct_n(std::slice::from_ref(&repeated), 2).unwrap();
        assert!((d2 - 2.0 / 6.0).abs() < 1e-12);

        let fresh = chat(&["all words here differ"]);
        assert_eq!(distinct_n(std::slice::from_ref(&fresh), 1).unwrap(), 1.0);

        assert!(matches!(
            distinct_n(&[], 1),
            Err(InferenceError::EmptyTranscripts)
        ));
        assert!(matches!(
            distinct_n(std::slice::from_ref(&one), 3),
            Err(InferenceError::BadNgramOrder(3))
        ));
    }
}
