//! Memorize the bundled toy corpus and replay it.
//!
//! Builds samples from `data/toy_comments.jsonl`, trains a tiny model until
//! the loss collapses, then greedily regenerates every training response and
//! counts verbatim matches.
//!
//! Run with: cargo run --release -p palaver --example overfit_tiny

use palaver::batching::{group_by_length, pack, PackLimits};
use palaver::corpus::{build_corpus, read_comment_file, CleaningConfig};
use palaver::inference::{generate, perplexity, DecodeConfig, DecodeStrategy};
use palaver::model::{init_params, ModelConfig};
use palaver::tokenizer::train_bpe;
use palaver::training::{AdamConfig, ScheduleConfig, TrainSession};
use std::path::Path;

fn main() -> anyhow::Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy_comments.jsonl");
    let records = read_comment_file(&data)?;
    let corpus = build_corpus(records, &CleaningConfig::default(), 8);
    println!("samples: {}", corpus.samples.len());

    let text: Vec<String> = corpus
        .samples
        .iter()
        .flat_map(|s| {
            s.context
                .iter()
                .map(|t| t.text.clone())
                .chain(std::iter::once(s.response.text.clone()))
        })
        .collect();
    let vocab = train_bpe(text.iter(), 512)?;
    println!("vocab: {} tokens, {} merges", vocab.size(), vocab.merges().len());

    let limits = PackLimits::default();
    let packed: Vec<_> = corpus
        .samples
        .iter()
        .map(|s| pack(s, &vocab, limits))
        .collect::<Result<_, _>>()?;
    let batches = group_by_length(&packed, 8192)?;
    let tokens: usize = batches.iter().map(|b| b.token_count()).sum();
    println!("batches: {}, {} tokens per epoch", batches.len(), tokens);

    let config = ModelConfig::tiny();
    let steps = 2000;
    let mut session = TrainSession::new(
        init_params(&config, 0)?,
        batches,
        ScheduleConfig {
            warmup_steps: 200,
            total_steps: steps,
            peak_lr: 2e-3,
        },
        AdamConfig::default(),
    )?;

    let started = std::time::Instant::now();
    for step in 1..=steps {
        let m = session.step()?;
        if step % 200 == 0 || step == 1 {
            println!(
                "step {:>4}  lr {:.2e}  loss {:.4}  ({:.1}s)",
                m.step,
                m.lr,
                m.loss,
                started.elapsed().as_secs_f64()
            );
        }
    }

    let report = perplexity(&corpus.samples, &session.params, &vocab, limits, 8192)?;
    println!("final: {:.4} nats/token, ppl {:.3}", report.nll, report.ppl);

    let cfg = DecodeConfig {
        strategy: DecodeStrategy::Greedy,
        max_new_tokens: 48,
        ..DecodeConfig::default()
    };
    let mut verbatim = 0;
    for sample in &corpus.samples {
        let out = generate(
            &sample.context,
            &sample.response.user,
            &session.params,
            &vocab,
            limits,
            &cfg,
        )?;
        if out == sample.response.text {
            verbatim += 1;
        }
    }
    println!(
        "greedy replay: {verbatim}/{} training responses verbatim in {:.1}s total",
        corpus.samples.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
