//! Command-line entry point wiring corpus -> tokenizer -> train -> eval/chat.

use clap::Parser;

/// Parse argv and run. Exit code 0 on success, 1 on usage errors, 2 on
/// runtime errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_logging();
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    }
}

/// Verbosity comes only from the PALAVER_LOG environment variable
/// (error|warn|info|debug|trace); default is warn.
fn init_logging() {
    let env = env_logger::Env::new()
        .filter("PALAVER_LOG")
        .default_filter_or("warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

mod args {
    use clap::{Args, Parser, Subcommand};
    use std::path::PathBuf;

    #[derive(Parser, Debug)]
    #[command(
        name = "palaver",
        version,
        about = "Train and poke small dialogue models built from threaded conversations"
    )]
    pub struct Cli {
        #[command(subcommand)]
        pub command: Command,
    }

    #[derive(Subcommand, Debug)]
    pub enum Command {
        /// Build a training corpus from raw comment records
        Corpus {
            #[command(subcommand)]
            command: CorpusCommand,
        },
        /// Train or apply a BPE vocabulary
        Tokenizer {
            #[command(subcommand)]
            command: TokenizerCommand,
        },
        /// Pack samples into batches and inspect batch dumps
        Batch {
            #[command(subcommand)]
            command: BatchCommand,
        },
        /// Train a model on a built corpus
        Train(TrainArgs),
        /// Evaluate perplexity on a sample file
        Eval(EvalArgs),
        /// Run a self-chat from a topic
        Chat(ChatArgs),
    }

    #[derive(Subcommand, Debug)]
    pub enum CorpusCommand {
        /// records (JSONL) -> trees -> cleaned samples (JSONL)
        Build(CorpusBuildArgs),
    }

    #[derive(Args, Debug)]
    pub struct CorpusBuildArgs {
        /// Input comment records, one JSON object per line
        #[arg(long = "in")]
        pub input: PathBuf,
        /// Output sample file
        #[arg(long)]
        pub out: PathBuf,
        /// Minimum response length in whitespace tokens (0 disables)
        #[arg(long = "min-len", default_value_t = 2)]
        pub min_len: usize,
        /// Maximum turn length in whitespace tokens (0 disables)
        #[arg(long = "max-turn-len", default_value_t = 128)]
        pub max_turn_len: usize,
        /// File with one blocked token per line
        #[arg(long)]
        pub blocklist: Option<PathBuf>,
        /// Keep URL-looking tokens instead of stripping them
        #[arg(long)]
        pub keep_urls: bool,
        /// Highest role id; later speakers share the overflow bucket
        #[arg(long = "role-cap", default_value_t = 8)]
        pub role_cap: u32,
        /// Where to write ingestion statistics as JSON
        #[arg(long)]
        pub stats: Option<PathBuf>,
    }

    #[derive(Subcommand, Debug)]
    pub enum TokenizerCommand {
        /// Learn a vocabulary from text or sample files
        Train {
            /// Training text: sample JSONL (context/response) or plain text
            #[arg(long = "in")]
            input: PathBuf,
            /// Target vocabulary size including specials
            #[arg(long)]
            size: usize,
            /// Output vocabulary file
            #[arg(long)]
            out: PathBuf,
        },
        /// Encode text to token ids
        Encode {
            #[arg(long)]
            vocab: PathBuf,
            /// Text to encode; reads stdin when omitted
            #[arg(long)]
            text: Option<String>,
        },
        /// Decode comma-separated token ids to text
        Decode {
            #[arg(long)]
            vocab: PathBuf,
            /// Ids like "17,4,99"
            #[arg(long)]
            ids: String,
        },
    }

    #[derive(Subcommand, Debug)]
    pub enum BatchCommand {
        /// Pack a sample file into batch dumps
        Pack {
            #[arg(long)]
            corpus: PathBuf,
            #[arg(long)]
            vocab: PathBuf,
            #[arg(long, default_value_t = 8192)]
            budget: usize,
            #[arg(long = "max-context", default_value_t = 256)]
            max_context: usize,
            #[arg(long = "max-response", default_value_t = 64)]
            max_response: usize,
            /// Directory for batch_NNNN.bin files
            #[arg(long)]
            out: PathBuf,
        },
        /// Print a batch dump: ids per row plus 0/1 mask grids
        Inspect {
            #[arg(long = "in")]
            input: PathBuf,
            /// Only print this row
            #[arg(long)]
            row: Option<usize>,
            /// Also print the full attention mask grid per row
            #[arg(long)]
            masks: bool,
        },
    }

    #[derive(Args, Debug)]
    pub struct TrainArgs {
        /// Sample file produced by `corpus build`
        #[arg(long)]
        pub corpus: PathBuf,
        /// Vocabulary produced by `tokenizer train`
        #[arg(long)]
        pub vocab: PathBuf,
        /// Flat JSON config; flags given here override it
        #[arg(long)]
        pub config: Option<PathBuf>,
        /// Output directory (checkpoints, metrics.csv, config echo)
        #[arg(long)]
        pub out: PathBuf,
        #[arg(long)]
        pub steps: Option<u64>,
        #[arg(long)]
        pub seed: Option<u64>,
        /// Resume from the checkpoint written at this step in --out
        #[arg(long)]
        pub resume_from: Option<u64>,
        #[command(flatten)]
        pub overrides: ConfigOverrides,
    }

    /// Flag-level overrides for AppConfig fields.
    #[derive(Args, Debug, Default)]
    pub struct ConfigOverrides {
        #[arg(long)]
        pub n_layers: Option<usize>,
        #[arg(long)]
        pub n_heads: Option<usize>,
        #[arg(long)]
        pub d_model: Option<usize>,
        #[arg(long)]
        pub d_ff: Option<usize>,
        #[arg(long)]
        pub vocab_size: Option<usize>,
        #[arg(long)]
        pub token_budget: Option<usize>,
        #[arg(long)]
        pub peak_lr: Option<f64>,
        #[arg(long)]
        pub warmup_steps: Option<u64>,
        #[arg(long)]
        pub max_context: Option<usize>,
        #[arg(long)]
        pub max_response: Option<usize>,
        #[arg(long)]
        pub checkpoint_interval: Option<u64>,
        #[arg(long)]
        pub eval_interval: Option<u64>,
    }

    #[derive(Args, Debug)]
    pub struct EvalArgs {
        /// Model checkpoint
        #[arg(long)]
        pub model: PathBuf,
        #[arg(long)]
        pub vocab: PathBuf,
        /// Sample file to score
        #[arg(long)]
        pub corpus: PathBuf,
        #[arg(long, default_value_t = 8192)]
        pub budget: usize,
        #[arg(long = "max-context", default_value_t = 256)]
        pub max_context: usize,
        #[arg(long = "max-response", default_value_t = 64)]
        pub max_response: usize,
    }

    #[derive(Args, Debug)]
    pub struct ChatArgs {
        /// Model checkpoint
        #[arg(long)]
        pub model: PathBuf,
        #[arg(long)]
        pub vocab: PathBuf,
        /// Opening line for the conversation
        #[arg(long)]
        pub topic: Option<String>,
        /// File of one-line openers; picked by --topic-index
        #[arg(long)]
        pub topics_file: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        pub topic_index: usize,
        #[arg(long, default_value_t = 5)]
        pub rounds: u32,
        /// greedy | top_k | top_p
        #[arg(long, default_value = "top_p")]
        pub strategy: String,
        #[arg(long, default_value_t = 40)]
        pub k: usize,
        #[arg(long, default_value_t = 0.9)]
        pub p: f64,
        #[arg(long, default_value_t = 0.9)]
        pub temperature: f64,
        #[arg(long = "max-new-tokens", default_value_t = 48)]
        pub max_new_tokens: usize,
        #[arg(long, default_value_t = 0)]
        pub seed: u64,
        /// Write the transcript as JSONL here
        #[arg(long)]
        pub out: Option<PathBuf>,
    }
}

mod commands {
    use super::args::*;
    use crate::batching::{self, PackLimits};
    use crate::corpus::{self, CleaningConfig};
    use crate::inference::{self, DecodeConfig, DecodeStrategy};
    use crate::model::{init_params, ModelConfig};
    use crate::tensorfile;
    use crate::tokenizer;
    use crate::training::{self, AdamConfig, ScheduleConfig, TrainSession};
    use anyhow::{bail, Context, Result};
    use serde::{Deserialize, Serialize};
    use std::io::Read;
    use std::path::Path;

    pub fn run(cli: Cli) -> Result<()> {
        match cli.command {
            Command::Corpus { command } => match command {
                CorpusCommand::Build(args) => corpus_build(args),
            },
            Command::Tokenizer { command } => tokenizer_cmd(command),
            Command::Batch { command } => batch_cmd(command),
            Command::Train(args) => train(args),
            Command::Eval(args) => eval(args),
            Command::Chat(args) => chat(args),
        }
    }

    fn corpus_build(args: CorpusBuildArgs) -> Result<()> {
        let records = corpus::read_comment_file(&args.input)
            .with_context(|| format!("reading {}", args.input.display()))?;
        let blocklist = match &args.blocklist {
            Some(path) => std::fs::read_to_string(path)
                .with_context(|| format!("reading blocklist {}", path.display()))?
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect(),
            None => Vec::new(),
        };
        let rules = CleaningConfig {
            min_response_tokens: (args.min_len > 0).then_some(args.min_len),
            max_turn_tokens: (args.max_turn_len > 0).then_some(args.max_turn_len),
            strip_urls: !args.keep_urls,
            blocklist,
            ..CleaningConfig::default()
        };
        let build = corpus::build_corpus(records, &rules, args.role_cap);
        let out = std::fs::File::create(&args.out)
            .with_context(|| format!("creating {}", args.out.display()))?;
        corpus::write_samples(std::io::BufWriter::new(out), &build.samples)?;
        if let Some(stats_path) = &args.stats {
            std::fs::write(stats_path, serde_json::to_string_pretty(&build.stats)?)?;
        }
        println!(
            "kept {} samples from {} records ({} trees); dropped: {} dup, {} orphan, {} cleaned out",
            build.stats.samples_kept,
            build.stats.records,
            build.stats.trees,
            build.stats.duplicates,
            build.stats.orphans,
            build.stats.samples_extracted - build.stats.samples_kept,
        );
        Ok(())
    }

    /// Pull trainable text out of a sample JSONL file, or fall back to plain
    /// lines for ordinary text files.
    fn training_text(path: &Path) -> Result<Vec<String>> {
        let content =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        match corpus::read_samples(std::io::Cursor::new(content.as_bytes())) {
            Ok(samples) if !samples.is_empty() => Ok(samples
                .iter()
                .flat_map(|s| {
                    s.context
                        .iter()
                        .map(|t| t.text.clone())
                        .chain(std::iter::once(s.response.text.clone()))
                })
                .collect()),
            _ => Ok(content.lines().map(|l| l.to_string()).collect()),
        }
    }

    fn tokenizer_cmd(command: TokenizerCommand) -> Result<()> {
        match command {
            TokenizerCommand::Train { input, size, out } => {
                let lines = training_text(&input)?;
                let vocab = tokenizer::train_bpe(lines.iter(), size)?;
                tokenizer::save_vocab(&vocab, &out)?;
                println!(
                    "vocabulary: {} tokens ({} merges) -> {}",
                    vocab.size(),
                    vocab.merges().len(),
                    out.display()
                );
            }
            TokenizerCommand::Encode { vocab, text } => {
                let vocab = tokenizer::load_vocab(&vocab)?;
                let text = match text {
                    Some(t) => t,
                    None => {
                        let mut buf = String::new();
                        std::io::stdin().read_to_string(&mut buf)?;
                        buf.truncate(buf.trim_end_matches('\n').len());
                        buf
                    }
                };
                let ids = tokenizer::encode(&text, &vocab);
                println!(
                    "{}",
                    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
                );
            }
            TokenizerCommand::Decode { vocab, ids } => {
                let vocab = tokenizer::load_vocab(&vocab)?;
                let ids: Vec<u32> = ids
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse().context("ids must be integers"))
                    .collect::<Result<_>>()?;
                println!("{}", tokenizer::decode(&ids, &vocab)?);
            }
        }
        Ok(())
    }

    fn batch_cmd(command: BatchCommand) -> Result<()> {
        match command {
            BatchCommand::Pack {
                corpus: corpus_path,
                vocab,
                budget,
                max_context,
                max_response,
                out,
            } => {
                let samples = corpus::read_sample_file(&corpus_path)?;
                let vocab = tokenizer::load_vocab(&vocab)?;
                let limits = PackLimits {
                    max_context_tokens: max_context,
                    max_response_tokens: max_response,
                };
                let packed: Vec<_> = samples
                    .iter()
                    .map(|s| batching::pack(s, &vocab, limits))
                    .collect::<Result<_, _>>()?;
                let batches = batching::group_by_length(&packed, budget)?;
                std::fs::create_dir_all(&out)?;
                for (i, batch) in batches.iter().enumerate() {
                    batching::write_batch_file(&out.join(format!("batch_{i:04}.bin")), batch)?;
                }
                println!(
                    "{} batches, padding ratio {:.4}",
                    batches.len(),
                    batching::padding_ratio(&batches)
                );
            }
            BatchCommand::Inspect { input, row, masks } => {
                let batch = batching::read_batch_file(&input)?;
                println!(
                    "batch: {} rows x {} positions, {} pad slots (ratio {:.4})",
                    batch.rows,
                    batch.max_len,
                    batch.pad_count,
                    batch.pad_ratio()
                );
                let rows: Vec<usize> = match row {
                    Some(r) if r < batch.rows => vec![r],
                    Some(r) => bail!("row {r} out of range ({} rows)", batch.rows),
                    None => (0..batch.rows).collect(),
                };
                for r in rows {
                    let (c, resp) = batch.row_spans[r];
                    let len = batch.row_len(r);
                    println!("row {r}: context {c} + response {resp} (+BOS/EOS) = {len}");
                    let base = r * batch.max_len;
                    let fmt = |name: &str, ids: &[u32]| {
                        println!(
                            "  {name:<9} {}",
                            ids[base..base + len]
                                .iter()
                                .map(|v| v.to_string())
                                .collect::<Vec<_>>()
                                .join(" ")
                        );
                    };
                    fmt("tokens", &batch.token_ids);
                    fmt("positions", &batch.position_ids);
                    fmt("types", &batch.type_ids);
                    fmt("roles", &batch.role_ids);
                    println!(
                        "  loss      {}",
                        batch.loss_mask[base..base + len]
                            .iter()
                            .map(|v| v.to_string())
                            .collect::<Vec<_>>()
                            .join(" ")
                    );
                    if masks {
                        println!("  attention mask:");
                        let mbase = r * batch.max_len * batch.max_len;
                        for i in 0..len {
                            let line: String = (0..len)
                                .map(|j| {
                                    if batch.attention_mask[mbase + i * batch.max_len + j] == 1 {
                                        '1'
                                    } else {
                                        '0'
                                    }
                                })
                                .collect();
                            println!("    {line}");
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Flat run configuration. Unknown keys are rejected; flags win over the
    /// file; the effective result is echoed to the run directory.
    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(deny_unknown_fields, default)]
    pub struct AppConfig {
        // model
        pub n_layers: usize,
        pub n_heads: usize,
        pub d_model: usize,
        pub d_ff: usize,
        pub vocab_size: usize,
        pub n_types: usize,
        pub n_roles: usize,
        pub max_positions: usize,
        pub tie_output: bool,
        pub init_seed: u64,
        // packing
        pub max_context_tokens: usize,
        pub max_response_tokens: usize,
        pub token_budget: usize,
        // optimization
        pub steps: u64,
        pub warmup_steps: u64,
        pub peak_lr: f64,
        pub beta1: f64,
        pub beta2: f64,
        pub adam_eps: f64,
        pub grad_clip: f64,
        pub seed: u64,
        pub eval_interval: u64,
        pub checkpoint_interval: u64,
    }

    impl Default for AppConfig {
        fn default() -> Self {
            let model = ModelConfig::tiny();
            Self {
                n_layers: model.n_layers,
                n_heads: model.n_heads,
                d_model: model.d_model,
                d_ff: model.d_ff,
                vocab_size: model.vocab_size,
                n_types: model.n_types,
                n_roles: model.n_roles,
                max_positions: model.max_positions,
                tie_output: model.tie_output,
                init_seed: 0,
                max_context_tokens: 256,
                max_response_tokens: 64,
                token_budget: 8192,
                steps: 2000,
                warmup_steps: 200,
                peak_lr: 2e-3,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                grad_clip: 1.0,
                seed: 0,
                eval_interval: 0,
                checkpoint_interval: 0,
            }
        }
    }

    impl AppConfig {
        fn model_config(&self) -> ModelConfig {
            ModelConfig {
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                d_model: self.d_model,
                d_ff: self.d_ff,
                vocab_size: self.vocab_size,
                n_types: self.n_types,
                n_roles: self.n_roles,
                max_positions: self.max_positions,
                tie_output: self.tie_output,
                init_seed: self.init_seed,
            }
        }

        fn limits(&self) -> PackLimits {
            PackLimits {
                max_context_tokens: self.max_context_tokens,
                max_response_tokens: self.max_response_tokens,
            }
        }
    }

    fn load_app_config(path: Option<&Path>) -> Result<AppConfig> {
        match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
            None => Ok(AppConfig::default()),
        }
    }

    fn train(args: TrainArgs) -> Result<()> {
        let mut cfg = load_app_config(args.config.as_deref())?;
        let o = &args.overrides;
        macro_rules! override_field {
            ($flag:expr, $field:ident) => {
                if let Some(v) = $flag {
                    cfg.$field = v;
                }
            };
        }
        override_field!(o.n_layers, n_layers);
        override_field!(o.n_heads, n_heads);
        override_field!(o.d_model, d_model);
        override_field!(o.d_ff, d_ff);
        override_field!(o.vocab_size, vocab_size);
        override_field!(o.token_budget, token_budget);
        override_field!(o.peak_lr, peak_lr);
        override_field!(o.warmup_steps, warmup_steps);
        override_field!(o.max_context, max_context_tokens);
        override_field!(o.max_response, max_response_tokens);
        override_field!(o.checkpoint_interval, checkpoint_interval);
        override_field!(o.eval_interval, eval_interval);
        override_field!(args.steps, steps);
        override_field!(args.seed, seed);

        // Validate everything up front.
        let model_config = cfg.model_config();
        model_config.validate()?;
        let schedule = ScheduleConfig {
            warmup_steps: cfg.warmup_steps,
            total_steps: cfg.steps,
            peak_lr: cfg.peak_lr,
        };
        schedule.validate()?;
        if cfg.token_budget == 0 {
            bail!("token_budget must be positive");
        }

        let samples = corpus::read_sample_file(&args.corpus)?;
        let vocab = tokenizer::load_vocab(&args.vocab)?;
        if vocab.size() > model_config.vocab_size {
            bail!(
                "vocabulary has {} tokens but the model table holds {}",
                vocab.size(),
                model_config.vocab_size
            );
        }
        let packed: Vec<_> = samples
            .iter()
            .map(|s| batching::pack(s, &vocab, cfg.limits()))
            .collect::<Result<_, _>>()?;
        let batches = batching::group_by_length(&packed, cfg.token_budget)?;

        std::fs::create_dir_all(&args.out)
            .with_context(|| format!("creating {}", args.out.display()))?;
        std::fs::write(
            args.out.join("config.json"),
            serde_json::to_string_pretty(&cfg)?,
        )?;

        let (params, opt) = match args.resume_from {
            Some(step) => training::load_checkpoint(&args.out.join("ckpt"), step)?,
            None => {
                let params = init_params(&model_config, cfg.seed)?;
                let adam = AdamConfig {
                    beta1: cfg.beta1,
                    beta2: cfg.beta2,
                    eps: cfg.adam_eps,
                    grad_clip: (cfg.grad_clip > 0.0).then_some(cfg.grad_clip),
                    };
                let opt = training::OptimizerState::new(&params, adam);
                (params, opt)
            }
        };

        let mut session = TrainSession::with_state(params, opt, batches, schedule)?;
        let report = training::run(
            &mut session,
            &training::RunOptions {
                steps: cfg.steps,
                checkpoint_interval: cfg.checkpoint_interval,
                checkpoint_dir: Some(args.out.join("ckpt")),
                metrics_path: Some(args.out.join("metrics.csv")),
                eval_interval: cfg.eval_interval,
                log_every: 100,
            },
        )?;
        tensorfile::save_model(&args.out.join("model_final.bin"), &session.params)?;
        println!(
            "trained to step {} (loss {:.4} nats/token, {} skipped); final model at {}",
            report.final_step,
            report.final_loss,
            report.skipped_steps,
            args.out.join("model_final.bin").display()
        );
        Ok(())
    }

    fn eval(args: EvalArgs) -> Result<()> {
        let params = tensorfile::load_model(&args.model)?;
        let vocab = tokenizer::load_vocab(&args.vocab)?;
        let samples = corpus::read_sample_file(&args.corpus)?;
        let limits = PackLimits {
            max_context_tokens: args.max_context,
            max_response_tokens: args.max_response,
        };
        let report = inference::perplexity(&samples, &params, &vocab, limits, args.budget)?;
        println!(
            "nll {:.4} nats/token over {} tokens; ppl {:.2}",
            report.nll, report.tokens, report.ppl
        );
        Ok(())
    }

    fn chat(args: ChatArgs) -> Result<()> {
        let params = tensorfile::load_model(&args.model)?;
        let vocab = tokenizer::load_vocab(&args.vocab)?;
        let topic = match (&args.topic, &args.topics_file) {
            (Some(t), _) => t.clone(),
            (None, Some(path)) => {
                let topics = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let lines: Vec<&str> = topics.lines().filter(|l| !l.trim().is_empty()).collect();
                if lines.is_empty() {
                    bail!("topics file {} is empty", path.display());
                }
                lines[args.topic_index % lines.len()].to_string()
            }
            (None, None) => bail!("provide --topic or --topics-file"),
        };
        let strategy = match args.strategy.as_str() {
            "greedy" => DecodeStrategy::Greedy,
            "top_k" => DecodeStrategy::TopK,
            "top_p" => DecodeStrategy::TopP,
            other => bail!("unknown strategy {other:?} (greedy|top_k|top_p)"),
        };
        let cfg = DecodeConfig {
            strategy,
            top_k: args.k,
            top_p: args.p,
            temperature: args.temperature,
            max_new_tokens: args.max_new_tokens,
            seed: args.seed,
        };
        let limits = PackLimits::default();
        let chat = inference::self_chat(&topic, args.rounds, &params, &vocab, limits, &cfg)?;
        for turn in &chat.turns {
            println!("[round {}] {}: {}", turn.round, turn.speaker, turn.text);
        }
        if let Some(out) = &args.out {
            let file = std::fs::File::create(out)?;
            inference::write_transcript(std::io::BufWriter::new(file), &chat)?;
            println!("transcript -> {}", out.display());
        }
        Ok(())
    }
}

pub use commands::AppConfig;
