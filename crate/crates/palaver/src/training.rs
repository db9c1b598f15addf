//! Optimization: bias-corrected Adam with global-norm clipping, a linear
//! warmup/decay schedule, the deterministic training loop, and resumable
//! checkpointing.
//!
//! Batches run in a fixed cycle, parameters and moments are quantized to f32
//! after every update, and checkpoints store those f32 values exactly; a run
//! resumed from step k therefore continues bit-identically to the unbroken
//! run on the same platform.

use crate::batching::Batch;
use crate::model::{backward, forward, nll_loss, ModelError, ModelParameters, Tensor};
use crate::tensorfile::{self, TensorFileError};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid schedule: warmup {warmup} must be below total steps {total}")]
    BadSchedule { warmup: u64, total: u64 },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("gradient shape mismatch on {0}")]
    ShapeMismatch(String),
    #[error("no batches to train on")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] TensorFileError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Linear warmup to `peak_lr` over `warmup_steps`, then linear decay to zero
/// at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub peak_lr: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_steps >= self.total_steps {
            return Err(TrainError::BadSchedule {
                warmup: self.warmup_steps,
                total: self.total_steps,
            });
        }
        if self.peak_lr <= 0.0 {
            return Err(TrainError::BadConfig("peak_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Piecewise-linear learning rate: 0 at step 0, exactly `peak_lr` at
/// `warmup_steps`, 0 from `total_steps` on.
pub fn lr_at(step: u64, sched: &ScheduleConfig) -> f64 {
    if step <= sched.warmup_steps {
        return sched.peak_lr * step as f64 / sched.warmup_steps as f64;
    }
    if step >= sched.total_steps {
        return 0.0;
    }
    let remaining = (sched.total_steps - step) as f64;
    let span = (sched.total_steps - sched.warmup_steps) as f64;
    sched.peak_lr * remaining / span
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip applied before the update; `None` disables.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
        }
    }
}

/// First/second moment buffers shaped like the parameters, plus counters.
/// `step` counts consumed optimization slots (it drives the schedule and the
/// batch cycle); `applied` counts updates that actually landed and feeds the
/// bias correction; `skipped` counts slots lost to non-finite gradients.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: ModelParameters,
    pub v: ModelParameters,
    pub step: u64,
    pub applied: u64,
    pub skipped: u64,
    pub adam: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &ModelParameters, adam: AdamConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            applied: 0,
            skipped: 0,
            adam,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

/// One bias-corrected Adam update at the given learning rate. Non-finite
/// gradients skip the update entirely (moments untouched) and bump the skip
/// counter. Parameters and moments are f32-quantized afterwards.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &ModelParameters,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<StepOutcome, TrainError> {
    {
        let p = params.named_tensors();
        let g = grads.named_tensors();
        if p.len() != g.len() {
            return Err(TrainError::ShapeMismatch("tensor count".into()));
        }
        for ((name, pt), (_, gt)) in p.iter().zip(g.iter()) {
            if pt.shape != gt.shape {
                return Err(TrainError::ShapeMismatch(name.clone()));
            }
        }
    }

    let mut sq_norm = 0.0f64;
    let mut finite = true;
    for (_, gt) in grads.named_tensors() {
        for &g in &gt.data {
            if !g.is_finite() {
                finite = false;
            }
            sq_norm += g * g;
        }
    }
    if !finite {
        state.step += 1;
        state.skipped += 1;
        return Ok(StepOutcome::SkippedNonFinite);
    }
    let clip_scale = match state.adam.grad_clip {
        Some(clip) if sq_norm.sqrt() > clip => clip / sq_norm.sqrt(),
        _ => 1.0,
    };

    state.step += 1;
    state.applied += 1;
    let t = state.applied as i32;
    let adam = state.adam;
    let bc1 = 1.0 - adam.beta1.powi(t);
    let bc2 = 1.0 - adam.beta2.powi(t);

    let mut p_tensors = params.named_tensors_mut();
    let g_tensors = grads.named_tensors();
    let mut m_tensors = state.m.named_tensors_mut();
    let mut v_tensors = state.v.named_tensors_mut();
    for i in 0..p_tensors.len() {
        let p = &mut p_tensors[i].1.data;
        let g = &g_tensors[i].1.data;
        let m = &mut m_tensors[i].1.data;
        let v = &mut v_tensors[i].1.data;
        for j in 0..p.len() {
            let gj = g[j] * clip_scale;
            m[j] = adam.beta1 * m[j] + (1.0 - adam.beta1) * gj;
            v[j] = adam.beta2 * v[j] + (1.0 - adam.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + adam.eps);
            // Write-through f32 storage keeps checkpoints lossless.
            p[j] = p[j] as f32 as f64;
            m[j] = m[j] as f32 as f64;
            v[j] = v[j] as f32 as f64;
        }
    }
    drop(p_tensors);
    params.revision += 1;
    Ok(StepOutcome::Applied)
}

/// Run-level settings. Paper-scale numbers (2M-token batches, a 150B-token
/// budget) validate; the tiny defaults are what the tests use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub token_budget: usize,
    pub total_tokens: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.token_budget == 0 {
            return Err(TrainError::BadConfig("token_budget must be positive".into()));
        }
        if self.total_tokens == 0 {
            return Err(TrainError::BadConfig("total_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Steps needed to push `total_tokens` through the fixed batch cycle.
    pub fn steps_for_batches(&self, batches: &[Batch]) -> u64 {
        let mut steps = 0u64;
        let mut tokens = 0u64;
        while tokens < self.total_tokens {
            let b = &batches[(steps % batches.len() as u64) as usize];
            tokens += b.token_count() as u64;
            steps += 1;
        }
        steps
    }
}

/// Metrics for one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub tokens: usize,
    pub pad_ratio: f64,
    pub seconds: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let tokens_per_s = if self.seconds > 0.0 {
            self.tokens as f64 / self.seconds
        } else {
            0.0
        };
        format!(
            "{},{},{},{:.1},{}",
            self.step, self.lr, self.loss, tokens_per_s, self.pad_ratio
        )
    }
}

pub const METRICS_HEADER: &str = "step,lr,loss,tokens_per_s,pad_ratio";

/// A model, its optimizer, and the fixed batch cycle it trains on.
pub struct TrainSession {
    pub params: ModelParameters,
    pub opt: OptimizerState,
    pub batches: Vec<Batch>,
    pub schedule: ScheduleConfig,
}

impl TrainSession {
    pub fn new(
        params: ModelParameters,
        batches: Vec<Batch>,
        schedule: ScheduleConfig,
        adam: AdamConfig,
    ) -> Result<Self, TrainError> {
        if batches.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        schedule.validate()?;
        let opt = OptimizerState::new(&params, adam);
        Ok(Self {
            params,
            opt,
            batches,
            schedule,
        })
    }

    /// Rebuild a session around checkpointed parameters and optimizer state.
    pub fn with_state(
        params: ModelParameters,
        opt: OptimizerState,
        batches: Vec<Batch>,
        schedule: ScheduleConfig,
    ) -> Result<Self, TrainError> {
        if batches.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        schedule.validate()?;
        Ok(Self {
            params,
            opt,
            batches,
            schedule,
        })
    }

    /// Forward, loss, backward, clip, Adam; returns this step's metrics.
    pub fn step(&mut self) -> Result<StepMetrics, TrainError> {
        let started = Instant::now();
        let idx = (self.opt.step % self.batches.len() as u64) as usize;
        let batch = &self.batches[idx];
        let trace = forward(batch, &self.params)?;
        let (loss, _) = nll_loss(&trace, batch)?;
        let grads = backward(&trace, batch, &self.params)?;
        let lr = lr_at(self.opt.step + 1, &self.schedule);
        adam_step(&mut self.params, &grads, &mut self.opt, lr)?;
        Ok(StepMetrics {
            step: self.opt.step,
            lr,
            loss,
            tokens: self.batches[idx].token_count(),
            pad_ratio: self.batches[idx].pad_ratio(),
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Mean NLL per token over the whole batch cycle with current weights.
    pub fn evaluate(&self) -> Result<f64, TrainError> {
        let mut weighted = 0.0;
        let mut count = 0usize;
        for batch in &self.batches {
            let trace = forward(batch, &self.params)?;
            let (loss, _) = nll_loss(&trace, batch)?;
            let tokens: usize = batch.loss_mask.iter().map(|&m| m as usize).sum();
            weighted += loss * tokens as f64;
            count += tokens;
        }
        Ok(weighted / count as f64)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), TrainError> {
        save_checkpoint(dir, &self.params, &self.opt)
    }
}

fn checkpoint_names(dir: &Path, step: u64) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("model_{step:08}.bin")),
        dir.join(format!("optim_{step:08}.bin")),
    )
}

pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParameters,
    opt: &OptimizerState,
) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    let (model_path, optim_path) = checkpoint_names(dir, opt.step);
    tensorfile::save_model(&model_path, params)?;

    let header = serde_json::json!({
        "format": "adam",
        "step": opt.step,
        "applied": opt.applied,
        "skipped": opt.skipped,
        "adam": opt.adam,
    });
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in opt.m.named_tensors() {
        tensors.push((format!("m.{name}"), t));
    }
    for (name, t) in opt.v.named_tensors() {
        tensors.push((format!("v.{name}"), t));
    }
    let file = std::fs::File::create(optim_path)?;
    tensorfile::write_tensors(std::io::BufWriter::new(file), &header, &tensors)?;
    Ok(())
}

pub fn load_checkpoint(
    dir: &Path,
    step: u64,
) -> Result<(ModelParameters, OptimizerState), TrainError> {
    let (model_path, optim_path) = checkpoint_names(dir, step);
    let params = tensorfile::load_model(&model_path)?;

    let file = std::fs::File::open(optim_path)?;
    let (header, tensors) = tensorfile::read_tensors(std::io::BufReader::new(file))?;
    let corrupt = |m: &str| TrainError::Checkpoint(TensorFileError::Corrupt(m.to_string()));
    if header.get("format").and_then(|f| f.as_str()) != Some("adam") {
        return Err(corrupt("not an optimizer checkpoint"));
    }
    let adam: AdamConfig = serde_json::from_value(
        header
            .get("adam")
            .cloned()
            .ok_or_else(|| corrupt("missing adam config"))?,
    )
    .map_err(TensorFileError::Header)?;
    let mut opt = OptimizerState::new(&params, adam);
    opt.step = header.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
    opt.applied = header.get("applied").and_then(|v| v.as_u64()).unwrap_or(opt.step);
    opt.skipped = header.get("skipped").and_then(|v| v.as_u64()).unwrap_or(0);

    let split = tensors.len() / 2;
    let strip = |prefix: &str, pairs: &[(String, Tensor)]| -> Vec<(String, Tensor)> {
        pairs
            .iter()
            .map(|(n, t)| (n.strip_prefix(prefix).unwrap_or(n).to_string(), t.clone()))
            .collect()
    };
    tensorfile::fill_from_tensors(&mut opt.m, &strip("m.", &tensors[..split]))?;
    tensorfile::fill_from_tensors(&mut opt.v, &strip("v.", &tensors[split..]))?;
    Ok((params, opt))
}

/// Options for [`run`].
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub steps: u64,
    pub checkpoint_interval: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub eval_interval: u64,
    pub log_every: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            steps: 0,
            checkpoint_interval: 0,
            checkpoint_dir: None,
            metrics_path: None,
            eval_interval: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunReport {
    pub final_step: u64,
    pub final_loss: f64,
    pub skipped_steps: u64,
}

/// Drive a session until `opts.steps`, appending metrics rows and writing
/// periodic checkpoints (plus one at the end).
pub fn run(session: &mut TrainSession, opts: &RunOptions) -> Result<RunReport, TrainError> {
    let mut metrics: Option<std::io::BufWriter<std::fs::File>> = match &opts.metrics_path {
        Some(path) => {
            let fresh = !path.exists();
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?;
            let mut w = std::io::BufWriter::new(file);
            if fresh {
                writeln!(w, "{METRICS_HEADER}")?;
            }
            Some(w)
        }
        None => None,
    };

    let mut last_loss = f64::NAN;
    while session.opt.step < opts.steps {
        let m = session.step()?;
        last_loss = m.loss;
        if let Some(w) = &mut metrics {
            writeln!(w, "{}", m.csv_row())?;
        }
        if opts.log_every > 0 && m.step % opts.log_every == 0 {
            log::info!(
                "step {} lr {:.3e} loss {:.4} pad {:.3}",
                m.step,
                m.lr,
                m.loss,
                m.pad_ratio
            );
        }
        if opts.eval_interval > 0 && m.step % opts.eval_interval == 0 {
            let eval = session.evaluate()?;
            log::info!("eval at step {}: {:.4} nats/token", m.step, eval);
        }
        if opts.checkpoint_interval > 0 && m.step % opts.checkpoint_interval == 0 {
            if let Some(dir) = &opts.checkpoint_dir {
                session.save_checkpoint(dir)?;
            }
        }
    }
    if let Some(dir) = &opts.checkpoint_dir {
        session.save_checkpoint(dir)?;
    }
    if let Some(w) = &mut metrics {
        w.flush()?;
    }
    Ok(RunReport {
        final_step: session.opt.step,
        final_loss: last_loss,
        skipped_steps: session.opt.skipped,
    })
}
