//! Training loop: all-zero-codeword batches, flip loss, Adam with cosine decay.
//!
//! Every batch is a pure function of `(seed, global batch index)`, and
//! micro-batch gradients are summed in a fixed order, so an interrupted run
//! resumed from its checkpoint follows the uninterrupted trajectory bit for bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{self, ChannelError, ChannelSample, CodewordPolicy, NoiseSpec};
use crate::checkpoint::{Checkpoint, CheckpointError, StoredCode};
use crate::code::{Code, CodeError};
use crate::ensemble::{build_ensemble, EnsembleError};
use crate::gf2::max_shift;
use crate::model::{Batch, CodeContext, CodeDims, Model, ModelConfig, ModelError, Variant};
use crate::optim::{adam_step, clip_global_norm, cosine_lr, AdamConfig, AdamState, OptimError, DEFAULT_LR0, DEFAULT_LR_MIN};
use crate::registry;
use crate::tensor::{softplus, TensorError};

const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0001;
const CODE_STREAM: u64 = 0x636f_6465_0000_0002;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step} (epoch {epoch}, code {code})")]
    NonFinite { loss: f64, step: u64, epoch: usize, code: String },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeSampling {
    Uniform,
    /// Weighted by code length.
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub ebn0_range: (f64, f64),
    pub codes: Vec<String>,
    pub code_sampling: CodeSampling,
    pub seed: u64,
    /// Epochs between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub grad_clip: Option<f64>,
    /// Samples per gradient work unit. Fixes the reduction order, so it is
    /// part of the trajectory while the worker count is not.
    pub micro_batch: usize,
    /// Branch count for ensemble models; `None` uses enough to cover every bit.
    pub ensemble_p: Option<usize>,
}

impl TrainConfig {
    /// CPU-sized run: 20 epochs of 200 batches of 128.
    pub fn desk(codes: Vec<String>) -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batches_per_epoch: 200,
            batch_size: 128,
            lr0: DEFAULT_LR0,
            lr_min: DEFAULT_LR_MIN,
            ebn0_range: (3.0, 7.0),
            codes,
            code_sampling: CodeSampling::Uniform,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: Some(1.0),
            micro_batch: 32,
            ensemble_p: None,
        }
    }

    /// Full-length recipe: 1000 epochs of 1000 batches of 128.
    pub fn full(codes: Vec<String>) -> TrainConfig {
        TrainConfig { epochs: 1000, batches_per_epoch: 1000, checkpoint_every: 50, ..TrainConfig::desk(codes) }
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.batches_per_epoch) as u64
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, batches_per_epoch and batch_size must be positive".into());
        }
        if self.micro_batch == 0 {
            return bad("micro_batch must be positive".into());
        }
        if !(self.lr0 > self.lr_min && self.lr_min > 0.0) {
            return bad(format!("need lr0 > lr_min > 0, got lr0 = {}, lr_min = {}", self.lr0, self.lr_min));
        }
        let (lo, hi) = self.ebn0_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad(format!("ebn0_range [{lo}, {hi}] is empty"));
        }
        if self.codes.is_empty() {
            return bad("codes must name at least one code".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.ensemble_p == Some(0) {
            return bad("ensemble_p must be at least 1".into());
        }
        Ok(())
    }
}

/// The flip loss `-Σ z·ln(1-σ(f)) + (1-z)·ln σ(f)`, evaluated as
/// `Σ z·softplus(f) + (1-z)·softplus(-f)`.
pub fn flip_loss(logits: &[f64], target: &[u8]) -> f64 {
    assert_eq!(logits.len(), target.len());
    logits.iter().zip(target).map(|(&f, &z)| if z == 1 { softplus(f) } else { softplus(-f) }).sum()
}

struct Task {
    code: Code,
    ctx: CodeContext,
    noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub lr_trace: Vec<f64>,
    pub wall_time_s: f64,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    adam: AdamState,
    adam_cfg: AdamConfig,
    tasks: Vec<Task>,
    step: u64,
    epoch: usize,
    history: Vec<EpochStats>,
    lr_trace: Vec<f64>,
}

/// Resolves registry names to the codes a model of `variant` trains on,
/// attaching the ensemble PCM list for ensemble models.
pub fn training_codes(cfg: &TrainConfig, variant: Variant) -> Result<Vec<Code>, TrainError> {
    let mut out = Vec::with_capacity(cfg.codes.len());
    for name in &cfg.codes {
        let code = registry::load(name)?;
        let code = if variant == Variant::CrossEd {
            let p = cfg.ensemble_p.unwrap_or_else(|| max_shift(code.n(), code.redundancy()) + 1);
            build_ensemble(&code, p)?.code(&code)?
        } else {
            code
        };
        out.push(code);
    }
    Ok(out)
}

fn build_tasks(cfg: &TrainConfig, codes: Vec<Code>) -> Result<Vec<Task>, TrainError> {
    codes
        .into_iter()
        .map(|code| {
            let ctx = CodeContext::new(&code)?;
            let noise = NoiseSpec::new(cfg.ebn0_range, code.rate(), cfg.seed ^ NOISE_STREAM)?;
            Ok(Task { code, ctx, noise })
        })
        .collect()
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model_cfg: ModelConfig) -> Result<Trainer, TrainError> {
        cfg.validate()?;
        model_cfg.validate()?;
        if model_cfg.variant.is_code_specific() && cfg.codes.len() > 1 {
            return Err(TrainError::Config(format!(
                "{} has code-dependent shapes and cannot train on several codes",
                model_cfg.variant
            )));
        }
        let codes = training_codes(&cfg, model_cfg.variant)?;
        let dims = model_cfg.variant.is_code_specific().then(|| CodeDims::of(&codes[0]));
        let model = Model::init(model_cfg, dims, cfg.seed)?;
        Self::assemble(cfg, model, None, codes, 0, 0, Vec::new())
    }

    fn assemble(
        cfg: TrainConfig,
        model: Model,
        adam: Option<AdamState>,
        codes: Vec<Code>,
        step: u64,
        epoch: usize,
        lr_trace: Vec<f64>,
    ) -> Result<Trainer, TrainError> {
        let tasks = build_tasks(&cfg, codes)?;
        let adam = adam.unwrap_or_else(|| AdamState::new(model.params().iter().map(|t| t.len())));
        Ok(Trainer { cfg, model, adam, adam_cfg: AdamConfig::default(), tasks, step, epoch, history: Vec::new(), lr_trace })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. Every
    /// field that shapes the trajectory must match, including the epoch count
    /// that sets the cosine horizon.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Trainer, TrainError> {
        cfg.validate()?;
        let stored = ckpt.header.train.as_ref().ok_or_else(|| TrainError::Resume("checkpoint has no training state".into()))?;
        let same = |what: &str, ok: bool| if ok { Ok(()) } else { Err(TrainError::Resume(format!("{what} differs from the checkpoint"))) };
        same("code list", stored.codes == cfg.codes)?;
        if stored.batch_size != cfg.batch_size {
            return Err(TrainError::Resume(format!(
                "batch size changed from {} to {}",
                stored.batch_size, cfg.batch_size
            )));
        }
        same("batches_per_epoch", stored.batches_per_epoch == cfg.batches_per_epoch)?;
        same("seed", stored.seed == cfg.seed)?;
        same("learning-rate schedule", stored.lr0 == cfg.lr0 && stored.lr_min == cfg.lr_min && stored.epochs == cfg.epochs)?;
        same("ebn0_range", stored.ebn0_range == cfg.ebn0_range)?;
        same("code_sampling", stored.code_sampling == cfg.code_sampling)?;
        same("grad_clip", stored.grad_clip == cfg.grad_clip)?;
        same("micro_batch", stored.micro_batch == cfg.micro_batch)?;
        same("ensemble_p", stored.ensemble_p == cfg.ensemble_p)?;
        let model = ckpt.model()?;
        let codes = training_codes(&cfg, model.config().variant)?;
        for code in &codes {
            let want = StoredCode::of(code);
            if ckpt.stored_code(code.name()) != Some(&want) {
                return Err(TrainError::Resume(format!("registry code `{}` does not match the checkpoint's PCMs", code.name())));
            }
        }
        let adam = ckpt.optimizer.clone().ok_or_else(|| TrainError::Resume("checkpoint has no optimizer state".into()))?;
        if adam.step != ckpt.header.step {
            return Err(TrainError::Resume("optimizer step count disagrees with the header".into()));
        }
        let lr_trace = (0..ckpt.header.step).map(|s| schedule(&cfg, s)).collect::<Result<_, _>>()?;
        Self::assemble(cfg, model, Some(adam), codes, ckpt.header.step, ckpt.header.epoch, lr_trace)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn codes(&self) -> Vec<Code> {
        self.tasks.iter().map(|t| t.code.clone()).collect()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn lr_trace(&self) -> &[f64] {
        &self.lr_trace
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, &self.codes(), self.cfg.seed);
        ck.header.step = self.step;
        ck.header.epoch = self.epoch;
        ck.header.train = Some(self.cfg.clone());
        ck.header.adam = Some(self.adam_cfg);
        ck.optimizer = Some(self.adam.clone());
        ck
    }

    fn pick_task(&self, batch_index: u64) -> usize {
        if self.tasks.len() == 1 {
            return 0;
        }
        let mut rng = channel::stream_rng(self.cfg.seed ^ CODE_STREAM, batch_index);
        match self.cfg.code_sampling {
            CodeSampling::Uniform => rng.random_range(0..self.tasks.len()),
            CodeSampling::Proportional => {
                let total: usize = self.tasks.iter().map(|t| t.code.n()).sum();
                let mut r = rng.random_range(0..total);
                for (i, t) in self.tasks.iter().enumerate() {
                    if r < t.code.n() {
                        return i;
                    }
                    r -= t.code.n();
                }
                self.tasks.len() - 1
            }
        }
    }

    /// Loss sum and gradient of one batch, in parameter order.
    fn batch_gradient(&self, task: &Task, samples: &[ChannelSample]) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
        let norm = (samples.len() * task.code.n()) as f64;
        let parts: Vec<Result<(f64, Vec<Vec<f64>>), TrainError>> = samples
            .par_chunks(self.cfg.micro_batch)
            .map(|chunk| {
                let batch = Batch::from_samples(chunk);
                let mut fwd = self.model.forward(&task.ctx, &batch)?;
                let loss = fwd.graph.flip_loss(fwd.logits, &batch.target, norm)?;
                fwd.graph.backward(loss)?;
                let mut grads: Vec<Vec<f64>> = self.model.params().iter().map(|t| vec![0.0; t.len()]).collect();
                fwd.graph.accumulate_param_grads(&mut grads);
                Ok((fwd.graph.value(loss).data()[0], grads))
            })
            .collect();
        let mut total = 0.0;
        let mut acc: Option<Vec<Vec<f64>>> = None;
        for part in parts {
            let (l, g) = part?;
            total += l;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.iter_mut().flatten().zip(g.iter().flatten()).for_each(|(x, y)| *x += y),
            }
        }
        Ok((total, acc.expect("non-empty batch")))
    }

    /// One optimizer step on global batch `self.step`; returns the mean loss.
    pub fn train_step(&mut self) -> Result<f64, TrainError> {
        let g = self.step;
        let ti = self.pick_task(g);
        let task = &self.tasks[ti];
        let b = self.cfg.batch_size as u64;
        let samples: Vec<ChannelSample> = (0..b)
            .into_par_iter()
            .map(|i| channel::sample(&task.code, &task.noise, CodewordPolicy::AllZero, g * b + i))
            .collect();
        let (loss, mut grads) = self.batch_gradient(task, &samples)?;
        if !loss.is_finite() || grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite { loss, step: g, epoch: self.epoch, code: task.code.name().to_string() });
        }
        if let Some(c) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let lr = schedule(&self.cfg, g)?;
        adam_step(self.model.params_mut(), &grads, &mut self.adam, &self.adam_cfg, lr)?;
        self.lr_trace.push(lr);
        self.step += 1;
        Ok(loss)
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats, TrainError> {
        let mut sum = 0.0;
        for _ in 0..self.cfg.batches_per_epoch {
            sum += self.train_step()?;
        }
        self.epoch += 1;
        let stats = EpochStats {
            epoch: self.epoch,
            mean_loss: sum / self.cfg.batches_per_epoch as f64,
            lr: *self.lr_trace.last().expect("at least one step"),
        };
        self.history.push(stats.clone());
        Ok(stats)
    }
}

fn schedule(cfg: &TrainConfig, step: u64) -> Result<f64, OptimError> {
    let last = cfg.total_steps().saturating_sub(1) as usize;
    if last == 0 {
        return Ok(cfg.lr0);
    }
    cosine_lr(step as usize, last, cfg.lr0, cfg.lr_min)
}

pub fn write_log(path: &Path, epochs: &[EpochStats]) -> Result<(), TrainError> {
    let io = |source| TrainError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    writeln!(f, "epoch,mean_loss,lr").map_err(io)?;
    for e in epochs {
        writeln!(f, "{},{:e},{:e}", e.epoch, e.mean_loss, e.lr).map_err(io)?;
    }
    Ok(())
}

/// Runs `trainer` to completion, writing `epoch_XXXX.ckpt` every
/// `checkpoint_every` epochs, then `final.ckpt` and `train_log.csv`.
pub fn train_to_dir(
    trainer: &mut Trainer,
    out: &Path,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport, TrainError> {
    fs::create_dir_all(out).map_err(|source| TrainError::Io { path: out.display().to_string(), source })?;
    let t0 = Instant::now();
    while !trainer.is_done() {
        let stats = trainer.run_epoch()?;
        on_epoch(&stats);
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && stats.epoch % every == 0 && !trainer.is_done() {
            trainer.checkpoint().save(&out.join(format!("epoch_{:04}.ckpt", stats.epoch)))?;
        }
    }
    let path = out.join("final.ckpt");
    trainer.checkpoint().save(&path)?;
    write_log(&out.join("train_log.csv"), trainer.history())?;
    Ok(TrainReport {
        epochs: trainer.history().to_vec(),
        lr_trace: trainer.lr_trace().to_vec(),
        wall_time_s: t0.elapsed().as_secs_f64(),
        final_checkpoint: Some(path),
    })
}
