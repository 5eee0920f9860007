//! Mini-batch training with teacher forcing.
//!
//! The loss is the cross-entropy summed over the positions of each sequence
//! and averaged over the sequences of the batch; reported losses are divided
//! by the sequence length to give nats per position.

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::codec::SymbolDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, NormMode};
use crate::model::{Model, ModelParams};
use crate::rng::Rng;

pub mod batch;
pub mod checkpoint;
pub mod optim;

pub use batch::{make_batches, Batch, BatchSampler};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::Optimizer;

/// Cap on held-out sequences scored per probe.
const HOLDOUT_PROBE_ROWS: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    /// `None` uses the optimizer's default (SGD 0.1, Adam 3e-4).
    pub learning_rate: Option<f32>,
    /// Multiply the rate by 0.1 once two thirds of the steps are done.
    pub decay: bool,
    pub optimizer: Optimizer,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_steps: 2000,
            learning_rate: None,
            decay: true,
            optimizer: Optimizer::adam(),
            grad_clip_norm: 5.0,
            seed: 0,
            eval_every: 100,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f32 {
        self.learning_rate.unwrap_or_else(|| self.optimizer.default_lr())
    }

    /// Rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f32 {
        if self.decay && 3 * step >= 2 * self.max_steps {
            self.lr() * 0.1
        } else {
            self.lr()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument("batch size, steps and eval interval must be positive".into()));
        }
        if !(self.lr() > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::InvalidArgument("learning rate and clip norm must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "holdout fraction {} must lie in (0, 0.5)",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// `(step, loss per position)` for every step, measured before the update.
    pub train_loss: Vec<(usize, f32)>,
    /// `(step, loss per position)` on the holdout split every `eval_every`
    /// steps and after the last step. Empty if the split is empty.
    pub holdout_loss: Vec<(usize, f32)>,
    pub wall_time: Duration,
    pub n_train: usize,
    pub n_holdout: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f32 {
        self.train_loss.first().map_or(f32::NAN, |p| p.1)
    }

    pub fn final_train_loss(&self) -> f32 {
        self.train_loss.last().map_or(f32::NAN, |p| p.1)
    }

    pub fn final_holdout_loss(&self) -> Option<f32> {
        self.holdout_loss.last().map(|p| p.1)
    }

    /// Mean train loss over the first and last tenth of the run.
    pub fn head_tail_means(&self) -> (f32, f32) {
        let n = self.train_loss.len();
        let k = (n / 10).max(1);
        let mean = |s: &[(usize, f32)]| s.iter().map(|p| p.1).sum::<f32>() / s.len() as f32;
        (mean(&self.train_loss[..k]), mean(&self.train_loss[n - k..]))
    }

    /// Two-column `step,loss` CSV of the train series.
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut write = || -> std::io::Result<()> {
            writeln!(f, "step,loss")?;
            for (s, l) in &self.train_loss {
                writeln!(f, "{s},{l}")?;
            }
            f.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }
}

/// Per-step progress passed to the logging callback.
#[derive(Clone, Copy, Debug)]
pub struct Progress {
    pub step: usize,
    pub train_loss: f32,
    pub holdout_loss: Option<f32>,
}

/// Loss (per position) and gradients of one batch.
pub struct StepResult {
    pub loss: f32,
    pub grads: Vec<(String, Vec<f32>)>,
    pub batch_stats: Vec<(String, crate::graph::BatchStats)>,
}

/// Forward and backward on `batch` in Train mode.
pub fn loss_and_grads(model: &Model, batch: &Batch) -> Result<StepResult> {
    let mut g = Graph::new();
    let fp = model.forward(&mut g, &batch.inputs, batch.batch, NormMode::Train)?;
    let v = model.config.vocab_size;
    let flat = g.reshape(fp.logits, &[batch.batch * batch.len, v])?;
    let loss = g.cross_entropy(flat, &batch.targets, batch.batch as f32)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    let grads = fp
        .params
        .iter()
        .map(|(name, var)| {
            let grad = g
                .grad(*var)
                .map_or_else(|| vec![0.0; g.value(*var).numel()], <[f32]>::to_vec);
            (name.clone(), grad)
        })
        .collect();
    Ok(StepResult {
        loss: value / batch.len as f32,
        grads,
        batch_stats: fp.batch_stats,
    })
}

/// Eval-mode loss per position over the given sequences.
pub fn evaluate_loss(model: &Model, dataset: &SymbolDataset, indices: &[usize]) -> Result<f32> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("no sequences to evaluate".into()));
    }
    let mut total = 0.0f64;
    for chunk in indices.chunks(256) {
        let batch = Batch::from_indices(dataset, chunk);
        let mut g = Graph::new();
        let fp = model.forward(&mut g, &batch.inputs, batch.batch, NormMode::Eval)?;
        let flat = g.reshape(fp.logits, &[batch.batch * batch.len, model.config.vocab_size])?;
        let loss = g.cross_entropy(flat, &batch.targets, 1.0)?;
        total += f64::from(g.value(loss).item());
    }
    let positions = (indices.len() * (dataset.seq_len() - 1)) as f64;
    Ok((total / positions) as f32)
}

pub fn train(model: &mut Model, dataset: &SymbolDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, dataset, cfg, |_| {})
}

/// Runs `cfg.max_steps` updates on `model`, calling `log` after every step.
pub fn train_with(
    model: &mut Model,
    dataset: &SymbolDataset,
    cfg: &TrainConfig,
    mut log: impl FnMut(&Progress),
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.vocab_size() != model.config.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "dataset vocabulary {} does not match the model's {}",
            dataset.vocab_size(),
            model.config.vocab_size
        )));
    }
    if dataset.seq_len() - 1 > model.config.context_length {
        return Err(Error::InvalidArgument(format!(
            "sequences of length {} exceed the model context {}",
            dataset.seq_len(),
            model.config.context_length
        )));
    }
    let started = Instant::now();
    let (train_idx, holdout_idx) = batch::split(dataset.len(), cfg.holdout_fraction);
    let n_train = train_idx.len();
    let probe: Vec<usize> = holdout_idx.iter().copied().take(HOLDOUT_PROBE_ROWS).collect();
    let mut sampler = BatchSampler::new(dataset, train_idx, cfg.batch_size, Rng::derived(cfg.seed, "batches"))?;
    let mut opt = optim::OptimizerState::new(cfg.optimizer);
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(cfg.max_steps),
        holdout_loss: Vec::new(),
        wall_time: Duration::ZERO,
        n_train,
        n_holdout: holdout_idx.len(),
    };
    let guard_from = cfg.max_steps.div_ceil(10);
    for step in 0..cfg.max_steps {
        let holdout = if !probe.is_empty() && step % cfg.eval_every == 0 {
            let l = evaluate_loss(model, dataset, &probe)?;
            report.holdout_loss.push((step, l));
            Some(l)
        } else {
            None
        };
        let batch = sampler.next_batch();
        let StepResult {
            loss,
            grads,
            batch_stats,
        } = loss_and_grads(model, &batch)?;
        report.train_loss.push((step, loss));
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("train loss is {loss}"),
            });
        }
        let initial = report.initial_loss();
        if step >= guard_from && loss > 2.0 * initial {
            return Err(Error::Diverged {
                step,
                reason: format!("train loss {loss:.4} exceeds twice the initial {initial:.4}"),
            });
        }
        let (names, mut grads): (Vec<String>, Vec<Vec<f32>>) = grads.into_iter().unzip();
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        optim::clip_global_norm(&mut grads, cfg.grad_clip_norm);
        apply_update(&mut model.params, &mut opt, cfg.lr_at(step), &names, &grads);
        model.apply_batch_stats(&batch_stats)?;
        log(&Progress {
            step,
            train_loss: loss,
            holdout_loss: holdout,
        });
    }
    if !probe.is_empty() {
        report
            .holdout_loss
            .push((cfg.max_steps, evaluate_loss(model, dataset, &probe)?));
    }
    report.wall_time = started.elapsed();
    Ok(report)
}

fn apply_update(params: &mut ModelParams, opt: &mut optim::OptimizerState, lr: f32, names: &[String], grads: &[Vec<f32>]) {
    let mut by_name: Vec<(&str, &mut [f32], &[f32])> = Vec::with_capacity(names.len());
    let mut pending = names.iter().zip(grads).peekable();
    // Both sequences are in name order, so a single merge pass pairs them.
    for (name, t) in params.iter_mut() {
        if let Some((n, g)) = pending.peek() {
            if *n == name {
                by_name.push((n.as_str(), t.data_mut(), g.as_slice()));
                pending.next();
            }
        }
    }
    debug_assert!(pending.next().is_none(), "gradient for an unknown parameter");
    opt.step(lr, by_name);
}
