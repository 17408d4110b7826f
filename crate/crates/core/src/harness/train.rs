//! The training loop shared by all three modes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::diffusion::{ar_loss, diffusion_loss, mask_sequence, CorruptedBatch};
use crate::error::{Error, Result};
use crate::model::{to_diffusion_init, AttentionMode, ModelParams, Transformer};
use crate::numerics::{
    adamw_step, backward, clip_grad_norm, no_grad, OptimState, RandomStream, Tensor,
};
use crate::tasks::{read_records, Tokenizer};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::{RunConfig, TrainMode};
use super::data::{encode_records, Example, Layout};
use super::metrics::{MetricsRow, MetricsWriter};

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub best_step: u64,
}

/// Starting weights: a fresh init from the run seed, or the init checkpoint.
/// A causal checkpoint feeding a diffusion mode goes through
/// [`to_diffusion_init`].
pub fn initial_model(config: &RunConfig) -> Result<Transformer<f32>> {
    let Some(path) = &config.init_checkpoint else {
        return Transformer::init(config.model.clone(), config.seed);
    };
    let ckpt = Checkpoint::<f32>::load(path)?;
    let source = &ckpt.meta.run.model;
    if source.with_mode(config.model.attention_mode) != config.model {
        return Err(Error::Load(format!(
            "{}: model architecture differs from the run config",
            path.display()
        )));
    }
    let model = ckpt.model();
    match (model.mode(), config.model.attention_mode) {
        (AttentionMode::Causal, AttentionMode::Full) => to_diffusion_init(&model),
        (_, mode) => Ok(model.with_mode(mode)),
    }
}

/// Batches drawn in order from a per-epoch shuffle of the training set.
struct Batcher {
    root: RandomStream,
    n: usize,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(seed: u64, n: usize) -> Self {
        let mut b = Self {
            root: RandomStream::new(seed).fork_named("data"),
            n,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.root.fork(self.epoch).shuffle(&mut self.order);
        self.cursor = 0;
    }

    fn next(&mut self, size: usize) -> (u64, Vec<usize>) {
        let epoch = self.epoch;
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        (epoch, out)
    }
}

fn corrupt(
    config: &RunConfig,
    layout: &Layout,
    rows: &[Vec<u32>],
    t: &[f64],
    rng: &RandomStream,
) -> Result<CorruptedBatch> {
    let prot: Vec<Vec<bool>> = rows
        .iter()
        .map(|r| layout.protection(r, config.mode))
        .collect();
    mask_sequence(rows, t, &prot, config.model.mask_id, rng)
}

fn diffusion_batch_loss(
    model: &Transformer<f32>,
    config: &RunConfig,
    batch: &CorruptedBatch,
) -> Result<Tensor<f32>> {
    let logits = model.forward(&batch.xt)?;
    diffusion_loss(
        &logits,
        batch,
        config.schedule,
        Some(&config.cart),
        config.model.mask_id,
    )
}

/// Fixed held-out evaluation: same rows, times and masks at every call.
/// Times are stratified, `t_i = (i + 0.5) / n`.
pub struct HeldOut {
    rows: Vec<Vec<u32>>,
    corrupted: Option<CorruptedBatch>,
}

impl HeldOut {
    pub fn new(config: &RunConfig, layout: &Layout, examples: &[Example]) -> Result<Self> {
        let rows: Vec<Vec<u32>> = examples
            .iter()
            .take(config.heldout_size)
            .map(|e| layout.sequence(e))
            .collect();
        let corrupted = if config.mode.is_diffusion() && !rows.is_empty() {
            let n = rows.len();
            let t: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
            let rng = RandomStream::new(config.seed).fork_named("heldout");
            Some(corrupt(config, layout, &rows, &t, &rng)?)
        } else {
            None
        };
        Ok(Self { rows, corrupted })
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean loss per row under `model`.
    pub fn loss(&self, model: &Transformer<f32>, config: &RunConfig) -> Result<f64> {
        let n = self.rows.len();
        let chunk = config.batch_size.max(1);
        no_grad(|| {
            let mut total = 0.0;
            for start in (0..n).step_by(chunk) {
                let end = (start + chunk).min(n);
                let l = match &self.corrupted {
                    Some(c) => diffusion_batch_loss(model, config, &c.rows(start..end))?,
                    None => {
                        let rows = &self.rows[start..end];
                        ar_loss(&model.forward(rows)?, rows, config.model.pad_id)?
                    }
                };
                total += l.item() as f64 * (end - start) as f64;
            }
            Ok(total / n as f64)
        })
    }
}

fn load_examples(path: &Path, layout: &Layout, tk: &Tokenizer) -> Result<Vec<Example>> {
    let records = read_records(path)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    encode_records(layout, tk, &records)
}

/// Train per `config`, writing `metrics.csv`, `final.ckpt` and `best.ckpt`
/// into `out_dir`. Fully determined by the config.
pub fn train(config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let tk = Tokenizer::new();
    let layout = Layout::of(config);
    let train_set = load_examples(&config.data.train_path, &layout, &tk)?;
    let heldout = match &config.data.heldout_path {
        Some(p) => HeldOut::new(config, &layout, &load_examples(p, &layout, &tk)?)?,
        None => HeldOut::new(config, &layout, &[])?,
    };
    let hash = config.hash();

    let mut model = initial_model(config)?;
    let mut state = OptimState::new(config.optim.adamw, model.params.tensors());
    let mut batcher = Batcher::new(config.seed, train_set.len());
    let noise_root = RandomStream::new(config.seed).fork_named("noise");

    let metrics_path = out_dir.join(METRICS_FILE);
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut rows = Vec::new();
    let mut best: Option<(f64, u64)> = None;
    let mut tokens_seen = 0u64;
    let mut interval_loss = 0.0;
    let mut interval_steps = 0u64;
    let started = Instant::now();

    for step in 1..=config.total_steps {
        let (epoch, idx) = batcher.next(config.batch_size);
        let seqs: Vec<Vec<u32>> = idx
            .iter()
            .map(|&i| layout.sequence(&train_set[i]))
            .collect();
        let fail = |reason: String| Error::Training {
            step,
            batch: format!("epoch {epoch}, examples {idx:?}"),
            reason,
        };
        let loss = (|| -> Result<_> {
            Ok(match config.mode {
                TrainMode::ArPretrain => {
                    ar_loss(&model.forward(&seqs)?, &seqs, config.model.pad_id)?
                }
                TrainMode::DiffusionPretrain | TrainMode::Sft => {
                    let noise = noise_root.fork(step);
                    let t_rng = noise.fork_named("t");
                    // 1 - U[0, 1) keeps t away from 0
                    let t: Vec<f64> = (0..seqs.len())
                        .map(|b| 1.0 - t_rng.fork(b as u64).uniform())
                        .collect();
                    let batch = corrupt(config, &layout, &seqs, &t, &noise.fork_named("mask"))?;
                    diffusion_batch_loss(&model, config, &batch)?
                }
            })
        })()
        .map_err(|e| match e {
            Error::Numeric(reason) => fail(reason),
            other => other,
        })?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(fail(format!("loss is {value}")));
        }
        backward(&loss)?;
        let named: Vec<(String, Tensor<f32>)> = model
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let mut grads: Vec<Vec<f32>> = named
            .iter()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        if config.optim.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, config.optim.grad_clip);
        }
        let lr = config.optim.lr_at(step, config.total_steps);
        state.config.lr = lr;
        let updated = adamw_step(&named, &grads, &mut state).map_err(|e| match e {
            Error::NonFiniteGradient { name } => fail(format!("non-finite gradient in `{name}`")),
            other => other,
        })?;
        model.params = ModelParams::from_tensors(&model.config, updated)?;

        tokens_seen += (seqs.len() * layout.seq_len()) as u64;
        interval_loss += value;
        interval_steps += 1;
        if step % config.log_interval == 0 || step == config.total_steps {
            let heldout_loss = if heldout.is_empty() {
                None
            } else {
                Some(heldout.loss(&model, config)?)
            };
            let row = MetricsRow {
                step,
                loss: interval_loss / interval_steps as f64,
                tokens_seen,
                lr,
                wallclock_s: if config.record_wallclock {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
                heldout_loss,
                config_hash: hash.clone(),
            };
            metrics.append(&row)?;
            let score = heldout_loss.unwrap_or(row.loss);
            if best.is_none_or(|(b, _)| score < b) {
                best = Some((score, step));
                Checkpoint::new(
                    CheckpointMeta::new(config.clone(), step),
                    model.params.clone(),
                )?
                .save(&best_path)?;
            }
            rows.push(row);
            interval_loss = 0.0;
            interval_steps = 0;
        }
    }
    Checkpoint::new(
        CheckpointMeta::new(config.clone(), config.total_steps),
        model.params.clone(),
    )?
    .save(&final_path)?;
    Ok(TrainOutcome {
        metrics_path,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        rows,
        best_step: best.map_or(config.total_steps, |(_, s)| s),
    })
}
