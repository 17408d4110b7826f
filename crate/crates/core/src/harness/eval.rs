//! Planning evaluation, the steps sweep, and template sampling.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::numerics::RandomStream;
use crate::par::{self, Execution};
use crate::sampler::{build_template, decode, instance_seed, DecodeConfig, DecodeOutput, Strategy};
use crate::tasks::{Record, TaskKind, Tokenizer};

use super::checkpoint::Checkpoint;
use super::data::Layout;

/// Where answers come from.
#[derive(Debug, Clone, Copy)]
pub enum Responder<'a> {
    Model {
        model: &'a Transformer<f32>,
        decode: DecodeConfig,
    },
    /// The record's reference response.
    Oracle,
    /// Uniform characters from the task's response alphabet, uniform length.
    Random { seed: u64 },
}

impl Responder<'_> {
    fn name(&self) -> &'static str {
        match self {
            Responder::Model { .. } => "model",
            Responder::Oracle => "oracle",
            Responder::Random { .. } => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub responder: String,
    pub n_instances: usize,
    pub solved: usize,
    pub solve_rate: f64,
    pub forward_passes: usize,
    pub passes_per_instance: Vec<usize>,
    pub generated_tokens: usize,
    pub wallclock_s: f64,
    pub tokens_per_s: f64,
    pub config_hash: Option<String>,
}

struct Answer {
    solved: bool,
    passes: usize,
    generated: usize,
}

fn random_answer(task: TaskKind, max_len: usize, rng: &mut RandomStream) -> String {
    let alphabet: Vec<char> = task.response_alphabet().chars().collect();
    let len = 1 + rng.below(max_len.max(1));
    (0..len)
        .map(|_| alphabet[rng.below(alphabet.len())])
        .collect()
}

/// Score `responder` on the first `records`, one instance per record.
pub fn evaluate_records(
    responder: Responder<'_>,
    task: TaskKind,
    layout: &Layout,
    records: &[Record],
    exec: Execution,
) -> Result<EvalReport> {
    let tk = Tokenizer::new();
    let started = Instant::now();
    let answers: Vec<Result<Answer>> = par::map(exec, records, |i, rec| {
        let (text, passes, generated) = match responder {
            Responder::Oracle => (rec.response.clone(), 0, 0),
            Responder::Random { seed } => {
                let mut rng = RandomStream::new(seed).fork(i as u64);
                (random_answer(task, layout.response_len, &mut rng), 0, 0)
            }
            Responder::Model { model, decode: cfg } => {
                let template = layout.template(&layout.encode_prompt(&tk, &rec.prompt)?)?;
                let cfg = DecodeConfig {
                    seed: instance_seed(cfg.seed, i),
                    ..cfg
                };
                let out = decode(model, &template, &cfg)?;
                (
                    layout.answer(&tk, &out.tokens),
                    out.forward_passes,
                    template.free_positions().len(),
                )
            }
        };
        Ok(Answer {
            solved: task.verify(&rec.prompt, &text),
            passes,
            generated,
        })
    });
    let answers = answers.into_iter().collect::<Result<Vec<_>>>()?;
    let wallclock_s = started.elapsed().as_secs_f64();
    let n = answers.len();
    let solved = answers.iter().filter(|a| a.solved).count();
    let generated: usize = answers.iter().map(|a| a.generated).sum();
    let passes_per_instance: Vec<usize> = answers.iter().map(|a| a.passes).collect();
    Ok(EvalReport {
        task,
        responder: responder.name().into(),
        n_instances: n,
        solved,
        solve_rate: if n == 0 {
            0.0
        } else {
            solved as f64 / n as f64
        },
        forward_passes: passes_per_instance.iter().sum(),
        passes_per_instance,
        generated_tokens: generated,
        wallclock_s,
        tokens_per_s: if wallclock_s > 0.0 {
            generated as f64 / wallclock_s
        } else {
            0.0
        },
        config_hash: None,
    })
}

/// Decode and verify `n_instances` held-out records with a checkpoint. With
/// `expected_hash`, refuses a checkpoint trained under a different config.
pub fn evaluate(
    checkpoint: &Checkpoint<f32>,
    records: &[Record],
    n_instances: usize,
    decode: DecodeConfig,
    expected_hash: Option<&str>,
    exec: Execution,
) -> Result<EvalReport> {
    let meta = &checkpoint.meta;
    if let Some(h) = expected_hash.filter(|&h| h != meta.config_hash) {
        return Err(Error::Load(format!(
            "checkpoint was trained under config {} but {h} was expected",
            meta.config_hash
        )));
    }
    let model = checkpoint
        .model()
        .with_mode(crate::model::AttentionMode::Full);
    let layout = Layout::of(&meta.run);
    let records = &records[..n_instances.min(records.len())];
    let mut report = evaluate_records(
        Responder::Model {
            model: &model,
            decode,
        },
        meta.run.data.task,
        &layout,
        records,
        exec,
    )?;
    report.config_hash = Some(meta.config_hash.clone());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub seed: u64,
    pub solve_rate: f64,
    /// Forward passes per instance (the largest, if they differ).
    pub passes: usize,
    pub passes_total: usize,
    pub wallclock_s: f64,
}

/// One evaluation per `(K, seed)`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_quality_speed(
    checkpoint: &Checkpoint<f32>,
    records: &[Record],
    n_instances: usize,
    steps_list: &[usize],
    seeds: &[u64],
    strategy: Strategy,
    temperature: f64,
    exec: Execution,
) -> Result<Vec<(SweepRow, EvalReport)>> {
    let mut out = Vec::new();
    for &k in steps_list {
        for &seed in seeds {
            let cfg = DecodeConfig {
                steps: k,
                strategy,
                temperature,
                seed,
            };
            let report = evaluate(checkpoint, records, n_instances, cfg, None, exec)?;
            let row = SweepRow {
                k,
                seed,
                solve_rate: report.solve_rate,
                passes: report
                    .passes_per_instance
                    .iter()
                    .copied()
                    .max()
                    .unwrap_or(0),
                passes_total: report.forward_passes,
                wallclock_s: report.wallclock_s,
            };
            out.push((row, report));
        }
    }
    Ok(out)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Decode a template built from prefix text, slot lengths and the fixed
/// segments between them. Returns the rendered text after BOS.
pub fn sample_template(
    model: &Transformer<f32>,
    prefix: &str,
    slot_lengths: &[usize],
    segments: &[String],
    decode_config: &DecodeConfig,
) -> Result<(String, DecodeOutput)> {
    let tk = Tokenizer::new();
    let template = build_template(
        &tk,
        prefix,
        slot_lengths,
        segments,
        model.config.max_seq_len,
    )?;
    let out = decode(model, &template, decode_config)?;
    Ok((tk.render(&out.tokens[1..]), out))
}
