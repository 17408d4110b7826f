//! Iterative unmasking: start from a template whose free positions hold
//! MASK, and commit a scheduled number of positions per forward pass until
//! none remain. Committed tokens are never revisited.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMode, Transformer};
use crate::numerics::{no_grad, RandomStream, Real};
use crate::par::{self, Execution};
use crate::tasks::tokenizer::{Tokenizer, BOS, MASK, PAD};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationTemplate {
    pub tokens: Vec<u32>,
    pub fixed_flags: Vec<bool>,
}

impl GenerationTemplate {
    /// Checks that BOS leads and is fixed, fixed positions hold real tokens,
    /// and free positions hold MASK.
    pub fn new(tokens: Vec<u32>, fixed_flags: Vec<bool>) -> Result<Self> {
        if tokens.len() != fixed_flags.len() {
            return Err(Error::Shape(format!(
                "template has {} tokens but {} flags",
                tokens.len(),
                fixed_flags.len()
            )));
        }
        if tokens.first() != Some(&BOS) || !fixed_flags[0] {
            return Err(Error::Usage("template must start with a fixed BOS".into()));
        }
        for (n, (&tok, &fixed)) in tokens.iter().zip(&fixed_flags).enumerate() {
            if fixed == (tok == MASK) {
                return Err(Error::Usage(format!(
                    "template position {n}: fixed={fixed} but token {tok}"
                )));
            }
        }
        Ok(Self {
            tokens,
            fixed_flags,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn free_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&n| !self.fixed_flags[n]).collect()
    }
}

/// BOS, then `prefix` and `segments[0]`, then each slot's MASK run followed
/// by the next segment. A nonempty last segment pins the ending.
pub fn build_template(
    tokenizer: &Tokenizer,
    prefix: &str,
    slot_lengths: &[usize],
    segments: &[String],
    max_seq_len: usize,
) -> Result<GenerationTemplate> {
    if segments.len() != slot_lengths.len() + 1 {
        return Err(Error::Usage(format!(
            "{} slots need {} segments, got {}",
            slot_lengths.len(),
            slot_lengths.len() + 1,
            segments.len()
        )));
    }
    let mut tokens = vec![BOS];
    let mut fixed = vec![true];
    let push_text = |tokens: &mut Vec<u32>, fixed: &mut Vec<bool>, text: &str| -> Result<()> {
        let ids = tokenizer.encode(text)?;
        fixed.extend(std::iter::repeat(true).take(ids.len()));
        tokens.extend(ids);
        Ok(())
    };
    push_text(&mut tokens, &mut fixed, prefix)?;
    push_text(&mut tokens, &mut fixed, &segments[0])?;
    for (&len, seg) in slot_lengths.iter().zip(&segments[1..]) {
        tokens.extend(std::iter::repeat(MASK).take(len));
        fixed.extend(std::iter::repeat(false).take(len));
        push_text(&mut tokens, &mut fixed, seg)?;
    }
    if tokens.len() > max_seq_len {
        return Err(Error::Capacity {
            len: tokens.len(),
            limit: max_seq_len,
        });
    }
    GenerationTemplate::new(tokens, fixed)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    MaxConfidence,
    MinEntropy,
    LeftToRight,
    RandomOrder,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::MaxConfidence,
        Strategy::MinEntropy,
        Strategy::LeftToRight,
        Strategy::RandomOrder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::MaxConfidence => "max_confidence",
            Strategy::MinEntropy => "min_entropy",
            Strategy::LeftToRight => "left_to_right",
            Strategy::RandomOrder => "random_order",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub steps: usize,
    pub strategy: Strategy,
    /// 0 commits the argmax token.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            steps: 16,
            strategy: Strategy::MaxConfidence,
            temperature: 0.0,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Usage("decode steps must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Usage(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Per-step commit counts: `ceil(remaining / steps_left)` over
/// `min(k, num_masked)` steps. Empty when nothing is masked.
pub fn unmask_counts(num_masked: usize, k: usize) -> Vec<usize> {
    let steps = k.min(num_masked);
    let mut remaining = num_masked;
    (0..steps)
        .map(|j| {
            let c = remaining.div_ceil(steps - j);
            remaining -= c;
            c
        })
        .collect()
}

/// Choose `count` of the candidate `(position, score)` pairs. Score-based
/// strategies take the highest scores, ties to the lower position. The
/// result is in ascending position order.
pub fn select_positions(
    strategy: Strategy,
    candidates: &[(usize, f64)],
    count: usize,
    rng: &mut RandomStream,
) -> Vec<usize> {
    let count = count.min(candidates.len());
    let mut chosen: Vec<usize> = match strategy {
        Strategy::MaxConfidence | Strategy::MinEntropy => {
            let mut c = candidates.to_vec();
            c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            c[..count].iter().map(|&(n, _)| n).collect()
        }
        Strategy::LeftToRight => {
            let mut c: Vec<usize> = candidates.iter().map(|&(n, _)| n).collect();
            c.sort_unstable();
            c.truncate(count);
            c
        }
        Strategy::RandomOrder => rng
            .sample_indices(candidates.len(), count)
            .into_iter()
            .map(|i| candidates[i].0)
            .collect(),
    };
    chosen.sort_unstable();
    chosen
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub positions: Vec<usize>,
    pub tokens: Vec<u32>,
    pub confidences: Vec<f64>,
    /// Sequence after this step's commits.
    pub sequence: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub trace: Vec<TraceStep>,
    pub forward_passes: usize,
}

pub fn write_trace(path: &Path, trace: &[TraceStep]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for step in trace {
        serde_json::to_writer(&mut w, step)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Ids the sampler may commit.
fn committable(id: usize) -> bool {
    !matches!(id as u32, MASK | BOS | PAD)
}

struct Scored {
    position: usize,
    confidence: f64,
    neg_entropy: f64,
    logits: Vec<f64>,
}

fn score(position: usize, row: &[f64]) -> Scored {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| committable(i))
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let probs: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(i, &z)| if committable(i) { (z - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    let confidence = probs.iter().copied().fold(0.0, f64::max) / total;
    let neg_entropy = probs
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| {
            let q = q / total;
            q * q.ln()
        })
        .sum();
    Scored {
        position,
        confidence,
        neg_entropy,
        logits: row.to_vec(),
    }
}

/// Highest-logit committable id, ties to the lower id.
pub fn argmax_token(row: &[f64]) -> u32 {
    let mut best = None::<(usize, f64)>;
    for (i, &z) in row.iter().enumerate().filter(|&(i, _)| committable(i)) {
        if best.is_none_or(|(_, b)| z > b) {
            best = Some((i, z));
        }
    }
    best.map_or(MASK, |(i, _)| i as u32)
}

fn sample_token(row: &[f64], temperature: f64, rng: &mut RandomStream) -> u32 {
    if temperature == 0.0 {
        return argmax_token(row);
    }
    let max = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| committable(i))
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            if committable(i) {
                ((z - max) / temperature).exp()
            } else {
                0.0
            }
        })
        .collect();
    let mut u = rng.uniform() * weights.iter().sum::<f64>();
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && u < w {
            return i as u32;
        }
        u -= w;
    }
    argmax_token(row)
}

/// Fill every free position of `template`. Runs exactly
/// `min(steps, free positions)` forward passes.
pub fn decode<T: Real>(
    model: &Transformer<T>,
    template: &GenerationTemplate,
    config: &DecodeConfig,
) -> Result<DecodeOutput> {
    config.validate()?;
    if model.mode() != AttentionMode::Full {
        return Err(Error::Usage("decode needs a full-attention model".into()));
    }
    let mut x = template.tokens.clone();
    let counts = unmask_counts(template.free_positions().len(), config.steps);
    let root = RandomStream::new(config.seed);
    let mut select_rng = root.fork_named("select");
    let sample_rng = root.fork_named("sample");
    let v = model.config.vocab_size;
    let mut trace = Vec::with_capacity(counts.len());

    for (step, &count) in counts.iter().enumerate() {
        let logits = no_grad(|| model.forward(std::slice::from_ref(&x)))?;
        let data = logits.to_f64_vec();
        let scored: Vec<Scored> = (1..x.len())
            .filter(|&n| x[n] == MASK && !template.fixed_flags[n])
            .map(|n| score(n, &data[(n - 1) * v..n * v]))
            .collect();
        let candidates: Vec<(usize, f64)> = scored
            .iter()
            .map(|s| {
                let key = match config.strategy {
                    Strategy::MinEntropy => s.neg_entropy,
                    _ => s.confidence,
                };
                (s.position, key)
            })
            .collect();
        let positions = select_positions(config.strategy, &candidates, count, &mut select_rng);
        let mut tokens = Vec::with_capacity(positions.len());
        let mut confidences = Vec::with_capacity(positions.len());
        for &n in &positions {
            let s = scored
                .iter()
                .find(|s| s.position == n)
                .expect("selected from candidates");
            let mut rng = sample_rng.fork(step as u64).fork(n as u64);
            let tok = sample_token(&s.logits, config.temperature, &mut rng);
            x[n] = tok;
            tokens.push(tok);
            confidences.push(s.confidence);
        }
        trace.push(TraceStep {
            step,
            positions,
            tokens,
            confidences,
            sequence: x.clone(),
        });
    }
    Ok(DecodeOutput {
        tokens: x,
        forward_passes: trace.len(),
        trace,
    })
}

/// Seed for the `index`-th decode of a run seeded with `seed`.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    RandomStream::new(seed).fork(index as u64).next_u64()
}

/// Decode many templates; template `i` uses `instance_seed(config.seed, i)`.
pub fn decode_batch<T: Real>(
    model: &Transformer<T>,
    templates: &[GenerationTemplate],
    config: &DecodeConfig,
    exec: Execution,
) -> Result<Vec<DecodeOutput>> {
    par::map(exec, templates, |i, t| {
        let cfg = DecodeConfig {
            seed: instance_seed(config.seed, i),
            ..*config
        };
        decode(model, t, &cfg)
    })
    .into_iter()
    .collect()
}
