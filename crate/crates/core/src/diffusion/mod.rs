//! Absorbing-state forward process and the weighted denoising losses.
//!
//! Positions are corrupted independently to MASK with probability `t`. The
//! loss scores the clean token at every masked position `n` from the logits
//! at `n - 1` (the model's shifted head), weighted either by `1/t` or by the
//! context-adaptive CART weight computed from the corrupted sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerConfig;
use crate::numerics::{masked_cross_entropy, RandomStream, Real, Tensor};
use crate::par::{self, Execution};

/// Noise schedule `alpha(t)`; only the linear one is provided.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    #[default]
    Linear,
}

impl NoiseSchedule {
    /// Probability that a token is still clean at time `t`.
    pub fn alpha(self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Linear => 1.0 - t,
        }
    }

    pub fn mask_prob(self, t: f64) -> f64 {
        1.0 - self.alpha(t)
    }

    /// Loss weight for a masked token at time `t`; infinite at `t = 0`,
    /// where nothing is masked anyway.
    pub fn base_weight(self, t: f64) -> f64 {
        match self {
            NoiseSchedule::Linear => 1.0 / t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartConfig {
    pub enabled: bool,
    /// Geometric sharpness in `(0, 1]`.
    pub p: f64,
    /// Lower bound on the weight of a masked position; 0 disables it.
    pub weight_floor: f64,
}

impl Default for CartConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            p: 0.5,
            weight_floor: 0.0,
        }
    }
}

impl CartConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Usage(format!(
                "cart p must lie in (0, 1], got {}",
                self.p
            )));
        }
        if !(self.weight_floor >= 0.0 && self.weight_floor.is_finite()) {
            return Err(Error::Usage(format!(
                "cart weight_floor must be finite and >= 0, got {}",
                self.weight_floor
            )));
        }
        Ok(())
    }
}

/// A batch of clean rows and their corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedBatch {
    pub x0: Vec<Vec<u32>>,
    pub xt: Vec<Vec<u32>>,
    pub t: Vec<f64>,
    pub mask_flags: Vec<Vec<bool>>,
    pub protected_flags: Vec<Vec<bool>>,
}

impl CorruptedBatch {
    pub fn batch_size(&self) -> usize {
        self.x0.len()
    }

    pub fn seq_len(&self) -> usize {
        self.x0.first().map_or(0, Vec::len)
    }

    pub fn masked_count(&self) -> usize {
        self.mask_flags.iter().flatten().filter(|&&m| m).count()
    }

    /// The rows in `range`.
    pub fn rows(&self, range: std::ops::Range<usize>) -> CorruptedBatch {
        CorruptedBatch {
            x0: self.x0[range.clone()].to_vec(),
            xt: self.xt[range.clone()].to_vec(),
            t: self.t[range.clone()].to_vec(),
            mask_flags: self.mask_flags[range.clone()].to_vec(),
            protected_flags: self.protected_flags[range].to_vec(),
        }
    }
}

fn check_rows<A, B>(what: &str, a: &[Vec<A>], b: &[Vec<B>]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::Shape(format!("{what}: row shapes disagree")));
    }
    Ok(())
}

/// Mask every unprotected position independently with probability `t[b]`.
/// Row `b`, position `n` draws from `rng.fork(b).fork(n)`, so the outcome at
/// a position does not depend on the rest of the batch.
pub fn mask_sequence(
    x0: &[Vec<u32>],
    t: &[f64],
    protected_flags: &[Vec<bool>],
    mask_id: u32,
    rng: &RandomStream,
) -> Result<CorruptedBatch> {
    check_rows("mask_sequence", x0, protected_flags)?;
    if t.len() != x0.len() {
        return Err(Error::Shape(format!(
            "mask_sequence: {} rows but {} times",
            x0.len(),
            t.len()
        )));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Usage(format!(
            "mask_sequence: t = {bad} outside [0, 1]"
        )));
    }
    let rows = par::map(Execution::default(), x0, |b, row| {
        let row_rng = rng.fork(b as u64);
        let flags: Vec<bool> = (0..row.len())
            .map(|n| !protected_flags[b][n] && row_rng.fork(n as u64).uniform() < t[b])
            .collect();
        let xt: Vec<u32> = row
            .iter()
            .zip(&flags)
            .map(|(&tok, &m)| if m { mask_id } else { tok })
            .collect();
        (xt, flags)
    });
    let (xt, mask_flags) = rows.into_iter().unzip();
    Ok(CorruptedBatch {
        x0: x0.to_vec(),
        xt,
        t: t.to_vec(),
        mask_flags,
        protected_flags: protected_flags.to_vec(),
    })
}

/// `p * (1 - p)^k`.
pub fn geometric_pmf(p: f64, k: i64) -> Result<f64> {
    if k < 0 {
        return Err(Error::Usage(format!("geometric_pmf: k = {k} is negative")));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Usage(format!(
            "geometric_pmf: p = {p} outside (0, 1]"
        )));
    }
    Ok(p * (1.0 - p).powi(k.min(i32::MAX as i64) as i32))
}

/// CART weight of every position in one corrupted row: at a masked position
/// `n`, half the sum over clean `i` of `Geo(p, |n - i| - 1)`; zero elsewhere.
///
/// Each one-sided sum obeys `s[n] = (1 - p) s[n-1] + p clean[n-1]`, so the
/// row costs O(L).
pub fn cart_weights_row(xt: &[u32], mask_id: u32, cart: &CartConfig) -> Vec<f64> {
    let l = xt.len();
    let q = 1.0 - cart.p;
    let clean = |i: usize| if xt[i] != mask_id { cart.p } else { 0.0 };
    let mut left = vec![0.0; l];
    for n in 1..l {
        left[n] = q * left[n - 1] + clean(n - 1);
    }
    let mut right = vec![0.0; l];
    for n in (0..l.saturating_sub(1)).rev() {
        right[n] = q * right[n + 1] + clean(n + 1);
    }
    (0..l)
        .map(|n| {
            if xt[n] == mask_id {
                (0.5 * (left[n] + right[n])).max(cart.weight_floor)
            } else {
                0.0
            }
        })
        .collect()
}

/// [`cart_weights_row`] over a batch. Protected positions are never masked,
/// so they always count as clean context.
pub fn cart_weights(
    xt: &[Vec<u32>],
    protected_flags: &[Vec<bool>],
    mask_id: u32,
    cart: &CartConfig,
) -> Result<Vec<Vec<f64>>> {
    check_rows("cart_weights", xt, protected_flags)?;
    cart.validate()?;
    Ok(par::map(Execution::default(), xt, |b, row| {
        let mut w = cart_weights_row(row, mask_id, cart);
        for (w, &p) in w.iter_mut().zip(&protected_flags[b]) {
            if p {
                *w = 0.0;
            }
        }
        w
    }))
}

/// Per-position loss weights: `1/t` or the CART weight at masked positions,
/// 0 elsewhere.
pub fn loss_weights(
    batch: &CorruptedBatch,
    schedule: NoiseSchedule,
    cart: Option<&CartConfig>,
    mask_id: u32,
) -> Result<Vec<Vec<f64>>> {
    match cart.filter(|c| c.enabled) {
        Some(c) => cart_weights(&batch.xt, &batch.protected_flags, mask_id, c),
        None => Ok(batch
            .mask_flags
            .iter()
            .zip(&batch.t)
            .map(|(flags, &t)| {
                let w = if flags.iter().any(|&m| m) {
                    schedule.base_weight(t)
                } else {
                    0.0
                };
                flags.iter().map(|&m| if m { w } else { 0.0 }).collect()
            })
            .collect()),
    }
}

/// Flatten `[B, L]` per-position weights into shifted `(target, weight)`
/// rows for `[B * L, V]` logits: row `(b, n)` predicts `x0[b][n + 1]`.
fn shifted_targets(x0: &[Vec<u32>], weights: &[Vec<f64>]) -> (Vec<u32>, Vec<f64>) {
    let mut targets = Vec::new();
    let mut w = Vec::new();
    for (row, wrow) in x0.iter().zip(weights) {
        for n in 0..row.len() {
            match row.get(n + 1) {
                Some(&next) => {
                    targets.push(next);
                    w.push(wrow[n + 1]);
                }
                None => {
                    targets.push(0);
                    w.push(0.0);
                }
            }
        }
    }
    (targets, w)
}

fn flat_logits<T: Real>(logits: &Tensor<T>, b: usize, l: usize) -> Result<Tensor<T>> {
    match logits.shape() {
        [lb, ll, v] if *lb == b && *ll == l => logits.reshape(&[b * l, *v]),
        s => Err(Error::Shape(format!(
            "expected logits [{b}, {l}, V], got {s:?}"
        ))),
    }
}

/// Weighted denoising loss for logits `[B, L, V]` computed on `batch.xt`.
/// The weighted sum is divided by `B * (L - 1)`, the number of predicted
/// positions (everything after BOS).
pub fn diffusion_loss<T: Real>(
    logits: &Tensor<T>,
    batch: &CorruptedBatch,
    schedule: NoiseSchedule,
    cart: Option<&CartConfig>,
    mask_id: u32,
) -> Result<Tensor<T>> {
    let (b, l) = (batch.batch_size(), batch.seq_len());
    if l < 2 {
        return Err(Error::Shape(format!(
            "diffusion_loss: need L >= 2, got {l}"
        )));
    }
    let flat = flat_logits(logits, b, l)?;
    let weights = loss_weights(batch, schedule, cart, mask_id)?;
    let (targets, w) = shifted_targets(&batch.x0, &weights);
    Ok(masked_cross_entropy(&flat, &targets, &w)?.scale(1.0 / (b * (l - 1)) as f64))
}

/// Next-token cross-entropy averaged over every target that is not `pad_id`.
pub fn ar_loss<T: Real>(logits: &Tensor<T>, tokens: &[Vec<u32>], pad_id: u32) -> Result<Tensor<T>> {
    let (b, l) = (tokens.len(), tokens.first().map_or(0, Vec::len));
    let flat = flat_logits(logits, b, l)?;
    let weights: Vec<Vec<f64>> = tokens
        .iter()
        .map(|row| {
            row.iter()
                .map(|&t| if t == pad_id { 0.0 } else { 1.0 })
                .collect()
        })
        .collect();
    let (targets, w) = shifted_targets(tokens, &weights);
    let count = w.iter().filter(|&&w| w > 0.0).count();
    if count == 0 {
        return Err(Error::Data("ar_loss: no non-pad targets".into()));
    }
    Ok(masked_cross_entropy(&flat, &targets, &w)?.scale(1.0 / count as f64))
}

/// Corrupt prompt/response pairs for conditional training: rows are
/// `[BOS] prompt response`, and only response positions may be masked.
/// Rows must share one length.
pub fn sft_corrupt(
    config: &TransformerConfig,
    prompts: &[Vec<u32>],
    responses: &[Vec<u32>],
    t: &[f64],
    rng: &RandomStream,
) -> Result<CorruptedBatch> {
    if prompts.len() != responses.len() {
        return Err(Error::Shape(format!(
            "sft_corrupt: {} prompts but {} responses",
            prompts.len(),
            responses.len()
        )));
    }
    let mut x0 = Vec::with_capacity(prompts.len());
    let mut protected = Vec::with_capacity(prompts.len());
    for (p, r) in prompts.iter().zip(responses) {
        let len = 1 + p.len() + r.len();
        if len > config.max_seq_len {
            return Err(Error::Capacity {
                len,
                limit: config.max_seq_len,
            });
        }
        let mut row = Vec::with_capacity(len);
        row.push(config.bos_id);
        row.extend_from_slice(p);
        row.extend_from_slice(r);
        x0.push(row);
        let mut flags = vec![true; 1 + p.len()];
        flags.resize(len, false);
        protected.push(flags);
    }
    mask_sequence(&x0, t, &protected, config.mask_id, rng)
}

/// Protection flags for unconditional training: only position 0 (BOS).
pub fn bos_only_protection(x0: &[Vec<u32>]) -> Vec<Vec<bool>> {
    x0.iter()
        .map(|row| (0..row.len()).map(|n| n == 0).collect())
        .collect()
}
