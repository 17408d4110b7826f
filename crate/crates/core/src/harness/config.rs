//! Run configuration, its hash, and field-level diffs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{CartConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{AttentionMode, TransformerConfig};
use crate::numerics::AdamWConfig;
use crate::tasks::{TaskKind, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Next-token prediction with causal attention.
    ArPretrain,
    /// Denoising over the whole sequence, prompt included.
    DiffusionPretrain,
    /// Denoising over the response only, conditioned on the prompt.
    Sft,
}

impl TrainMode {
    pub fn attention_mode(self) -> AttentionMode {
        match self {
            TrainMode::ArPretrain => AttentionMode::Causal,
            TrainMode::DiffusionPretrain | TrainMode::Sft => AttentionMode::Full,
        }
    }

    pub fn is_diffusion(self) -> bool {
        self != TrainMode::ArPretrain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    #[serde(flatten)]
    pub adamw: AdamWConfig,
    /// Linear ramp from 0 over this many steps.
    pub warmup_steps: u64,
    /// Cosine decay after warmup ends at `lr * min_lr_ratio`; 1 keeps it flat.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            adamw: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    /// Learning rate for 1-based `step` of `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let base = self.adamw.lr;
        if step <= self.warmup_steps {
            return base * step as f64 / self.warmup_steps.max(1) as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        base * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub task: TaskKind,
    pub train_path: PathBuf,
    /// Held-out split used for loss tracking and best-checkpoint selection.
    #[serde(default)]
    pub heldout_path: Option<PathBuf>,
    /// Prompt block width in tokens; prompts are left-padded to it.
    pub prompt_len: usize,
    /// Response block width in tokens; responses are right-filled with EOS.
    pub response_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: TransformerConfig,
    pub mode: TrainMode,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub cart: CartConfig,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    pub data: DataConfig,
    pub total_steps: u64,
    pub batch_size: usize,
    pub log_interval: u64,
    pub seed: u64,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    /// Held-out examples scored at each log point.
    #[serde(default = "default_heldout_size")]
    pub heldout_size: usize,
    /// Write elapsed seconds in the metrics; off makes runs byte-reproducible.
    #[serde(default)]
    pub record_wallclock: bool,
}

fn default_heldout_size() -> usize {
    128
}

impl RunConfig {
    /// A small Countdown configuration; paths are left for the caller.
    pub fn countdown_default(
        mode: TrainMode,
        train_path: PathBuf,
        heldout_path: Option<PathBuf>,
    ) -> Self {
        let prompt_len = 16;
        let response_len = 16;
        let mut model = TransformerConfig::desk(Tokenizer::new().vocab_size());
        model.d_model = 64;
        model.n_heads = 4;
        model.n_layers = 2;
        model.d_ff = 128;
        model.max_seq_len = 1 + prompt_len + response_len;
        let config = Self {
            model,
            mode,
            optim: OptimConfig::default(),
            cart: CartConfig::default(),
            schedule: NoiseSchedule::Linear,
            data: DataConfig {
                task: TaskKind::Countdown,
                train_path,
                heldout_path,
                prompt_len,
                response_len,
            },
            total_steps: 2000,
            batch_size: 16,
            log_interval: 50,
            seed: 0,
            init_checkpoint: None,
            heldout_size: default_heldout_size(),
            record_wallclock: false,
        };
        config.normalized()
    }

    pub fn seq_len(&self) -> usize {
        1 + self.data.prompt_len + self.data.response_len
    }

    /// Copy with the attention mode forced by the training mode.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        c.model.attention_mode = self.mode.attention_mode();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.adamw.validate()?;
        if self.mode.is_diffusion() {
            self.cart.validate()?;
        }
        let bad = |m: String| Err(Error::Usage(format!("invalid run config: {m}")));
        if self.model.attention_mode != self.mode.attention_mode() {
            return bad(format!(
                "mode {:?} requires {:?} attention",
                self.mode,
                self.mode.attention_mode()
            ));
        }
        if self.seq_len() > self.model.max_seq_len {
            return bad(format!(
                "1 + prompt_len + response_len = {} exceeds max_seq_len {}",
                self.seq_len(),
                self.model.max_seq_len
            ));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return bad("total_steps, batch_size and log_interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.optim.min_lr_ratio) || !(self.optim.grad_clip >= 0.0) {
            return bad("min_lr_ratio must lie in [0, 1] and grad_clip be >= 0".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// FNV-1a 64 of the compact JSON encoding, as 16 hex digits.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:016x}", fnv1a(&bytes))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Dotted paths of every leaf at which the two configs differ.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    fn walk(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let path = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(
                        &path,
                        x.get(k).unwrap_or(&Value::Null),
                        y.get(k).unwrap_or(&Value::Null),
                        out,
                    );
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    walk("", &va, &vb, &mut out);
    out
}

/// Seed precedence: explicit flag, then the `DDLM_SEED` value, then the file.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, file: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("DDLM_SEED={v:?} is not an unsigned integer"))),
        None => Ok(file),
    }
}
