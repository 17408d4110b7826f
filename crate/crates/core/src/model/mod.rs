//! A small pre-norm Transformer mask predictor.
//!
//! Logits at position `i` always predict the token at position `i + 1`, in
//! both attention modes. This keeps a causally trained model's output head
//! meaningful when the same weights are run with full attention, which is
//! what makes [`to_diffusion_init`] a pure metadata flip.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{embedding, RandomStream, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Position `i` attends to positions `<= i`.
    Causal,
    /// Every position attends to every position.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub attention_mode: AttentionMode,
    pub rope_base: f64,
    #[serde(default)]
    pub activation: Activation,
    pub bos_id: u32,
    pub eos_id: u32,
    pub pad_id: u32,
    pub mask_id: u32,
}

impl TransformerConfig {
    /// Desk-scale defaults for a character vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        use crate::tasks::tokenizer::{BOS, EOS, MASK, PAD};
        Self {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 344,
            max_seq_len: 256,
            attention_mode: AttentionMode::Causal,
            rope_base: 10_000.0,
            activation: Activation::Silu,
            bos_id: BOS,
            eos_id: EOS,
            pad_id: PAD,
            mask_id: MASK,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(format!("invalid model config: {m}")));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!(
                "head_dim {} must be even for rotary encoding",
                self.head_dim()
            ));
        }
        if self.vocab_size == 0 || self.d_ff == 0 || self.max_seq_len == 0 || self.n_layers == 0 {
            return bad("extents must be positive".into());
        }
        let ids = [self.bos_id, self.eos_id, self.pad_id, self.mask_id];
        for (i, &a) in ids.iter().enumerate() {
            if a as usize >= self.vocab_size {
                return bad(format!(
                    "special id {a} outside vocabulary {}",
                    self.vocab_size
                ));
            }
            if ids[i + 1..].contains(&a) {
                return bad(format!("special id {a} used twice"));
            }
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope_base {} must exceed 1", self.rope_base));
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: AttentionMode) -> Self {
        Self {
            attention_mode: mode,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<T: Real> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

/// All trainable weights. No biases: projections are `[in, out]` matrices
/// applied as `x · W`.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Real> {
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub output: Tensor<T>,
}

const LAYER_FIELDS: [&str; 9] = [
    "attn_norm",
    "wq",
    "wk",
    "wv",
    "wo",
    "mlp_norm",
    "w_gate",
    "w_up",
    "w_down",
];

impl<T: Real> LayerParams<T> {
    fn fields(&self) -> [&Tensor<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// Expected `(name, shape)` of every parameter, in canonical order.
pub fn param_layout(config: &TransformerConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
    let mut out = vec![("embedding".to_string(), vec![v, d])];
    for l in 0..config.n_layers {
        let shapes = [
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d, f],
            vec![d, f],
            vec![f, d],
        ];
        for (name, shape) in LAYER_FIELDS.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("output".to_string(), vec![d, v]));
    out
}

impl<T: Real> ModelParams<T> {
    /// Parameters in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("output".to_string(), &self.output));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.output);
        out
    }

    /// Rebuild from tensors in canonical order, checking every shape.
    pub fn from_tensors(config: &TransformerConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let layout = param_layout(config);
        if tensors.len() != layout.len() {
            return Err(Error::Load(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Load(format!(
                    "parameter `{name}` has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let embedding = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            })
            .collect();
        let final_norm = next();
        let output = next();
        Ok(Self {
            embedding,
            layers,
            final_norm,
            output,
        })
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.tensors().iter().for_each(|t| t.zero_grad());
    }

    pub fn cast<U: Real>(&self, config: &TransformerConfig) -> ModelParams<U> {
        ModelParams::from_tensors(
            config,
            self.tensors().iter().map(|t| t.cast::<U>()).collect(),
        )
        .expect("same layout")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Truncated-normal (std 0.02) projections, unit norm gains. Each tensor is
/// drawn from its own stream forked by name.
pub fn init_params<T: Real>(config: &TransformerConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let root = RandomStream::new(seed);
    let tensors = param_layout(config)
        .into_iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![T::one(); n]
            } else {
                let mut rng = root.fork_named(&name);
                (0..n).map(|_| T::lit(rng.truncated_normal(0.02))).collect()
            };
            Tensor::parameter(data, &shape)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(config, tensors)
}

/// Config plus weights.
#[derive(Debug, Clone)]
pub struct Transformer<T: Real = f32> {
    pub config: TransformerConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Transformer<T> {
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn mode(&self) -> AttentionMode {
        self.config.attention_mode
    }

    /// Logits `[B, L, V]` for equal-length token rows, using the configured
    /// attention mode.
    pub fn forward(&self, tokens: &[Vec<u32>]) -> Result<Tensor<T>> {
        forward(
            &self.params,
            &self.config,
            tokens,
            self.config.attention_mode,
        )
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            params: self.params.cast(&self.config),
        }
    }

    /// Same weights, different attention mode.
    pub fn with_mode(&self, mode: AttentionMode) -> Self {
        Self {
            config: self.config.with_mode(mode),
            params: self.params.clone(),
        }
    }
}

/// Switch a causally trained model to full attention. Weights are shared
/// verbatim; the shifted output head needs no change.
pub fn to_diffusion_init<T: Real>(ar: &Transformer<T>) -> Result<Transformer<T>> {
    if ar.config.attention_mode != AttentionMode::Causal {
        return Err(Error::Usage(
            "to_diffusion_init expects a causal-attention model".into(),
        ));
    }
    Ok(ar.with_mode(AttentionMode::Full))
}

/// Run the mask predictor. Output logits at `[b, i]` score the token at
/// `[b, i + 1]`.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    config: &TransformerConfig,
    tokens: &[Vec<u32>],
    mode: AttentionMode,
) -> Result<Tensor<T>> {
    let b = tokens.len();
    let l = tokens.first().map_or(0, Vec::len);
    if b == 0 || l == 0 {
        return Err(Error::Shape("forward: empty token batch".into()));
    }
    if tokens.iter().any(|row| row.len() != l) {
        return Err(Error::Shape("forward: token rows differ in length".into()));
    }
    if l > config.max_seq_len {
        return Err(Error::Capacity {
            len: l,
            limit: config.max_seq_len,
        });
    }
    let (d, h) = (config.d_model, config.n_heads);
    let dh = config.head_dim();
    let flat: Vec<u32> = tokens.iter().flatten().copied().collect();

    let mut x = embedding(&params.embedding, &flat)?.reshape(&[b, l, d])?;
    let scale = 1.0 / (dh as f64).sqrt();
    let split_heads =
        |t: &Tensor<T>| -> Result<Tensor<T>> { t.reshape(&[b, l, h, dh])?.permute(&[0, 2, 1, 3]) };

    for layer in &params.layers {
        let hn = x.rmsnorm(&layer.attn_norm)?;
        let q = split_heads(&hn.matmul(&layer.wq)?)?.rope(config.rope_base)?;
        let k = split_heads(&hn.matmul(&layer.wk)?)?.rope(config.rope_base)?;
        let v = split_heads(&hn.matmul(&layer.wv)?)?;
        let mut scores = q.matmul(&k.permute(&[0, 1, 3, 2])?)?.scale(scale);
        if mode == AttentionMode::Causal {
            scores = scores.causal_mask()?;
        }
        let attn = scores.softmax_lastdim()?.matmul(&v)?;
        let merged = attn.permute(&[0, 2, 1, 3])?.reshape(&[b, l, d])?;
        x = x.add(&merged.matmul(&layer.wo)?)?;

        let hn = x.rmsnorm(&layer.mlp_norm)?;
        let gate = hn.matmul(&layer.w_gate)?;
        let gate = match config.activation {
            Activation::Silu => gate.silu(),
            Activation::Gelu => gate.gelu(),
        };
        let up = hn.matmul(&layer.w_up)?;
        x = x.add(&gate.mul(&up)?.matmul(&layer.w_down)?)?;
    }
    x.rmsnorm(&params.final_norm)?.matmul(&params.output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: AttentionMode) -> TransformerConfig {
        TransformerConfig {
            vocab_size: 16,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 24,
            max_seq_len: 12,
            attention_mode: mode,
            rope_base: 10_000.0,
            activation: Activation::Silu,
            bos_id: 1,
            eos_id: 2,
            pad_id: 0,
            mask_id: 3,
        }
    }

    fn logits_row(t: &Tensor<f64>, l: usize, v: usize, b: usize, i: usize) -> Vec<f64> {
        t.data()[(b * l + i) * v..(b * l + i + 1) * v].to_vec()
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(AttentionMode::Full);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(AttentionMode::Full);
        c.mask_id = c.bos_id;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let c = tiny(AttentionMode::Causal);
        let a = init_params::<f32>(&c, 1).unwrap();
        let b = init_params::<f32>(&c, 1).unwrap();
        let z = init_params::<f32>(&c, 2).unwrap();
        for ((x, y), w) in a.tensors().iter().zip(b.tensors()).zip(z.tensors()) {
            assert_eq!(x.data(), y.data());
            if x.rank() == 2 {
                assert_ne!(x.data(), w.data());
            }
        }
        assert!(a.all_finite());
        assert!(a
            .tensors()
            .iter()
            .filter(|t| t.rank() == 2)
            .all(|t| t.data().iter().all(|v| v.abs() <= 0.04 + 1e-7)));
    }

    #[test]
    fn init_entropy_near_uniform() {
        let c = tiny(AttentionMode::Full);
        let m = Transformer::<f64>::init(c.clone(), 4).unwrap();
        let logits = m.forward(&[vec![1, 5, 6, 7, 8]]).unwrap();
        let probs = logits.softmax_lastdim().unwrap();
        for row in probs.data().chunks(c.vocab_size) {
            let h: f64 = -row.iter().map(|p| p * p.ln()).sum::<f64>();
            assert!((h - (c.vocab_size as f64).ln()).abs() < 0.05, "{h}");
        }
    }

    #[test]
    fn causal_mode_ignores_future_tokens() {
        let m = Transformer::<f64>::init(tiny(AttentionMode::Causal), 9).unwrap();
        let a = m.forward(&[vec![1, 5, 6, 7, 8]]).unwrap();
        let b = m.forward(&[vec![1, 5, 6, 9, 8]]).unwrap();
        for i in 0..3 {
            assert_eq!(logits_row(&a, 5, 16, 0, i), logits_row(&b, 5, 16, 0, i));
        }
        assert_ne!(logits_row(&a, 5, 16, 0, 3), logits_row(&b, 5, 16, 0, 3));
    }

    #[test]
    fn full_mode_sees_future_tokens() {
        let m = Transformer::<f64>::init(tiny(AttentionMode::Full), 9).unwrap();
        let a = m.forward(&[vec![1, 5, 6, 7, 8]]).unwrap();
        let b = m.forward(&[vec![1, 5, 6, 9, 8]]).unwrap();
        assert_ne!(logits_row(&a, 5, 16, 0, 0), logits_row(&b, 5, 16, 0, 0));
    }

    #[test]
    fn single_bos_identical_across_modes() {
        let m = Transformer::<f64>::init(tiny(AttentionMode::Causal), 3).unwrap();
        let full = to_diffusion_init(&m).unwrap();
        assert_eq!(
            m.forward(&[vec![1]]).unwrap().data(),
            full.forward(&[vec![1]]).unwrap().data()
        );
    }

    #[test]
    fn conversion_is_a_metadata_flip() {
        let m = Transformer::<f32>::init(tiny(AttentionMode::Causal), 3).unwrap();
        let full = to_diffusion_init(&m).unwrap();
        assert_eq!(full.mode(), AttentionMode::Full);
        assert!(to_diffusion_init(&full).is_err());
        let back = full.with_mode(AttentionMode::Causal);
        assert_eq!(back.config, m.config);
        for (a, b) in m.params.tensors().iter().zip(back.params.tensors()) {
            assert_eq!(a.data(), b.data());
        }
        let x = vec![vec![1, 4, 5, 6]];
        let (a, b) = (m.forward(&x).unwrap(), full.forward(&x).unwrap());
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn rotary_positions_break_permutation_equivariance() {
        let m = Transformer::<f64>::init(tiny(AttentionMode::Full), 5).unwrap();
        let a = m.forward(&[vec![4, 5, 6, 7]]).unwrap();
        let b = m.forward(&[vec![7, 4, 5, 6]]).unwrap();
        // rotated input, rotated output would match under equivariance
        assert_ne!(logits_row(&a, 4, 16, 0, 0), logits_row(&b, 4, 16, 0, 1));
    }

    #[test]
    fn overlong_input_is_a_capacity_error() {
        let m = Transformer::<f32>::init(tiny(AttentionMode::Full), 5).unwrap();
        let err = m.forward(&[vec![1; 13]]).unwrap_err();
        assert!(matches!(err, Error::Capacity { len: 13, limit: 12 }));
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = Transformer::<f64>::init(tiny(AttentionMode::Full), 5).unwrap();
        let both = m.forward(&[vec![1, 4, 5], vec![1, 8, 9]]).unwrap();
        let second = m.forward(&[vec![1, 8, 9]]).unwrap();
        assert_eq!(&both.data()[3 * 16..], second.data());
    }
}
