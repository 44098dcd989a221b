//! The transformer encoder with LoRA adapters in three topologies, modality
//! fusion, and the classifier head.
//!
//! Base encoder weights (embeddings, projections, layernorms) are frozen at
//! initialization; only adapters, the audio embedder, and the classifier
//! head ever train.

pub mod checkpoint;
pub mod lora;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::FbankMatrix;
use crate::embedder::{embed_frames, fuse_item_audio, temporal_pool, AudioEmbedderParams};
use crate::report::sha256_hex;
use crate::tensor::{add_to_row, concat_cols, gather_rows, pool, PoolMethod, Tensor, TensorError};
use crate::text::TokenSequence;
use lora::{lora_linear, LoraAdapter};

const LN_EPS: f64 = 1e-5;
/// Most-recent liked items whose audio a single sample consumes.
pub const LIKED_AUDIO_CAP: usize = 10;

#[derive(Debug)]
pub enum ModelError {
    Tensor(TensorError),
    Config(String),
    /// The variant needs audio but the sample has none.
    MissingModality { variant: Variant },
    /// Attention mask selects zero positions.
    EmptyInput,
    /// An embedding sequence with zero frames.
    EmptySequence,
    TokenOutOfRange { id: usize, vocab: usize },
    SequenceLength { got: usize, want: usize },
    Checkpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tensor(e) => write!(f, "tensor error: {e}"),
            Self::Config(msg) => write!(f, "model config: {msg}"),
            Self::MissingModality { variant } => {
                write!(f, "variant {variant} requires audio features but the sample has none")
            }
            Self::EmptyInput => write!(f, "attention mask selects no positions"),
            Self::EmptySequence => write!(f, "empty frame sequence"),
            Self::TokenOutOfRange { id, vocab } => {
                write!(f, "token id {id} outside vocabulary of size {vocab}")
            }
            Self::SequenceLength { got, want } => {
                write!(f, "token sequence length {got}, expected {want}")
            }
            Self::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Encoder shape. `max_len` is pinned to the tokenizer's fixed length.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    /// Filled from the built vocabulary when 0.
    pub vocab_size: usize,
    pub dropout: f64,
    /// Optional causal attention masking; bidirectional by default.
    pub causal: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_width: 256,
            max_len: crate::text::MAX_LEN,
            vocab_size: 0,
            dropout: 0.1,
            causal: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len != crate::text::MAX_LEN {
            return Err(ModelError::Config(format!(
                "max_len {} must equal the fixed sequence length {}",
                self.max_len,
                crate::text::MAX_LEN
            )));
        }
        if self.n_layers == 0 {
            return Err(ModelError::Config("n_layers must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// The three fine-tuning topologies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Variant {
    /// Disjoint adapter sets fine-tune audio and text independently;
    /// features fuse after the encoder.
    DualLora,
    /// Audio is injected into the token stream and one shared adapter set
    /// fine-tunes the fused pass.
    SingleLoraFused,
    /// Text-only baseline; audio inputs are ignored entirely.
    TextOnlyLora,
}

impl Variant {
    pub fn uses_audio(&self) -> bool {
        !matches!(self, Variant::TextOnlyLora)
    }

    pub fn all() -> [Variant; 3] {
        [Variant::DualLora, Variant::SingleLoraFused, Variant::TextOnlyLora]
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            Variant::DualLora => 0,
            Variant::SingleLoraFused => 1,
            Variant::TextOnlyLora => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Variant> {
        match tag {
            0 => Ok(Variant::DualLora),
            1 => Ok(Variant::SingleLoraFused),
            2 => Ok(Variant::TextOnlyLora),
            other => Err(ModelError::Checkpoint(format!("unknown variant tag {other}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::DualLora => write!(f, "dual_lora"),
            Variant::SingleLoraFused => write!(f, "single_lora_fused"),
            Variant::TextOnlyLora => write!(f, "text_only_lora"),
        }
    }
}

/// Topology plus the two pooling knobs and adapter hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub variant: Variant,
    /// Pooling within the audio modality: frames -> feature, and
    /// liked/target stacking.
    pub intra_audio_pool: PoolMethod,
    /// Pooling across the audio and text features (dual topology only).
    pub cross_modal_pool: PoolMethod,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            variant: Variant::DualLora,
            intra_audio_pool: PoolMethod::Max,
            cross_modal_pool: PoolMethod::Sum,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }
}

impl VariantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lora_rank == 0 {
            return Err(ModelError::Config("lora_rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// Forward-pass mode switches.
pub struct ForwardCtx<'a> {
    pub train: bool,
    /// Dropout noise source; `None` disables dropout.
    pub rng: Option<&'a mut ChaCha20Rng>,
    /// Use running batchnorm statistics even in train mode.
    pub frozen_batchnorm: bool,
}

impl ForwardCtx<'_> {
    pub fn eval() -> ForwardCtx<'static> {
        ForwardCtx {
            train: false,
            rng: None,
            frozen_batchnorm: false,
        }
    }

    pub fn train_no_dropout() -> ForwardCtx<'static> {
        ForwardCtx {
            train: true,
            rng: None,
            frozen_batchnorm: false,
        }
    }
}

/// One instruction-tuning example, assembled from the dataset.
#[derive(Clone)]
pub struct RecSample {
    pub user: String,
    pub target_item: String,
    pub text: String,
    pub tokens: TokenSequence,
    /// Ids of liked-history items, time order; parallel to `liked_audio`.
    pub liked_items: Vec<String>,
    pub liked_audio: Vec<Rc<FbankMatrix>>,
    pub target_audio: Option<Rc<FbankMatrix>>,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Frozen base weight; checksummed for immutability.
    Frozen,
    /// Receives gradients and optimizer updates.
    Trainable,
    /// Mutable statistic (batchnorm running stats); neither frozen nor
    /// optimized.
    Buffer,
}

pub(crate) struct EncoderLayer {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

pub(crate) struct EncoderParams {
    pub token_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<EncoderLayer>,
}

pub(crate) struct LayerAdapters {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
}

/// One adapter group: q/v adapters for every layer, named under a common
/// prefix so groups can never collide.
pub(crate) struct LoraSet {
    pub group: String,
    pub layers: Vec<LayerAdapters>,
}

/// Every parameter of one model variant.
pub struct ModelParams {
    pub cfg: EncoderConfig,
    pub variant_cfg: VariantConfig,
    pub n_mels: usize,
    pub(crate) encoder: EncoderParams,
    pub(crate) text_lora: Option<LoraSet>,
    pub(crate) audio_lora: Option<LoraAdapter>,
    pub(crate) embedder: Option<AudioEmbedderParams>,
    pub(crate) head_w: Tensor,
    pub(crate) head_b: Tensor,
    adapters_enabled: Cell<bool>,
}

/// Cache of pooled per-item audio features, valid while parameters are
/// unchanged.
pub type AudioCache = HashMap<String, Tensor>;

/// Named parameter values: (name, shape, data).
pub type ParamSnapshot = Vec<(String, Vec<usize>, Vec<f64>)>;

impl ModelParams {
    pub fn init(
        cfg: EncoderConfig,
        variant_cfg: VariantConfig,
        n_mels: usize,
        seed: u64,
    ) -> Result<ModelParams> {
        cfg.validate()?;
        variant_cfg.validate()?;
        if cfg.vocab_size < 5 {
            return Err(ModelError::Config(format!(
                "vocab_size {} too small (needs reserved ids plus content)",
                cfg.vocab_size
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(crate::rng::derive(seed, "model-init"));
        let gauss = |rng: &mut ChaCha20Rng, n: usize, std: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| dist.sample(rng)).collect()
        };
        let d = cfg.d_model;
        let frozen_mat = |rng: &mut ChaCha20Rng, rows: usize, cols: usize| -> Tensor {
            let std = 1.0 / (rows as f64).sqrt();
            Tensor::leaf(gauss(rng, rows * cols, std), &[rows, cols], false).unwrap()
        };

        let token_emb =
            Tensor::leaf(gauss(&mut rng, cfg.vocab_size * d, 1.0), &[cfg.vocab_size, d], false)?;
        let pos_emb = Tensor::leaf(gauss(&mut rng, cfg.max_len * d, 1.0), &[cfg.max_len, d], false)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(EncoderLayer {
                wq: frozen_mat(&mut rng, d, d),
                bq: Tensor::zeros(&[d], false),
                wk: frozen_mat(&mut rng, d, d),
                bk: Tensor::zeros(&[d], false),
                wv: frozen_mat(&mut rng, d, d),
                bv: Tensor::zeros(&[d], false),
                wo: frozen_mat(&mut rng, d, d),
                bo: Tensor::zeros(&[d], false),
                ln1_gamma: Tensor::leaf(vec![1.0; d], &[d], false)?,
                ln1_beta: Tensor::zeros(&[d], false),
                ffn_w1: frozen_mat(&mut rng, d, cfg.ffn_width),
                ffn_b1: Tensor::zeros(&[cfg.ffn_width], false),
                ffn_w2: frozen_mat(&mut rng, cfg.ffn_width, d),
                ffn_b2: Tensor::zeros(&[d], false),
                ln2_gamma: Tensor::leaf(vec![1.0; d], &[d], false)?,
                ln2_beta: Tensor::zeros(&[d], false),
            });
        }
        let encoder = EncoderParams { token_emb, pos_emb, layers };

        let embedder = if variant_cfg.variant.uses_audio() {
            Some(AudioEmbedderParams::init(n_mels, d, &mut rng))
        } else {
            None
        };

        let head_w = Tensor::leaf(gauss(&mut rng, d, 1.0 / (d as f64).sqrt()), &[d, 1], true)?;
        let head_b = Tensor::zeros(&[1], true);

        let encoder_group = match variant_cfg.variant {
            Variant::SingleLoraFused => "lora.fused",
            _ => "lora.text",
        };
        let mut set = LoraSet {
            group: encoder_group.to_string(),
            layers: Vec::with_capacity(cfg.n_layers),
        };
        for i in 0..cfg.n_layers {
            set.layers.push(LayerAdapters {
                q: LoraAdapter::init(
                    &format!("{encoder_group}.layer{i}.q"),
                    d,
                    d,
                    variant_cfg.lora_rank,
                    variant_cfg.lora_alpha,
                    &mut rng,
                )?,
                v: LoraAdapter::init(
                    &format!("{encoder_group}.layer{i}.v"),
                    d,
                    d,
                    variant_cfg.lora_rank,
                    variant_cfg.lora_alpha,
                    &mut rng,
                )?,
            });
        }
        let audio_lora = if variant_cfg.variant == Variant::DualLora {
            Some(LoraAdapter::init(
                "lora.audio.w2",
                crate::embedder::EMBED_HIDDEN,
                d,
                variant_cfg.lora_rank,
                variant_cfg.lora_alpha,
                &mut rng,
            )?)
        } else {
            None
        };

        Ok(ModelParams {
            cfg,
            variant_cfg,
            n_mels,
            encoder,
            text_lora: Some(set),
            audio_lora,
            embedder,
            head_w,
            head_b,
            adapters_enabled: Cell::new(true),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant_cfg.variant
    }

    /// Toggle every adapter's contribution; the frozen-base model is this
    /// model with adapters disabled.
    pub fn set_adapters_enabled(&self, enabled: bool) {
        self.adapters_enabled.set(enabled);
    }

    pub fn adapters_enabled(&self) -> bool {
        self.adapters_enabled.get()
    }

    pub(crate) fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        use ParamKind::*;
        f("encoder.token_emb", &self.encoder.token_emb, Frozen);
        f("encoder.pos_emb", &self.encoder.pos_emb, Frozen);
        for (i, l) in self.encoder.layers.iter().enumerate() {
            let p = |suffix: &str| format!("encoder.layer{i}.{suffix}");
            f(&p("attn.wq"), &l.wq, Frozen);
            f(&p("attn.bq"), &l.bq, Frozen);
            f(&p("attn.wk"), &l.wk, Frozen);
            f(&p("attn.bk"), &l.bk, Frozen);
            f(&p("attn.wv"), &l.wv, Frozen);
            f(&p("attn.bv"), &l.bv, Frozen);
            f(&p("attn.wo"), &l.wo, Frozen);
            f(&p("attn.bo"), &l.bo, Frozen);
            f(&p("ln1.gamma"), &l.ln1_gamma, Frozen);
            f(&p("ln1.beta"), &l.ln1_beta, Frozen);
            f(&p("ffn.w1"), &l.ffn_w1, Frozen);
            f(&p("ffn.b1"), &l.ffn_b1, Frozen);
            f(&p("ffn.w2"), &l.ffn_w2, Frozen);
            f(&p("ffn.b2"), &l.ffn_b2, Frozen);
            f(&p("ln2.gamma"), &l.ln2_gamma, Frozen);
            f(&p("ln2.beta"), &l.ln2_beta, Frozen);
        }
        if let Some(e) = &self.embedder {
            e.for_each_param(f);
        }
        f("head.w", &self.head_w, Trainable);
        f("head.b", &self.head_b, Trainable);
        if let Some(set) = &self.text_lora {
            for (i, la) in set.layers.iter().enumerate() {
                f(&format!("{}.layer{i}.q.a", set.group), &la.q.a, Trainable);
                f(&format!("{}.layer{i}.q.b", set.group), &la.q.b, Trainable);
                f(&format!("{}.layer{i}.v.a", set.group), &la.v.a, Trainable);
                f(&format!("{}.layer{i}.v.b", set.group), &la.v.b, Trainable);
            }
        }
        if let Some(a) = &self.audio_lora {
            f("lora.audio.w2.a", &a.a, Trainable);
            f("lora.audio.w2.b", &a.b, Trainable);
        }
    }

    /// Exactly the parameters the optimizer may touch: adapter A/B pairs,
    /// the audio embedder (audio variants), the classifier head, and the
    /// batchnorm affine parameters.
    pub fn trainable_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, t, kind| {
            if kind == ParamKind::Trainable {
                out.push((name.to_string(), t.clone()));
            }
        });
        out
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor, ParamKind)> {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, t, kind| out.push((name.to_string(), t.clone(), kind)));
        out
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.trainable_parameters() {
            t.zero_grad();
        }
    }

    /// SHA-256 over every frozen base weight, in registration order.
    pub fn frozen_checksum(&self) -> String {
        let mut bytes = Vec::new();
        self.for_each_param(&mut |name, t, kind| {
            if kind == ParamKind::Frozen {
                bytes.extend_from_slice(name.as_bytes());
                for v in t.data().iter() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        });
        sha256_hex(&bytes)
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        let mut out = Vec::new();
        self.for_each_param(&mut |name, t, _| {
            out.push((name.to_string(), t.shape().to_vec(), t.to_vec()));
        });
        out
    }

    pub fn restore(&self, snap: &ParamSnapshot) -> Result<()> {
        let named = self.named_parameters();
        if named.len() != snap.len() {
            return Err(ModelError::Checkpoint(format!(
                "parameter count mismatch: model has {}, snapshot has {}",
                named.len(),
                snap.len()
            )));
        }
        let index: HashMap<&str, &Tensor> =
            named.iter().map(|(n, t, _)| (n.as_str(), t)).collect();
        for (name, shape, data) in snap {
            let t = index.get(name.as_str()).ok_or_else(|| {
                ModelError::Checkpoint(format!("snapshot parameter '{name}' not in model"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter '{name}': shape {:?} vs snapshot {:?}",
                    t.shape(),
                    shape
                )));
            }
            t.set_data(data);
        }
        Ok(())
    }

    /// A copy of this model with every adapter folded into its base weight
    /// and the adapters removed.
    pub fn merge_adapters(&self) -> Result<ModelParams> {
        let mut merged = ModelParams::init(self.cfg.clone(), self.variant_cfg.clone(), self.n_mels, 0)?;
        merged.restore(&self.snapshot())?;
        if let Some(set) = &merged.text_lora {
            for (layer, la) in merged.encoder.layers.iter().zip(&set.layers) {
                layer.wq.set_data(&la.q.merged_weight(&layer.wq));
                layer.wv.set_data(&la.v.merged_weight(&layer.wv));
            }
        }
        if let (Some(a), Some(e)) = (&merged.audio_lora, &merged.embedder) {
            e.w2.set_data(&a.merged_weight(&e.w2));
        }
        merged.text_lora = None;
        merged.audio_lora = None;
        Ok(merged)
    }

    fn maybe_dropout(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        if ctx.train && self.cfg.dropout > 0.0 {
            if let Some(rng) = ctx.rng.as_deref_mut() {
                return Ok(x.dropout(self.cfg.dropout, rng)?);
            }
        }
        Ok(x.clone())
    }

    fn attention(
        &self,
        x: &Tensor,
        layer: &EncoderLayer,
        adapters: Option<&LayerAdapters>,
        causal_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let enabled = self.adapters_enabled.get();
        let q = lora_linear(x, &layer.wq, &layer.bq, adapters.map(|a| &a.q), enabled)?;
        let k = lora_linear(x, &layer.wk, &layer.bk, None, enabled)?;
        let v = lora_linear(x, &layer.wv, &layer.bv, adapters.map(|a| &a.v), enabled)?;
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            if let Some(mask) = causal_mask {
                scores = scores.add(mask)?;
            }
            let attn = scores.softmax_rows()?;
            heads.push(attn.matmul(&vh)?);
        }
        let merged = concat_cols(&heads)?;
        Ok(lora_linear(&merged, &layer.wo, &layer.bo, None, enabled)?)
    }

    /// Run the encoder over the unmasked positions and mean-pool the final
    /// states into a [1, d_model] text feature. `inject` is added onto the
    /// first unmasked position's embedding.
    pub(crate) fn encode(
        &self,
        tokens: &TokenSequence,
        inject: Option<&Tensor>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        if tokens.ids.len() != self.cfg.max_len || tokens.mask.len() != self.cfg.max_len {
            return Err(ModelError::SequenceLength {
                got: tokens.ids.len(),
                want: self.cfg.max_len,
            });
        }
        let positions: Vec<usize> = tokens
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1)
            .map(|(i, _)| i)
            .collect();
        if positions.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let ids: Vec<usize> = positions.iter().map(|&p| tokens.ids[p] as usize).collect();
        for &id in &ids {
            if id >= self.cfg.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: self.cfg.vocab_size,
                });
            }
        }
        let tok = gather_rows(&self.encoder.token_emb, &ids)?;
        let pos = gather_rows(&self.encoder.pos_emb, &positions)?;
        let mut x = tok.add(&pos)?;
        if let Some(v) = inject {
            x = add_to_row(&x, 0, v)?;
        }
        let causal_mask = if self.cfg.causal {
            Some(causal_mask(positions.len()))
        } else {
            None
        };
        for (li, layer) in self.encoder.layers.iter().enumerate() {
            let adapters = self.text_lora.as_ref().map(|s| &s.layers[li]);
            let attn = self.attention(&x, layer, adapters, causal_mask.as_ref())?;
            let attn = self.maybe_dropout(&attn, ctx)?;
            x = x.add(&attn)?.layernorm(&layer.ln1_gamma, &layer.ln1_beta, LN_EPS)?;
            let ff = lora_linear(&x, &layer.ffn_w1, &layer.ffn_b1, None, true)?.silu()?;
            let ff = lora_linear(&ff, &layer.ffn_w2, &layer.ffn_b2, None, true)?;
            let ff = self.maybe_dropout(&ff, ctx)?;
            x = x.add(&ff)?.layernorm(&layer.ln2_gamma, &layer.ln2_beta, LN_EPS)?;
        }
        Ok(x.reduce_rows(PoolMethod::Mean)?)
    }

    /// Text feature for a tokenized instruction (the encoder operation).
    pub fn encoder_forward(&self, tokens: &TokenSequence, ctx: &mut ForwardCtx) -> Result<Tensor> {
        self.encode(tokens, None, ctx)
    }

    fn item_audio_feature(
        &self,
        item: &str,
        fbank: &FbankMatrix,
        ctx: &mut ForwardCtx,
        cache: &mut Option<&mut AudioCache>,
    ) -> Result<Tensor> {
        if let Some(c) = cache.as_deref_mut() {
            if let Some(hit) = c.get(item) {
                return Ok(hit.clone());
            }
        }
        let embedder = self
            .embedder
            .as_ref()
            .ok_or(ModelError::MissingModality { variant: self.variant() })?;
        let frames = embed_frames(
            fbank,
            embedder,
            self.audio_lora.as_ref(),
            self.adapters_enabled.get(),
            ctx,
        )?;
        let feature = temporal_pool(&frames, self.variant_cfg.intra_audio_pool)?;
        if let Some(c) = cache.as_deref_mut() {
            c.insert(item.to_string(), feature.clone());
        }
        Ok(feature)
    }

    /// Liked-history audio (capped to the most recent [`LIKED_AUDIO_CAP`])
    /// fused with the target item's audio.
    fn fused_audio(
        &self,
        sample: &RecSample,
        ctx: &mut ForwardCtx,
        cache: &mut Option<&mut AudioCache>,
    ) -> Result<Tensor> {
        let target_fb = sample
            .target_audio
            .as_ref()
            .ok_or(ModelError::MissingModality { variant: self.variant() })?;
        let target = self.item_audio_feature(&sample.target_item, target_fb, ctx, cache)?;
        let start = sample.liked_audio.len().saturating_sub(LIKED_AUDIO_CAP);
        let mut liked = Vec::new();
        for (item, fb) in sample.liked_items[start..]
            .iter()
            .zip(&sample.liked_audio[start..])
        {
            liked.push(self.item_audio_feature(item, fb, ctx, cache)?);
        }
        Ok(fuse_item_audio(&liked, &target, self.variant_cfg.intra_audio_pool)?)
    }

    /// Single linear layer d_model -> 1.
    pub fn classify(&self, feature: &Tensor) -> Result<Tensor> {
        Ok(feature.matmul(&self.head_w)?.add_bias(&self.head_b)?)
    }

    /// Variant-specific forward pass to a single logit.
    pub fn forward_variant(
        &self,
        sample: &RecSample,
        ctx: &mut ForwardCtx,
        mut cache: Option<&mut AudioCache>,
    ) -> Result<Tensor> {
        match self.variant_cfg.variant {
            Variant::TextOnlyLora => {
                let text = self.encode(&sample.tokens, None, ctx)?;
                self.classify(&text)
            }
            Variant::DualLora => {
                let audio = self.fused_audio(sample, ctx, &mut cache)?;
                let text = self.encode(&sample.tokens, None, ctx)?;
                let fused = pool(&[audio, text], self.variant_cfg.cross_modal_pool)?;
                self.classify(&fused)
            }
            Variant::SingleLoraFused => {
                let audio = self.fused_audio(sample, ctx, &mut cache)?;
                let text = self.encode(&sample.tokens, Some(&audio), ctx)?;
                self.classify(&text)
            }
        }
    }
}

fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = -1e30;
        }
    }
    Tensor::constant(data, &[n, n]).unwrap()
}

#[cfg(test)]
mod tests;
