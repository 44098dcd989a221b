//! MLP audio embedder: per-frame FBank vectors -> 256-d hidden (SiLU) ->
//! d_model, batch-normalized over the frame axis, then pooled over time and
//! fused across the liked/target items.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::FbankMatrix;
use crate::model::lora::{lora_linear, LoraAdapter};
use crate::model::{ForwardCtx, ModelError, ParamKind, Result};
use crate::tensor::{batchnorm_eval, batchnorm_train, pool, PoolMethod, Tensor};

/// The hidden width of the embedder is fixed.
pub const EMBED_HIDDEN: usize = 256;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Trainable parameters of the audio embedder plus batchnorm buffers.
pub struct AudioEmbedderParams {
    pub n_mels: usize,
    pub d_model: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_running_mean: Tensor,
    pub bn_running_var: Tensor,
}

impl AudioEmbedderParams {
    pub fn init(n_mels: usize, d_model: usize, rng: &mut ChaCha20Rng) -> AudioEmbedderParams {
        let gauss = |rng: &mut ChaCha20Rng, n: usize, std: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| dist.sample(rng)).collect()
        };
        let w1_std = 1.0 / (n_mels as f64).sqrt();
        let w2_std = 1.0 / (EMBED_HIDDEN as f64).sqrt();
        AudioEmbedderParams {
            n_mels,
            d_model,
            w1: Tensor::leaf(gauss(rng, n_mels * EMBED_HIDDEN, w1_std), &[n_mels, EMBED_HIDDEN], true)
                .unwrap(),
            b1: Tensor::zeros(&[EMBED_HIDDEN], true),
            w2: Tensor::leaf(gauss(rng, EMBED_HIDDEN * d_model, w2_std), &[EMBED_HIDDEN, d_model], true)
                .unwrap(),
            b2: Tensor::zeros(&[d_model], true),
            bn_gamma: Tensor::leaf(vec![1.0; d_model], &[d_model], true).unwrap(),
            bn_beta: Tensor::zeros(&[d_model], true),
            bn_running_mean: Tensor::zeros(&[d_model], false),
            bn_running_var: Tensor::leaf(vec![1.0; d_model], &[d_model], false).unwrap(),
        }
    }

    pub(crate) fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f("embedder.w1", &self.w1, ParamKind::Trainable);
        f("embedder.b1", &self.b1, ParamKind::Trainable);
        f("embedder.w2", &self.w2, ParamKind::Trainable);
        f("embedder.b2", &self.b2, ParamKind::Trainable);
        f("embedder.bn.gamma", &self.bn_gamma, ParamKind::Trainable);
        f("embedder.bn.beta", &self.bn_beta, ParamKind::Trainable);
        f("embedder.bn.running_mean", &self.bn_running_mean, ParamKind::Buffer);
        f("embedder.bn.running_var", &self.bn_running_var, ParamKind::Buffer);
    }
}

/// Per-frame projection chain. In train mode the frame axis acts as the
/// batch for normalization and running statistics are updated with
/// momentum 0.1; eval mode (or a frozen-batchnorm context) uses the
/// running statistics.
pub fn embed_frames(
    fbank: &FbankMatrix,
    p: &AudioEmbedderParams,
    audio_lora: Option<&LoraAdapter>,
    adapters_enabled: bool,
    ctx: &ForwardCtx,
) -> Result<Tensor> {
    if fbank.n_mels != p.n_mels {
        return Err(ModelError::Config(format!(
            "fbank width {} does not match embedder input width {}",
            fbank.n_mels, p.n_mels
        )));
    }
    if fbank.frames == 0 {
        return Err(ModelError::EmptySequence);
    }
    let x = Tensor::constant(fbank.values.clone(), &[fbank.frames, p.n_mels])?;
    let h = x.matmul(&p.w1)?.add_bias(&p.b1)?.silu()?;
    let y = lora_linear(&h, &p.w2, &p.b2, audio_lora, adapters_enabled)?;
    if ctx.train && !ctx.frozen_batchnorm {
        let (out, mean, var) = batchnorm_train(&y, &p.bn_gamma, &p.bn_beta, BN_EPS)?;
        let updated = |running: &Tensor, batch: &[f64]| {
            let cur = running.to_vec();
            let next: Vec<f64> = cur
                .iter()
                .zip(batch)
                .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
                .collect();
            running.set_data(&next);
        };
        updated(&p.bn_running_mean, &mean);
        updated(&p.bn_running_var, &var);
        Ok(out)
    } else {
        let mean = p.bn_running_mean.to_vec();
        let var = p.bn_running_var.to_vec();
        Ok(batchnorm_eval(&y, &p.bn_gamma, &p.bn_beta, &mean, &var, BN_EPS)?)
    }
}

/// Reduce the time axis of a [frames, d_model] embedding to one [1, d_model]
/// feature.
pub fn temporal_pool(seq: &Tensor, method: PoolMethod) -> Result<Tensor> {
    if seq.shape()[0] == 0 {
        return Err(ModelError::EmptySequence);
    }
    Ok(seq.reduce_rows(method)?)
}

/// Pool the liked-item features into one summary, then pool
/// {summary, target} with the same method. An empty liked list falls back
/// to the target alone (cold start).
pub fn fuse_item_audio(liked: &[Tensor], target: &Tensor, method: PoolMethod) -> Result<Tensor> {
    if liked.is_empty() {
        log::warn!("fuse_item_audio: empty liked list, falling back to target audio alone");
        return Ok(target.clone());
    }
    let summary = pool(liked, method)?;
    Ok(pool(&[summary, target.clone()], method)?)
}

/// Convenience for tests and tools: a seeded embedder.
pub fn seeded_embedder(n_mels: usize, d_model: usize, seed: u64) -> AudioEmbedderParams {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    AudioEmbedderParams::init(n_mels, d_model, &mut rng)
}
