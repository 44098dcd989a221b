//! The single JSON run configuration: world, features, model, training,
//! and ablation axes. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::audio::FbankConfig;
use crate::model::{EncoderConfig, Variant, VariantConfig};
use crate::synth::WorldSpec;
use crate::tensor::PoolMethod;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub fbank: FbankConfig,
    pub encoder: EncoderConfig,
    pub variant: VariantConfig,
    pub train: TrainConfig,
    /// Vocabulary budget including the 4 reserved ids.
    pub max_vocab: usize,
    pub grid: GridSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldSpec::default(),
            fbank: FbankConfig::default(),
            encoder: EncoderConfig::default(),
            variant: VariantConfig::default(),
            train: TrainConfig::default(),
            max_vocab: 2000,
            grid: GridSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn fingerprint(&self) -> String {
        crate::report::fingerprint_of(self)
    }
}

/// Ablation axes; empty axes fall back to the base config's single value.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub variants: Vec<Variant>,
    pub intra_audio_pools: Vec<PoolMethod>,
    pub cross_modal_pools: Vec<PoolMethod>,
    pub n_mels: Vec<usize>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            variants: Vec::new(),
            intra_audio_pools: Vec::new(),
            cross_modal_pools: Vec::new(),
            n_mels: Vec::new(),
            ks: Vec::new(),
            seeds: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn with_defaults() -> RunConfig {
        RunConfig::default()
    }
}
