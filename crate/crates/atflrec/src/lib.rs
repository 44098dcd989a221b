//! atflrec: a desk-scale multimodal recommender that fuses audio and text.
//!
//! The pipeline: synthetic interaction data with controllable signal, log-mel
//! filterbank (FBank) audio features, an MLP audio embedder, a from-scratch
//! transformer text encoder fine-tuned through LoRA adapters in three
//! topologies, pooling-based modality fusion, a K-shot instruction-tuning
//! training loop, and an AUC-based ablation harness.

pub mod audio;
pub mod embedder;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod text;
