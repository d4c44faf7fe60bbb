//! Neural building blocks: frozen heterogeneous audio-encoder experts with
//! LoRA wraps, expert-specific aligners, a frozen toy causal language model,
//! and the LoRA adapter bank.

pub mod aligner;
pub mod checkpoint;
pub mod experts;
pub mod init;
pub mod lm;
pub mod lora;
pub mod tokenizer;

pub use aligner::Aligner;
pub use experts::{AudioExpert, AudioExpertBank};
pub use lm::{AdapterSet, FrozenCausalLm, LoraBank};
pub use lora::{LoraFactors, LoraLinear};

use serde::{Deserialize, Serialize};

/// Architecture hyperparameters. The defaults are the desk-scale toy
/// configuration; the gradcheck suite swaps in a much smaller variant.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Language-model hidden size (also the aligner output dimension).
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub max_ctx: usize,
    /// Number of LoRA adapters in the language bank.
    pub n_adapters: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Rank/scale of the wrap on each audio expert's final projection.
    pub audio_lora_rank: usize,
    pub audio_lora_alpha: f64,
    /// Convolutional expert: channels of the two conv layers and output dim.
    pub conv_channels: [usize; 2],
    pub conv_d_e: usize,
    /// Attention expert: patch edge, embedding dim, attention inner dim.
    pub patch: usize,
    pub attn_d_e: usize,
    pub attn_inner: usize,
    /// Spectrogram geometry the experts are built for.
    pub mel_bins: usize,
    pub frames: usize,
    /// Router input dimension (audio stage) and head hidden width.
    pub d_router: usize,
    pub proxy_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 2,
            n_blocks: 2,
            max_ctx: 256,
            n_adapters: 2,
            lora_rank: 4,
            lora_alpha: 8.0,
            audio_lora_rank: 2,
            audio_lora_alpha: 4.0,
            conv_channels: [8, 16],
            conv_d_e: 48,
            patch: 8,
            attn_d_e: 80,
            attn_inner: 40,
            mel_bins: 32,
            frames: 64,
            d_router: 32,
            proxy_channels: 8,
        }
    }
}

impl ModelConfig {
    /// Tiny variant for end-to-end gradient checks: same mechanisms,
    /// milliseconds scale.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_blocks: 1,
            max_ctx: 256,
            n_adapters: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            audio_lora_rank: 1,
            audio_lora_alpha: 2.0,
            conv_channels: [2, 3],
            conv_d_e: 6,
            patch: 8,
            attn_d_e: 10,
            attn_inner: 6,
            mel_bins: 16,
            frames: 24,
            d_router: 6,
            proxy_channels: 2,
        }
    }
}
