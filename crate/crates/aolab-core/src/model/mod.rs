//! Transformer models.
//!
//! One decoder architecture serves both left-to-right and any-order
//! training: sequences arrive in decode order, every input slot announces
//! the position it is about to predict, and a begin-of-order slot anchors
//! the first prediction. The encoder variant is a plain bidirectional
//! transformer over masked inputs, kept around as the masked-diffusion
//! baseline.
//!
//! Submodules: parameter containers and init ([`params`]), attention
//! masks ([`mask`]), forward passes ([`forward`]), reverse-mode gradients
//! ([`backward`]), incremental decoding state ([`cache`]), and checkpoint
//! I/O ([`checkpoint`]).

pub mod backward;
pub mod cache;
pub mod checkpoint;
pub mod forward;
pub mod mask;
pub mod params;

pub use backward::backward;
pub use cache::DecoderCache;
pub use forward::{forward_decoder, forward_encoder, slots_for_order, ForwardOutput, SlotInput};
pub use mask::AttentionMask;
pub use params::Parameters;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::Result;

/// Model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Decoder over permuted sequences with announced target positions.
    DecoderAnyOrder,
    /// Encoder over masked sequences in natural position order.
    EncoderMdm,
}

/// How the decoder learns which position each slot predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Target-position embedding added to the input embedding only.
    AddOnce,
    /// Added to the input and again before every block, one shared table.
    AddPerBlockShared,
    /// Added to the input and before every block, independent tables.
    AddPerBlockLearned,
    /// A small target-position code modulates every layer norm's scale and
    /// shift through zero-initialized projections, so an untrained model
    /// behaves exactly as if no target were announced.
    #[serde(rename = "adaln")]
    AdaLn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ctx_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_injection")]
    pub injection: Injection,
    /// Width of the target-position code used by [`Injection::AdaLn`].
    #[serde(default = "default_target_pe_dim")]
    pub target_pe_dim: usize,
}

fn default_injection() -> Injection {
    Injection::AdaLn
}

fn default_target_pe_dim() -> usize {
    128
}

impl ModelConfig {
    /// The desk-scale preset: 4 layers, width 256, 4 heads of 64.
    pub fn desk(family: Family, injection: Injection, vocab_size: usize, ctx_len: usize) -> Self {
        ModelConfig {
            family,
            n_layers: 4,
            d_model: 256,
            n_heads: 4,
            ctx_len,
            vocab_size,
            injection,
            target_pe_dim: 128,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.ctx_len == 0
            || self.vocab_size < 2
        {
            return Err(CoreError::config(format!("degenerate model config: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.family == Family::DecoderAnyOrder
            && self.injection == Injection::AdaLn
            && self.target_pe_dim == 0
        {
            return Err(CoreError::config("adaln needs target_pe_dim > 0"));
        }
        Ok(())
    }
}
