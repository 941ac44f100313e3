use serde::{Deserialize, Serialize};

use crate::attention::AttentionDims;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfVariant {
    Random,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Operators once per block, depth-coded logits at every layer.
    Evolving,
    /// Ordinary multi-head attention with value projection at every layer.
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    EncoderOnly,
    EncoderDecoder,
}

fn default_attention() -> AttentionKind {
    AttentionKind::Evolving
}

fn yes() -> bool {
    true
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub d_prime: usize,
    pub heads: usize,
    pub num_blocks: usize,
    pub depth_per_block: usize,
    pub d_ff: usize,
    pub ff_variant: FfVariant,
    #[serde(default = "default_attention")]
    pub attention: AttentionKind,
    pub vocab_size: usize,
    #[serde(default)]
    pub num_classes: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
    pub architecture: Architecture,
    /// Layer norm after every residual sum.
    #[serde(default = "yes")]
    pub post_norm: bool,
}

impl ModelConfig {
    /// Desk-scale encoder-decoder: width 64, 8 heads, one block of depth 6.
    pub fn desk_seq2seq(vocab_size: usize, ff_variant: FfVariant) -> Self {
        Self {
            d: 64,
            d_prime: 64,
            heads: 8,
            num_blocks: 1,
            depth_per_block: 6,
            d_ff: 256,
            ff_variant,
            attention: AttentionKind::Evolving,
            vocab_size,
            num_classes: 0,
            max_len: 32,
            dropout: 0.0,
            seed: 0,
            architecture: Architecture::EncoderDecoder,
            post_norm: true,
        }
    }

    /// Base-size encoder-decoder (width 512) with `num_blocks` blocks over 6 layers.
    pub fn base(ff_variant: FfVariant, num_blocks: usize) -> Self {
        Self {
            d: 512,
            d_prime: 512,
            heads: 8,
            num_blocks,
            depth_per_block: 6 / num_blocks,
            d_ff: 2048,
            ff_variant,
            attention: AttentionKind::Evolving,
            vocab_size: 32_768,
            num_classes: 0,
            max_len: 256,
            dropout: 0.0,
            seed: 0,
            architecture: Architecture::EncoderDecoder,
            post_norm: true,
        }
    }

    /// Six-layer standard encoder-decoder at base width.
    pub fn base_standard() -> Self {
        Self {
            attention: AttentionKind::Standard,
            ff_variant: FfVariant::Full,
            ..Self::base(FfVariant::Full, 1)
        }
    }

    /// Tiny encoder used by gradient checks.
    pub fn tiny(architecture: Architecture, ff_variant: FfVariant) -> Self {
        Self {
            d: 8,
            d_prime: 8,
            heads: 2,
            num_blocks: 1,
            depth_per_block: 2,
            d_ff: 12,
            ff_variant,
            attention: AttentionKind::Evolving,
            vocab_size: 7,
            num_classes: if architecture == Architecture::EncoderOnly { 3 } else { 0 },
            max_len: 8,
            dropout: 0.0,
            seed: 5,
            architecture,
            post_norm: true,
        }
    }

    pub fn attention_dims(&self) -> Result<AttentionDims> {
        AttentionDims::new(self.d, self.d_prime, self.heads)
    }

    pub fn total_depth(&self) -> usize {
        self.num_blocks * self.depth_per_block
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return bad(format!("d={} must be even and positive", self.d));
        }
        if self.attention == AttentionKind::Evolving && (self.d_prime == 0 || !self.d_prime.is_multiple_of(2)) {
            return bad(format!("d_prime={} must be even and positive", self.d_prime));
        }
        self.attention_dims()?;
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive".into());
        }
        if self.vocab_size < 3 {
            return bad(format!("vocab_size={} leaves no room for pad/bos/eos", self.vocab_size));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout={} must lie in [0, 1)", self.dropout));
        }
        if self.architecture == Architecture::EncoderOnly && self.num_classes < 2 {
            return bad("encoder-only models need num_classes ≥ 2".into());
        }
        Ok(())
    }

    /// FNV-1a 32 over the canonical JSON encoding.
    pub fn hash(&self) -> u32 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut h: u32 = 0x811c_9dc5;
        for b in json {
            h ^= b as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
        h
    }
}
