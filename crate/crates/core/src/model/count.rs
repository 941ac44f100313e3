use serde::Serialize;

use super::{Architecture, AttentionKind, FfVariant, ModelConfig};
use crate::attention::OperatorParams;
use crate::error::Result;
use crate::ff::{FullFfParams, RandomFfParams};
use crate::mutation::{self, Mutation};

/// Closed-form trainable parameter counts by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub embedding: usize,
    /// Operator-initialization projections of evolving blocks.
    pub operators: usize,
    /// Per-depth attention pieces: depth codes, output projections, norms
    /// (or all four projections for standard attention).
    pub attention_layers: usize,
    pub feed_forward: usize,
    pub head: usize,
    pub total: usize,
}

impl ParamBreakdown {
    pub fn attention_path(&self) -> usize {
        self.operators + self.attention_layers
    }
}

pub fn count_params(c: &ModelConfig) -> Result<ParamBreakdown> {
    c.validate()?;
    let d = c.d;
    let norm = if mutation::is(Mutation::ParamCount) || !c.post_norm { 0 } else { 2 * d };
    let dims = c.attention_dims()?;
    let decoder = c.architecture == Architecture::EncoderDecoder;
    let stacks = if decoder { 2 } else { 1 };
    let depth = c.total_depth();

    let (op_sets, per_attention) = match c.attention {
        AttentionKind::Evolving => (c.num_blocks * stacks + if decoder { c.num_blocks } else { 0 }, c.d_prime + d * d + norm),
        AttentionKind::Standard => (0, 4 * d * d + norm),
    };
    let attentions_per_depth = if decoder { 3 } else { 1 };
    let ff = match c.ff_variant {
        FfVariant::Full => FullFfParams::count(d, c.d_ff),
        FfVariant::Random => RandomFfParams::<f64>::count(d, c.d_ff),
    } + norm;

    let mut b = ParamBreakdown {
        embedding: c.vocab_size * d,
        operators: op_sets * OperatorParams::count(dims),
        attention_layers: depth * attentions_per_depth * per_attention,
        feed_forward: depth * stacks * ff,
        head: if decoder { 0 } else { 2 * d + d * c.num_classes + c.num_classes },
        total: 0,
    };
    if mutation::is(Mutation::ParamCount) && !decoder {
        b.head -= 2 * d;
    }
    b.total = b.embedding + b.operators + b.attention_layers + b.feed_forward + b.head;
    Ok(b)
}
