//! Deliberate fault injection for exercising the verify suites.
//!
//! A healthy process never sets a mutation. The CLI exposes a hidden
//! `--mutate` flag so tests can confirm that `verify` notices each fault.

use std::sync::atomic::{AtomicU8, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[repr(u8)]
pub enum Mutation {
    None = 0,
    /// Evolved logits omit the `T·A₂` term.
    DropKeyTerm = 1,
    /// Row term `A₁·T` is added along the key axis instead of the query axis.
    TransposedRowTerm = 2,
    /// Cosine half of a rotation matrix draws its own random weights.
    UnpairedRotation = 3,
    /// Layer-norm backward drops the projection onto the normalized input.
    LayerNormGrad = 4,
    /// Feed-forward layers skip the residual connection.
    FfResidual = 5,
    /// Closed-form parameter count forgets layer-norm parameters.
    ParamCount = 6,
}

impl Mutation {
    pub const ALL: [Mutation; 6] = [
        Mutation::DropKeyTerm,
        Mutation::TransposedRowTerm,
        Mutation::UnpairedRotation,
        Mutation::LayerNormGrad,
        Mutation::FfResidual,
        Mutation::ParamCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::None => "none",
            Mutation::DropKeyTerm => "drop-key-term",
            Mutation::TransposedRowTerm => "transposed-row-term",
            Mutation::UnpairedRotation => "unpaired-rotation",
            Mutation::LayerNormGrad => "layer-norm-grad",
            Mutation::FfResidual => "ff-residual",
            Mutation::ParamCount => "param-count",
        }
    }

    pub fn parse(s: &str) -> Option<Mutation> {
        std::iter::once(Mutation::None)
            .chain(Mutation::ALL)
            .find(|m| m.name() == s)
    }

    fn from_u8(v: u8) -> Mutation {
        std::iter::once(Mutation::None)
            .chain(Mutation::ALL)
            .find(|m| *m as u8 == v)
            .unwrap_or(Mutation::None)
    }
}

static ACTIVE: AtomicU8 = AtomicU8::new(Mutation::None as u8);

pub fn set(m: Mutation) {
    ACTIVE.store(m as u8, Ordering::SeqCst);
}

pub fn active() -> Mutation {
    Mutation::from_u8(ACTIVE.load(Ordering::Relaxed))
}

#[inline]
pub(crate) fn is(m: Mutation) -> bool {
    ACTIVE.load(Ordering::Relaxed) == m as u8
}
