//! Transformers whose attention logits evolve over depth from operators
//! computed once per block, with feed-forward layers factorized through
//! frozen random sine-cosine rotation matrices.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape and the primitive ops.
//! * [`depth`]: depth codes, random rotation matrices and position tables.
//! * [`attention`]: evolution operators, evolved logits and attention layers.
//! * [`ff`]: full and random-rotation feed-forward layers.
//! * [`model`]: encoder-only and encoder-decoder assemblies, parameter accounting.
//! * [`harness`]: optimizer, schedule, losses, synthetic tasks, checkpoints, training.
//! * [`oracles`]: brute-force reference implementations and the verify suites.

pub mod attention;
pub mod depth;
pub mod error;
pub mod ff;
pub mod harness;
pub mod model;
pub mod mutation;
pub mod oracles;
pub mod tensor;

pub use error::{Error, Result};
