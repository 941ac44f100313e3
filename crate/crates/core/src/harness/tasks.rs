use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BOS, EOS};

/// First token id available to task content; lower ids are pad, bos, eos.
pub const FIRST_CONTENT_TOKEN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    Listops,
}

impl Task {
    pub fn is_seq2seq(self) -> bool {
        matches!(self, Task::Copy | Task::Reverse)
    }
}

/// A source sequence and its target, both without special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Seq2SeqSample {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Seq2SeqSample {
    /// Encoder input: `src + [EOS]`.
    pub fn encoder_input(&self) -> Vec<usize> {
        let mut v = self.src.clone();
        v.push(EOS);
        v
    }

    /// Decoder input: `[BOS] + tgt`.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = vec![BOS];
        v.extend(&self.tgt);
        v
    }

    /// Per-position labels: `tgt + [EOS]`.
    pub fn labels(&self) -> Vec<usize> {
        let mut v = self.tgt.clone();
        v.push(EOS);
        v
    }
}

/// Uniform random content sequences; the target is the source itself
/// (`reverse == false`) or the source reversed.
pub fn gen_copy_batch(
    vocab: usize,
    len_range: (usize, usize),
    batch: usize,
    reverse: bool,
    seed: u64,
) -> Result<Vec<Seq2SeqSample>> {
    let (lo, hi) = len_range;
    if vocab <= FIRST_CONTENT_TOKEN {
        return Err(Error::Input(format!("vocabulary {vocab} has no content tokens")));
    }
    if lo == 0 || lo > hi {
        return Err(Error::Input(format!("length range {lo}..={hi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..batch)
        .map(|_| {
            let n = rng.gen_range(lo..=hi);
            let src: Vec<usize> = (0..n).map(|_| rng.gen_range(FIRST_CONTENT_TOKEN..vocab)).collect();
            let mut tgt = src.clone();
            if reverse {
                tgt.reverse();
            }
            Seq2SeqSample { src, tgt }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_follow_the_task() {
        let s = Seq2SeqSample { src: vec![5, 3, 7], tgt: vec![5, 3, 7] };
        assert_eq!(s.encoder_input(), [5, 3, 7, EOS]);
        assert_eq!(s.decoder_input(), [BOS, 5, 3, 7]);
        assert_eq!(s.labels(), [5, 3, 7, EOS]);
        for sample in gen_copy_batch(16, (1, 8), 20, true, 3).unwrap() {
            let mut r = sample.src.clone();
            r.reverse();
            assert_eq!(sample.tgt, r);
            assert!(sample.src.iter().all(|&t| (3..16).contains(&t)));
        }
        for sample in gen_copy_batch(16, (1, 8), 20, false, 3).unwrap() {
            assert_eq!(sample.tgt, sample.src);
        }
    }

    #[test]
    fn same_seed_same_batch() {
        assert_eq!(gen_copy_batch(16, (2, 9), 8, false, 42).unwrap(), gen_copy_batch(16, (2, 9), 8, false, 42).unwrap());
        assert_ne!(gen_copy_batch(16, (2, 9), 8, false, 42).unwrap(), gen_copy_batch(16, (2, 9), 8, false, 43).unwrap());
    }
}
