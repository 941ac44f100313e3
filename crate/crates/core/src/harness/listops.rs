//! Nested list operations over single digits, labelled by their value.
//!
//! Token ids: 3..=12 are the digits 0..=9, 13..=16 open `[MAX`, `[MIN`,
//! `[MED`, `[SM`, and 17 closes a list.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const VOCAB: usize = 18;
pub const CLASSES: usize = 10;
const DIGIT0: usize = 3;
const OPEN0: usize = 13;
pub const CLOSE: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ListOp {
    Max,
    Min,
    /// Median, rounded down for an even number of arguments.
    Med,
    /// Sum modulo 10.
    SumMod,
}

impl ListOp {
    pub const ALL: [ListOp; 4] = [ListOp::Max, ListOp::Min, ListOp::Med, ListOp::SumMod];

    pub fn apply(self, args: &[u8]) -> u8 {
        match self {
            ListOp::Max => *args.iter().max().expect("non-empty list"),
            ListOp::Min => *args.iter().min().expect("non-empty list"),
            ListOp::Med => {
                let mut v = args.to_vec();
                v.sort_unstable();
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    (v[n / 2 - 1] + v[n / 2]) / 2
                }
            }
            ListOp::SumMod => (args.iter().map(|&a| a as u32).sum::<u32>() % 10) as u8,
        }
    }

    pub fn token(self) -> usize {
        OPEN0 + self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            ListOp::Max => "[MAX",
            ListOp::Min => "[MIN",
            ListOp::Med => "[MED",
            ListOp::SumMod => "[SM",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Digit(u8),
    List(ListOp, Vec<Expr>),
}

impl Expr {
    pub fn value(&self) -> u8 {
        match self {
            Expr::Digit(d) => *d,
            Expr::List(op, args) => op.apply(&args.iter().map(Expr::value).collect::<Vec<_>>()),
        }
    }

    pub fn tokens(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.write_tokens(&mut out);
        out
    }

    fn write_tokens(&self, out: &mut Vec<usize>) {
        match self {
            Expr::Digit(d) => out.push(DIGIT0 + *d as usize),
            Expr::List(op, args) => {
                out.push(op.token());
                for a in args {
                    a.write_tokens(out);
                }
                out.push(CLOSE);
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Digit(_) => 0,
            Expr::List(_, args) => 1 + args.iter().map(Expr::depth).max().unwrap_or(0),
        }
    }
}

impl std::fmt::Display for Expr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Expr::Digit(d) => write!(f, "{d}"),
            Expr::List(op, args) => {
                write!(f, "{}", op.symbol())?;
                for a in args {
                    write!(f, " {a}")?;
                }
                write!(f, "]")
            }
        }
    }
}

/// Renders a token sequence back to text.
pub fn detokenize(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| match t {
            DIGIT0..=12 => (t - DIGIT0).to_string(),
            OPEN0..=16 => ListOp::ALL[t - OPEN0].symbol().to_string(),
            CLOSE => "]".to_string(),
            _ => format!("<{t}>"),
        })
        .collect::<Vec<_>>()
        .join(" ")
        .replace(" ]", "]")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ListOpsSample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

fn gen_expr(rng: &mut ChaCha8Rng, depth_left: usize) -> Expr {
    let op = ListOp::ALL[rng.gen_range(0..4)];
    let n = rng.gen_range(2..=5);
    let args = (0..n)
        .map(|_| {
            if depth_left > 1 && rng.gen_bool(0.3) {
                gen_expr(rng, depth_left - 1)
            } else {
                Expr::Digit(rng.gen_range(0..10))
            }
        })
        .collect();
    Expr::List(op, args)
}

/// One expression of nesting depth at most `max_depth` and at most
/// `max_len` tokens, drawn deterministically from `seed`.
pub fn gen_listops_sample(max_depth: usize, max_len: usize, seed: u64) -> Result<(Expr, ListOpsSample)> {
    if max_depth == 0 || max_len < 4 {
        return Err(Error::Input(format!("listops needs depth ≥ 1 and length ≥ 4, got {max_depth}, {max_len}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let depth = rng.gen_range(1..=max_depth);
        let e = gen_expr(&mut rng, depth);
        let tokens = e.tokens();
        if tokens.len() <= max_len {
            let label = e.value() as usize;
            return Ok((e, ListOpsSample { tokens, label }));
        }
    }
}
