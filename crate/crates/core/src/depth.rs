//! Functions of depth and position: sinusoidal depth codes, frozen random
//! sine-cosine rotation matrices, and the fixed positional table.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mutation::{self, Mutation};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Period constant `dim·L/(2π)` shared by depth codes and rotation matrices.
pub fn period(dim: usize, total_depth: usize) -> f64 {
    dim as f64 * total_depth as f64 / (2.0 * PI)
}

fn check_even(dim: usize) -> Result<()> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("dimension {dim} must be even and positive")));
    }
    Ok(())
}

/// Learnable sinusoidal vector function of depth.
///
/// The sine half is `w_j·sin(j·l/P)` and the cosine half `w_{j+dim/2}·cos(j·l/P)`
/// with `j` running from 1 to `dim/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthCode {
    dim: usize,
    total_depth: usize,
}

impl DepthCode {
    pub fn new(dim: usize, total_depth: usize) -> Result<Self> {
        check_even(dim)?;
        if total_depth == 0 {
            return Err(Error::Config("depth code needs at least one layer".into()));
        }
        Ok(Self { dim, total_depth })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total_depth(&self) -> usize {
        self.total_depth
    }

    pub fn period(&self) -> f64 {
        period(self.dim, self.total_depth)
    }

    /// Unweighted sinusoids at depth `l`; the code is this vector times the weights.
    pub fn basis(&self, l: usize) -> Vec<f64> {
        let half = self.dim / 2;
        let p = self.period();
        let mut out = vec![0.0; self.dim];
        for j in 1..=half {
            let angle = j as f64 * l as f64 / p;
            out[j - 1] = angle.sin();
            out[j - 1 + half] = angle.cos();
        }
        out
    }

    /// Evaluates the code at depth `l` for the given weights.
    pub fn evaluate(&self, l: usize, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.dim {
            return Err(Error::Shape(format!(
                "{} depth-code weights for dimension {}",
                weights.len(),
                self.dim
            )));
        }
        Ok(self.basis(l).iter().zip(weights).map(|(b, w)| b * w).collect())
    }

    /// Records the code on a tape as `weights ⊙ basis`, shape `[dim]`.
    pub fn record<R: Real>(&self, tape: &mut Tape<R>, l: usize, weights: Var) -> Result<Var> {
        let basis = tape.constant_f64(&[self.dim], &self.basis(l))?;
        tape.mul(weights, basis)
    }
}

/// Initial depth-code weights: all ones, leaving a pure sinusoidal basis.
pub fn initial_code_weights<R: Real>(dim: usize) -> Result<Tensor<R>> {
    Tensor::full(&[dim], R::one())
}

/// SplitMix64 mixing of a base seed with a path of identifiers.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Dense `dim×dim` sine-cosine matrix scaled by `1/√dim`.
///
/// Row `i`, column pair `(j, j+dim/2)` shares one frozen weight
/// `w_ij ~ N(0, dim²)` between its sine and cosine, so every row has squared
/// norm exactly ½. Weights come from a ChaCha8 stream seeded by `seed`.
pub fn rotation_matrix(dim: usize, l: usize, total_depth: usize, seed: u64) -> Result<Tensor<f64>> {
    check_even(dim)?;
    let half = dim / 2;
    let p = period(dim, total_depth.max(1));
    let scale = 1.0 / (dim as f64).sqrt();
    let normal = Normal::new(0.0, dim as f64).expect("positive standard deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unpaired = mutation::is(Mutation::UnpairedRotation);
    let mut out = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 1..=half {
            let w = normal.sample(&mut rng);
            let w_cos = if unpaired { normal.sample(&mut rng) } else { w };
            let jl = j as f64 * l as f64 / p;
            out[i * dim + j - 1] = scale * (w * jl).sin();
            out[i * dim + j - 1 + half] = scale * (w_cos * jl).cos();
        }
    }
    Tensor::new(&[dim, dim], out)
}

/// Fixed positional table: `sin(pos/10000^(2k/d))` at even columns and the
/// matching cosine at odd columns.
pub fn sinusoidal_positions(n: usize, d: usize) -> Result<Tensor<f64>> {
    if n == 0 || d == 0 {
        return Err(Error::Input(format!("position table {n}×{d}")));
    }
    let mut out = vec![0.0; n * d];
    for pos in 0..n {
        for c in 0..d {
            let k = c / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / d as f64);
            out[pos * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[n, d], out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn uut(u: &Tensor<f64>) -> Tensor<f64> {
        u.matmul(&u.transpose().unwrap()).unwrap()
    }

    #[test]
    fn depth_code_small_case() {
        let code = DepthCode::new(4, 2).unwrap();
        assert!((code.period() - 4.0 / PI).abs() < 1e-15);
        let t = code.evaluate(1, &[1.0; 4]).unwrap();
        let want = [0.5f64.sqrt(), 1.0, 0.5f64.sqrt(), 0.0];
        for (a, b) in t.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{t:?}");
        }
    }

    #[test]
    fn depth_zero_is_cosine_weights() {
        let code = DepthCode::new(6, 3).unwrap();
        let w = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(code.evaluate(0, &w).unwrap(), vec![0.0, 0.0, 0.0, 0.4, 0.5, 0.6]);
    }

    #[test]
    fn odd_dimensions_rejected() {
        assert!(DepthCode::new(3, 2).is_err());
        assert!(rotation_matrix(5, 1, 2, 0).is_err());
    }

    #[test]
    fn depth_code_on_tape_matches_direct() {
        let code = DepthCode::new(8, 6).unwrap();
        let w: Vec<f64> = (0..8).map(|i| 0.5 + i as f64 * 0.1).collect();
        let mut tape = Tape::<f64>::new();
        let wv = tape.constant(&Tensor::from_f64(&[8], &w).unwrap());
        let t = code.record(&mut tape, 4, wv).unwrap();
        assert_eq!(tape.value(t), code.evaluate(4, &w).unwrap().as_slice());
    }

    #[test]
    fn depth_zero_rotation_is_degenerate() {
        let u = rotation_matrix(8, 0, 3, 11).unwrap();
        let s = 1.0 / 8f64.sqrt();
        for i in 0..8 {
            for j in 0..4 {
                assert_eq!(u.at(&[i, j]), 0.0);
                assert!((u.at(&[i, j + 4]) - s).abs() < 1e-15);
            }
        }
        for v in uut(&u).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_regeneration_is_bit_identical() {
        let a = rotation_matrix(16, 2, 6, 99).unwrap();
        let b = rotation_matrix(16, 2, 6, 99).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, rotation_matrix(16, 2, 6, 100).unwrap());
    }

    #[test]
    fn derived_seeds_differ_by_path() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(7, &[3]), derive_seed(7, &[3]));
    }

    #[test]
    fn positions() {
        let pe = sinusoidal_positions(4, 6).unwrap();
        assert_eq!(pe.rows(0..1).unwrap().data(), &[0., 1., 0., 1., 0., 1.]);
        assert!((pe.at(&[1, 0]) - 0.84147).abs() < 1e-5);
        assert!((pe.at(&[1, 1]) - 0.54030).abs() < 1e-5);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
    }

    proptest! {
        #[test]
        fn rotation_diagonal_is_exactly_half(half in 1usize..12, l in 0usize..8, seed in any::<u64>()) {
            let u = rotation_matrix(2 * half, l, 6, seed).unwrap();
            let g = uut(&u);
            for i in 0..2 * half {
                prop_assert!((g.at(&[i, i]) - 0.5).abs() < 1e-12);
            }
        }

        #[test]
        fn code_is_linear_in_weights(w in prop::collection::vec(-3.0f64..3.0, 8), l in 0usize..10) {
            let code = DepthCode::new(8, 4).unwrap();
            let once = code.evaluate(l, &w).unwrap();
            let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            let twice = code.evaluate(l, &w2).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert_eq!(2.0 * a, *b);
            }
        }

        /// An affine map of the code is a truncated Fourier series in depth.
        #[test]
        fn affine_map_is_fourier_series(
            a in prop::collection::vec(-1.0f64..1.0, 3 * 6),
            b in prop::collection::vec(-1.0f64..1.0, 3),
            w in prop::collection::vec(-2.0f64..2.0, 6),
            l in 0usize..12,
        ) {
            let code = DepthCode::new(6, 5).unwrap();
            let t = code.evaluate(l, &w).unwrap();
            let p = code.period();
            for i in 0..3 {
                let direct: f64 = b[i] + (0..6).map(|j| a[i * 6 + j] * t[j]).sum::<f64>();
                let mut series = b[i];
                for j in 1..=3 {
                    let x = j as f64 * l as f64 / p;
                    series += a[i * 6 + j - 1] * w[j - 1] * x.sin();
                    series += a[i * 6 + j + 2] * w[j + 2] * x.cos();
                }
                prop_assert!((direct - series).abs() < 1e-12);
            }
        }
    }
}
