//! Position-wise feed-forward layers: a dense two-layer map, and the
//! random-rotation factorization whose only trainable parts are two
//! diagonals and two biases.
//!
//! For a token row `h` the random variant computes
//!
//! ```text
//! y   = relu(h·U1·Σ1·V1 + B1)        U1 d×d, Σ1 d×d_ff, V1 d_ff×d_ff
//! out = y·U2·Σ2·V2 + B2 + h          U2 d_ff×d_ff, Σ2 d_ff×d, V2 d×d
//! ```
//!
//! Σ is rectangular diagonal with `k = min(d, d_ff)` entries, so only the
//! first `k` columns of `U` and first `k` rows of `V` take part.

use rand_chacha::ChaCha8Rng;

use crate::depth::{derive_seed, rotation_matrix};
use crate::error::{Error, Result};
use crate::model::{gaussian, maybe_norm, FrozenStore, NormParams, ParamId, ParameterRegistry, Session};
use crate::mutation::{self, Mutation};
use crate::tensor::{Real, Tensor, Var};

/// Dense feed-forward weights for one depth.
#[derive(Clone, Copy, Debug)]
pub struct FullFfParams {
    /// `[d, d_ff]`
    pub w1: ParamId,
    pub b1: ParamId,
    /// `[d_ff, d]`
    pub w2: ParamId,
    pub b2: ParamId,
    pub norm: Option<NormParams>,
}

impl FullFfParams {
    pub fn register<R: Real>(
        reg: &mut ParameterRegistry<R>,
        prefix: &str,
        d: usize,
        d_ff: usize,
        post_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            w1: reg.add(format!("{prefix}.w1"), gaussian(&[d, d_ff], (2.0 / d as f64).sqrt(), rng)?)?,
            b1: reg.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ff])?)?,
            w2: reg.add(format!("{prefix}.w2"), gaussian(&[d_ff, d], 1.0 / (d_ff as f64).sqrt(), rng)?)?,
            b2: reg.add(format!("{prefix}.b2"), Tensor::zeros(&[d])?)?,
            norm: if post_norm {
                Some(NormParams::register(reg, &format!("{prefix}.norm"), d)?)
            } else {
                None
            },
        })
    }

    /// Trainable scalars per depth, excluding the norm.
    pub fn count(d: usize, d_ff: usize) -> usize {
        2 * d * d_ff + d_ff + d
    }
}

pub fn full_ff_forward<R: Real>(s: &mut Session<'_, R>, h: Var, p: &FullFfParams) -> Result<Var> {
    let (w1, b1, w2, b2) = (s.param(p.w1), s.param(p.b1), s.param(p.w2), s.param(p.b2));
    let t = &mut s.tape;
    let z = t.matmul(h, w1)?;
    let z = t.add(z, b1)?;
    let y = t.relu(z)?;
    let y = s.dropout(y)?;
    let t = &mut s.tape;
    let o = t.matmul(y, w2)?;
    let o = t.add(o, b2)?;
    finish(s, o, h, p.norm.as_ref())
}

fn finish<R: Real>(s: &mut Session<'_, R>, out: Var, h: Var, norm: Option<&NormParams>) -> Result<Var> {
    let out = if mutation::is(Mutation::FfResidual) {
        out
    } else {
        s.tape.add(out, h)?
    };
    maybe_norm(norm, s, out)
}

/// Which frozen factor a rotation matrix plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FactorRole {
    U1,
    V1,
    U2,
    V2,
}

impl FactorRole {
    pub const ALL: [FactorRole; 4] = [FactorRole::U1, FactorRole::V1, FactorRole::U2, FactorRole::V2];

    pub fn name(self) -> &'static str {
        match self {
            FactorRole::U1 => "u1",
            FactorRole::V1 => "v1",
            FactorRole::U2 => "u2",
            FactorRole::V2 => "v2",
        }
    }

    pub fn dim(self, d: usize, d_ff: usize) -> usize {
        match self {
            FactorRole::U1 | FactorRole::V2 => d,
            FactorRole::V1 | FactorRole::U2 => d_ff,
        }
    }
}

/// Random-rotation feed-forward for one depth.
///
/// Full frozen factors live in a [`FrozenStore`]; the slices that actually
/// take part in the product are cached here.
#[derive(Clone, Debug)]
pub struct RandomFfParams<R> {
    pub sigma1: ParamId,
    pub sigma2: ParamId,
    pub b1: ParamId,
    pub b2: ParamId,
    pub norm: Option<NormParams>,
    prefix: String,
    /// `U1[:, :k]`, `V1[:k, :]`, `U2[:, :k]`, `V2[:k, :]`
    slices: [Tensor<R>; 4],
}

impl<R: Real> RandomFfParams<R> {
    /// Registers trainable pieces and builds the four frozen factors for
    /// depth `l` of a block of `total_depth` layers.
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        reg: &mut ParameterRegistry<R>,
        frozen: &mut FrozenStore<R>,
        prefix: &str,
        d: usize,
        d_ff: usize,
        l: usize,
        total_depth: usize,
        seed: u64,
        post_norm: bool,
    ) -> Result<Self> {
        let k = d.min(d_ff);
        let sigma1 = reg.add(format!("{prefix}.sigma1"), Tensor::full(&[k], R::one())?)?;
        let sigma2 = reg.add(format!("{prefix}.sigma2"), Tensor::full(&[k], R::one())?)?;
        let b1 = reg.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ff])?)?;
        let b2 = reg.add(format!("{prefix}.b2"), Tensor::zeros(&[d])?)?;
        let norm = if post_norm {
            Some(NormParams::register(reg, &format!("{prefix}.norm"), d)?)
        } else {
            None
        };
        for (i, role) in FactorRole::ALL.into_iter().enumerate() {
            let m = rotation_matrix(role.dim(d, d_ff), l, total_depth, derive_seed(seed, &[i as u64]))?;
            frozen.insert(format!("{prefix}.{}", role.name()), m.cast())?;
        }
        let mut p = Self {
            sigma1,
            sigma2,
            b1,
            b2,
            norm,
            prefix: prefix.to_string(),
            slices: std::array::from_fn(|_| Tensor::scalar(R::zero())),
        };
        p.sync(frozen)?;
        Ok(p)
    }

    /// Re-reads the cached slices from the frozen store.
    pub fn sync(&mut self, frozen: &FrozenStore<R>) -> Result<()> {
        let get = |role: FactorRole| {
            let name = format!("{}.{}", self.prefix, role.name());
            frozen
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing frozen factor {name}")))
        };
        let u1 = get(FactorRole::U1)?;
        let v1 = get(FactorRole::V1)?;
        let (d, d_ff) = (u1.shape()[0], v1.shape()[0]);
        let k = d.min(d_ff);
        self.slices = [
            u1.columns(0..k)?,
            v1.rows(0..k)?,
            get(FactorRole::U2)?.columns(0..k)?,
            get(FactorRole::V2)?.rows(0..k)?,
        ];
        Ok(())
    }

    pub fn factor_names(&self) -> [String; 4] {
        FactorRole::ALL.map(|r| format!("{}.{}", self.prefix, r.name()))
    }

    /// Trainable scalars per depth, excluding the norm.
    pub fn count(d: usize, d_ff: usize) -> usize {
        2 * d.min(d_ff) + d_ff + d
    }
}

pub fn random_ff_forward<R: Real>(s: &mut Session<'_, R>, h: Var, p: &RandomFfParams<R>) -> Result<Var> {
    let (s1, s2, b1, b2) = (s.param(p.sigma1), s.param(p.sigma2), s.param(p.b1), s.param(p.b2));
    let [u1, v1, u2, v2] = p.slices.each_ref().map(|t| s.constant(t));
    let t = &mut s.tape;
    let z = t.matmul(h, u1)?;
    let z = t.mul(z, s1)?;
    let z = t.matmul(z, v1)?;
    let z = t.add(z, b1)?;
    let y = t.relu(z)?;
    let y = s.dropout(y)?;
    let t = &mut s.tape;
    let o = t.matmul(y, u2)?;
    let o = t.mul(o, s2)?;
    let o = t.matmul(o, v2)?;
    let o = t.add(o, b2)?;
    finish(s, o, h, p.norm.as_ref())
}

/// Either regime behind one interface.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum FeedForward<R> {
    Full(FullFfParams),
    Random(RandomFfParams<R>),
}

impl<R: Real> FeedForward<R> {
    pub fn forward(&self, s: &mut Session<'_, R>, h: Var) -> Result<Var> {
        match self {
            FeedForward::Full(p) => full_ff_forward(s, h, p),
            FeedForward::Random(p) => random_ff_forward(s, h, p),
        }
    }

    pub fn norm(&self) -> Option<&NormParams> {
        match self {
            FeedForward::Full(p) => p.norm.as_ref(),
            FeedForward::Random(p) => p.norm.as_ref(),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn seq(n: usize, d: usize) -> Tensor<f64> {
        Tensor::from_f64(&[n, d], &(0..n * d).map(|i| (i as f64 * 0.61).cos()).collect::<Vec<_>>()).unwrap()
    }

    fn run_full(reg: &ParameterRegistry<f64>, p: &FullFfParams, h: &Tensor<f64>) -> Vec<f64> {
        let mut s = Session::inference(reg);
        let x = s.constant(h);
        let y = full_ff_forward(&mut s, x, p).unwrap();
        s.tape.value(y).to_vec()
    }

    #[test]
    fn zero_full_ff_is_identity() {
        let mut reg = ParameterRegistry::new();
        let p = FullFfParams::register(&mut reg, "ff", 4, 8, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for id in [p.w1, p.w2] {
            reg.get_mut(id).data_mut().fill(0.0);
        }
        let h = seq(3, 4);
        assert_eq!(run_full(&reg, &p, &h), h.data());
    }

    #[test]
    fn scalar_hand_cases() {
        let mut reg = ParameterRegistry::new();
        let p = FullFfParams::register(&mut reg, "ff", 1, 1, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        reg.get_mut(p.w1).data_mut()[0] = 1.0;
        reg.get_mut(p.w2).data_mut()[0] = 1.0;
        let one = |v: f64| Tensor::from_f64(&[1, 1], &[v]).unwrap();
        assert_eq!(run_full(&reg, &p, &one(-2.0)), [-2.0]);
        assert_eq!(run_full(&reg, &p, &one(2.0)), [4.0]);
    }

    fn random_setup(d: usize, d_ff: usize) -> (ParameterRegistry<f64>, FrozenStore<f64>, RandomFfParams<f64>) {
        let mut reg = ParameterRegistry::new();
        let mut frozen = FrozenStore::new();
        let p = RandomFfParams::register(&mut reg, &mut frozen, "rff", d, d_ff, 2, 3, 17, false).unwrap();
        (reg, frozen, p)
    }

    #[test]
    fn zero_diagonals_leave_residual() {
        let (mut reg, _, p) = random_setup(4, 6);
        for id in [p.sigma1, p.sigma2] {
            reg.get_mut(id).data_mut().fill(0.0);
        }
        let h = seq(2, 4);
        let mut s = Session::inference(&reg);
        let x = s.constant(&h);
        let y = random_ff_forward(&mut s, x, &p).unwrap();
        assert_eq!(s.tape.value(y), h.data());
    }

    #[test]
    fn matches_dense_composition() {
        for (d, d_ff) in [(4, 6), (6, 4)] {
            let (mut reg, frozen, p) = random_setup(d, d_ff);
            let k = d.min(d_ff);
            let s1: Vec<f64> = (0..k).map(|i| 0.5 + 0.3 * i as f64).collect();
            let s2: Vec<f64> = (0..k).map(|i| 1.5 - 0.2 * i as f64).collect();
            reg.get_mut(p.sigma1).data_mut().copy_from_slice(&s1);
            reg.get_mut(p.sigma2).data_mut().copy_from_slice(&s2);
            reg.get_mut(p.b1).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64 - 0.2);
            let dense = |u: &Tensor<f64>, sig: &[f64], v: &Tensor<f64>| {
                let (r, c) = (u.shape()[0], v.shape()[0]);
                let mut rect = Tensor::<f64>::zeros(&[r, c]).unwrap();
                for (i, &x) in sig.iter().enumerate() {
                    rect.data_mut()[i * c + i] = x;
                }
                u.matmul(&rect).unwrap().matmul(v).unwrap()
            };
            let f = |n: &str| frozen.get(&format!("rff.{n}")).unwrap();
            let m1 = dense(f("u1"), &s1, f("v1"));
            let m2 = dense(f("u2"), &s2, f("v2"));
            let h = seq(3, d);
            let b1 = reg.get(p.b1).data().to_vec();
            let mut z = h.matmul(&m1).unwrap();
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v = (*v + b1[i % d_ff]).max(0.0);
            }
            let o = z.matmul(&m2).unwrap();
            let mut s = Session::inference(&reg);
            let x = s.constant(&h);
            let y = random_ff_forward(&mut s, x, &p).unwrap();
            for ((a, b), c) in s.tape.value(y).iter().zip(o.data()).zip(h.data()) {
                assert!((a - (b + c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn trainable_counts() {
        assert_eq!(RandomFfParams::<f64>::count(512, 2048), 3584);
        assert_eq!(FullFfParams::count(512, 2048), 2_099_712);
        let (reg, frozen, _) = random_setup(4, 6);
        assert_eq!(reg.count(), RandomFfParams::<f64>::count(4, 6));
        assert_eq!(frozen.count(), 2 * 16 + 2 * 36);
    }

    #[test]
    fn frozen_factors_get_no_gradient() {
        let (reg, _, p) = random_setup(4, 6);
        let mut s = Session::training(&reg, 0.0, 0);
        let x = s.constant(&seq(2, 4));
        let y = random_ff_forward(&mut s, x, &p).unwrap();
        let l = s.tape.sum(y).unwrap();
        let g = s.backward(l).unwrap();
        for id in reg.ids() {
            assert!(g.get(id).is_some(), "{}", reg.name(id));
        }
    }
}
