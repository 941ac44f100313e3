//! Evolving attention: operators computed once from a block's initial
//! sequences, then combined with a depth code at every layer of the block.
//!
//! Per head `h`, with `Q = Xq·W_q` and `K = Xk·W_k` split along the
//! augmented axis of width `d + d′`:
//!
//! ```text
//! A0 = Q_h·K_hᵀ / √(d/m)      [n_q, n_k]
//! A1 = Q_h·W̃k_hᵀ              [n_q, d′]
//! A2 = W̃q_h·K_hᵀ              [d′, n_k]
//! A3 = W̃q_h·W̃k_hᵀ             [d′, d′]
//! logits = A0 + (A1·T)·1ᵀ + 1·(T·A2) + T·A3·Tᵀ
//! ```
//!
//! The standard multi-head attention used by the baseline lives here too.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{gaussian, maybe_norm, NormParams, ParamId, ParameterRegistry, Session};
use crate::mutation::{self, Mutation};
use crate::tensor::{Mask, Real, Tape, Var};

/// Widths shared by every attention layer of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub d: usize,
    pub d_prime: usize,
    pub heads: usize,
}

impl AttentionDims {
    pub fn new(d: usize, d_prime: usize, heads: usize) -> Result<Self> {
        let dims = Self { d, d_prime, heads };
        if d == 0 || heads == 0 {
            return Err(Error::Config("width and head count must be positive".into()));
        }
        if !d.is_multiple_of(heads) || !(d + d_prime).is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d={d} and d+d′={} must both be divisible by {heads} heads",
                d + d_prime
            )));
        }
        Ok(dims)
    }

    /// Width of the augmented projection axis.
    pub fn augmented(&self) -> usize {
        self.d + self.d_prime
    }

    /// Per-head slice of the augmented axis.
    pub fn head_width(&self) -> usize {
        self.augmented() / self.heads
    }

    /// Per-head slice of the value axis.
    pub fn value_width(&self) -> usize {
        self.d / self.heads
    }

    pub fn logit_scale(&self) -> f64 {
        1.0 / (self.value_width() as f64).sqrt()
    }
}

/// Trainable projections from which evolution operators are built.
///
/// Stacking `w_q` on top of `wt_q` row-wise gives the full augmented query
/// projection applied to `[x, T]`; likewise for keys.
#[derive(Clone, Copy, Debug)]
pub struct OperatorParams {
    /// `[d, d+d′]`
    pub w_q: ParamId,
    /// `[d, d+d′]`
    pub w_k: ParamId,
    /// `[d′, d+d′]`
    pub wt_q: ParamId,
    /// `[d′, d+d′]`
    pub wt_k: ParamId,
}

impl OperatorParams {
    pub fn register<R: Real>(
        reg: &mut ParameterRegistry<R>,
        prefix: &str,
        dims: AttentionDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::register_scaled(reg, prefix, dims, 1.0, rng)
    }

    /// Draws weights with standard deviation `scale/√fan_in`.
    pub fn register_scaled<R: Real>(
        reg: &mut ParameterRegistry<R>,
        prefix: &str,
        dims: AttentionDims,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (d, dp, a) = (dims.d, dims.d_prime, dims.augmented());
        let sd = scale / (d as f64).sqrt();
        let sdp = scale / (dp.max(1) as f64).sqrt();
        Ok(Self {
            w_q: reg.add(format!("{prefix}.w_q"), gaussian(&[d, a], sd, rng)?)?,
            w_k: reg.add(format!("{prefix}.w_k"), gaussian(&[d, a], sd, rng)?)?,
            wt_q: reg.add(format!("{prefix}.wt_q"), gaussian(&[dp, a], sdp, rng)?)?,
            wt_k: reg.add(format!("{prefix}.wt_k"), gaussian(&[dp, a], sdp, rng)?)?,
        })
    }

    pub fn count(dims: AttentionDims) -> usize {
        2 * (dims.d + dims.d_prime) * dims.augmented()
    }
}

/// The four per-head operators, stacked over heads.
#[derive(Clone, Copy, Debug)]
pub struct EvolutionOperators {
    /// `[m, n_q, n_k]`, scaled initial logits.
    pub a0: Var,
    /// `[m, n_q, d′]`
    pub a1: Var,
    /// `[m, d′, n_k]`
    pub a2: Var,
    /// `[m, d′, d′]`
    pub a3: Var,
    pub n_q: usize,
    pub n_k: usize,
}

/// `[n, heads·w] → [heads, n, w]`
fn split_heads<R: Real>(tape: &mut Tape<R>, x: Var, heads: usize) -> Result<Var> {
    let [n, width] = tape.shape(x)[..] else {
        return Err(Error::Shape(format!("expected a matrix, got {:?}", tape.shape(x))));
    };
    let r = tape.reshape(x, &[n, heads, width / heads])?;
    tape.permute(r, &[1, 0, 2])
}

/// `[heads, n, w] → [n, heads·w]`
fn merge_heads<R: Real>(tape: &mut Tape<R>, x: Var) -> Result<Var> {
    let [h, n, w] = tape.shape(x)[..] else {
        return Err(Error::Shape(format!("expected [h,n,w], got {:?}", tape.shape(x))));
    };
    let p = tape.permute(x, &[1, 0, 2])?;
    tape.reshape(p, &[n, h * w])
}

fn check_sequence<R: Real>(tape: &Tape<R>, x: Var, d: usize, what: &str) -> Result<usize> {
    match tape.shape(x) {
        [n, w] if *w == d && *n > 0 => Ok(*n),
        s => Err(Error::Shape(format!("{what} must be [n, {d}], got {s:?}"))),
    }
}

/// Builds the operators from the block's initial query and key sequences.
pub fn init_evolution_operators<R: Real>(
    s: &mut Session<'_, R>,
    xq: Var,
    xk: Var,
    p: &OperatorParams,
    dims: AttentionDims,
) -> Result<EvolutionOperators> {
    init_evolution_operators_scaled(s, xq, xk, p, dims, dims.logit_scale())
}

/// As [`init_evolution_operators`] with an explicit factor on `A0`.
pub fn init_evolution_operators_scaled<R: Real>(
    s: &mut Session<'_, R>,
    xq: Var,
    xk: Var,
    p: &OperatorParams,
    dims: AttentionDims,
    a0_scale: f64,
) -> Result<EvolutionOperators> {
    let n_q = check_sequence(&s.tape, xq, dims.d, "query sequence")?;
    let n_k = check_sequence(&s.tape, xk, dims.d, "key sequence")?;
    let (w_q, w_k, wt_q, wt_k) = (s.param(p.w_q), s.param(p.w_k), s.param(p.wt_q), s.param(p.wt_k));
    let m = dims.heads;
    let t = &mut s.tape;

    let q = t.matmul(xq, w_q)?;
    let k = t.matmul(xk, w_k)?;
    let qh = split_heads(t, q, m)?;
    let kh = split_heads(t, k, m)?;
    let wtq = split_heads(t, wt_q, m)?;
    let wtk = split_heads(t, wt_k, m)?;

    let raw = t.matmul_t(qh, kh)?;
    let a0 = t.scale(raw, a0_scale)?;
    let a1 = t.matmul_t(qh, wtk)?;
    let a2 = t.matmul_t(wtq, kh)?;
    let a3 = t.matmul_t(wtq, wtk)?;
    Ok(EvolutionOperators {
        a0,
        a1,
        a2,
        a3,
        n_q,
        n_k,
    })
}

/// Pre-softmax logits `[m, n_q, n_k]` at the depth whose code is `code` (`[d′]`).
///
/// No mask is added here; masks are applied inside the softmax so that the
/// returned logits stay finite.
pub fn evolved_logits<R: Real>(
    tape: &mut Tape<R>,
    ops: &EvolutionOperators,
    code: Var,
) -> Result<Var> {
    let dp = tape.shape(ops.a3)[1];
    if tape.shape(code) != [dp] {
        return Err(Error::Shape(format!(
            "depth code {:?} does not match operators of width {dp}",
            tape.shape(code)
        )));
    }
    let col = tape.reshape(code, &[dp, 1])?;
    let row = tape.reshape(code, &[1, dp])?;

    let query_term = tape.matmul(ops.a1, col)?; // [m, n_q, 1]
    let key_term = tape.matmul(row, ops.a2)?; // [m, 1, n_k]
    let ta3 = tape.matmul(row, ops.a3)?; // [m, 1, d′]
    let quad = tape.matmul_t(ta3, row)?; // [m, 1, 1]

    let mut logits = ops.a0;
    if mutation::is(Mutation::TransposedRowTerm) {
        let m = tape.shape(query_term)[0];
        let along_keys = tape.reshape(query_term, &[m, 1, ops.n_q])?;
        logits = tape.add(logits, along_keys)?;
    } else {
        logits = tape.add(logits, query_term)?;
    }
    if !mutation::is(Mutation::DropKeyTerm) {
        logits = tape.add(logits, key_term)?;
    }
    tape.add(logits, quad)
}

/// Per-depth trainable pieces of an evolving attention layer.
#[derive(Clone, Copy, Debug)]
pub struct EvolvedLayerParams {
    /// `[d, d]`
    pub w_o: ParamId,
    pub norm: Option<NormParams>,
}

impl EvolvedLayerParams {
    pub fn register<R: Real>(
        reg: &mut ParameterRegistry<R>,
        prefix: &str,
        d: usize,
        post_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w_o = reg.add(format!("{prefix}.w_o"), gaussian(&[d, d], 1.0 / (d as f64).sqrt(), rng)?)?;
        let norm = if post_norm {
            Some(NormParams::register(reg, &format!("{prefix}.norm"), d)?)
        } else {
            None
        };
        Ok(Self { w_o, norm })
    }
}

/// Softmax over keys, context from head-split `values_src` without a value
/// projection, output projection, residual, then the optional post-norm.
#[allow(clippy::too_many_arguments)]
pub fn attention_layer_forward<R: Real>(
    s: &mut Session<'_, R>,
    x: Var,
    values_src: Var,
    ops: &EvolutionOperators,
    code: Var,
    layer: &EvolvedLayerParams,
    mask: Option<&Mask>,
    dims: AttentionDims,
) -> Result<Var> {
    let n = check_sequence(&s.tape, x, dims.d, "layer input")?;
    let n_v = check_sequence(&s.tape, values_src, dims.d, "value source")?;
    if n != ops.n_q || n_v != ops.n_k {
        return Err(Error::Shape(format!(
            "operators are {}×{} but layer sees {n} queries and {n_v} values",
            ops.n_q, ops.n_k
        )));
    }
    let logits = evolved_logits(&mut s.tape, ops, code)?;
    let weights = s.tape.softmax_rows(logits, mask)?;
    let weights = s.dropout(weights)?;
    attend(s, x, values_src, weights, layer.w_o, layer.norm.as_ref(), dims)
}

fn attend<R: Real>(
    s: &mut Session<'_, R>,
    residual: Var,
    values_src: Var,
    weights: Var,
    w_o: ParamId,
    norm: Option<&NormParams>,
    dims: AttentionDims,
) -> Result<Var> {
    let w_o = s.param(w_o);
    let t = &mut s.tape;
    let vh = split_heads(t, values_src, dims.heads)?;
    let ctx = t.matmul(weights, vh)?;
    let ctx = merge_heads(t, ctx)?;
    let out = t.matmul(ctx, w_o)?;
    let out = t.add(out, residual)?;
    maybe_norm(norm, s, out)
}

/// Multiplications spent on logits, split by source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LogitCost {
    /// `Xq·W_q` and `Xk·W_k`.
    pub projections: u64,
    /// `Q_h·K_hᵀ` summed over heads.
    pub a0_products: u64,
    /// Rescaling `A0`.
    pub a0_scaling: u64,
    /// Building `A1`, `A2`, `A3`.
    pub operators: u64,
    /// Per-depth `A1·T`, `T·A2` and `T·A3·Tᵀ`.
    pub evolution: u64,
}

impl LogitCost {
    pub fn total(&self) -> u64 {
        self.projections + self.a0_products + self.a0_scaling + self.operators + self.evolution
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Initial,
    PerDepth,
}

/// Closed-form cost of one phase of evolving-logit construction.
pub fn logit_cost(n_q: usize, n_k: usize, d: usize, d_prime: usize, heads: usize, phase: Phase) -> LogitCost {
    let (nq, nk, d, dp, m) = (n_q as u64, n_k as u64, d as u64, d_prime as u64, heads as u64);
    let a = d + dp;
    match phase {
        Phase::Initial => LogitCost {
            projections: (nq + nk) * d * a,
            a0_products: nq * nk * a,
            a0_scaling: m * nq * nk,
            operators: (nq + nk) * a * dp + dp * dp * a,
            evolution: 0,
        },
        Phase::PerDepth => LogitCost {
            evolution: m * (nq * dp + nk * dp + dp * dp + dp),
            ..LogitCost::default()
        },
    }
}

pub fn count_logit_multiplications(
    n_q: usize,
    n_k: usize,
    d: usize,
    d_prime: usize,
    heads: usize,
    phase: Phase,
) -> u64 {
    logit_cost(n_q, n_k, d, d_prime, heads, phase).total()
}

/// Scaled dot products of one standard attention layer, from projected heads.
pub fn baseline_logit_multiplications(n_q: usize, n_k: usize, d: usize, heads: usize) -> u64 {
    let (nq, nk) = (n_q as u64, n_k as u64);
    nq * nk * d as u64 + heads as u64 * nq * nk
}

/// Projections of a standard multi-head attention layer.
#[derive(Clone, Copy, Debug)]
pub struct StandardAttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub norm: Option<NormParams>,
}

impl StandardAttentionParams {
    pub fn register<R: Real>(
        reg: &mut ParameterRegistry<R>,
        prefix: &str,
        d: usize,
        post_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let sd = 1.0 / (d as f64).sqrt();
        let mut w = |name: &str, reg: &mut ParameterRegistry<R>| {
            reg.add(format!("{prefix}.{name}"), gaussian(&[d, d], sd, rng)?)
        };
        let w_q = w("w_q", reg)?;
        let w_k = w("w_k", reg)?;
        let w_v = w("w_v", reg)?;
        let w_o = w("w_o", reg)?;
        let norm = if post_norm {
            Some(NormParams::register(reg, &format!("{prefix}.norm"), d)?)
        } else {
            None
        };
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            norm,
        })
    }
}

/// Scaled dot-product logits `[m, n_q, n_k]` from already split heads.
pub fn standard_logits<R: Real>(tape: &mut Tape<R>, qh: Var, kh: Var, dims: AttentionDims) -> Result<Var> {
    let raw = tape.matmul_t(qh, kh)?;
    tape.scale(raw, dims.logit_scale())
}

/// Projected heads `(Q_h, K_h)` of a standard layer.
pub fn standard_heads<R: Real>(
    s: &mut Session<'_, R>,
    xq: Var,
    xk: Var,
    p: &StandardAttentionParams,
    dims: AttentionDims,
) -> Result<(Var, Var)> {
    check_sequence(&s.tape, xq, dims.d, "query sequence")?;
    check_sequence(&s.tape, xk, dims.d, "key sequence")?;
    let (w_q, w_k) = (s.param(p.w_q), s.param(p.w_k));
    let q = s.tape.matmul(xq, w_q)?;
    let k = s.tape.matmul(xk, w_k)?;
    let qh = split_heads(&mut s.tape, q, dims.heads)?;
    let kh = split_heads(&mut s.tape, k, dims.heads)?;
    Ok((qh, kh))
}

/// Multi-head attention with value projection, residual and post-norm.
pub fn standard_attention_forward<R: Real>(
    s: &mut Session<'_, R>,
    xq: Var,
    xkv: Var,
    p: &StandardAttentionParams,
    mask: Option<&Mask>,
    dims: AttentionDims,
) -> Result<Var> {
    let (qh, kh) = standard_heads(s, xq, xkv, p, dims)?;
    let logits = standard_logits(&mut s.tape, qh, kh, dims)?;
    let weights = s.tape.softmax_rows(logits, mask)?;
    let weights = s.dropout(weights)?;
    let w_v = s.param(p.w_v);
    let v = s.tape.matmul(xkv, w_v)?;
    attend(s, xq, v, weights, p.w_o, p.norm.as_ref(), dims)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::tensor::Tensor;

    fn setup(d: usize, dp: usize, m: usize, seed: u64) -> (ParameterRegistry<f64>, OperatorParams, EvolvedLayerParams, AttentionDims) {
        let dims = AttentionDims::new(d, dp, m).unwrap();
        let mut reg = ParameterRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ops = OperatorParams::register(&mut reg, "att", dims, &mut rng).unwrap();
        let layer = EvolvedLayerParams::register(&mut reg, "att.0", d, false, &mut rng).unwrap();
        (reg, ops, layer, dims)
    }

    fn seq(n: usize, d: usize, salt: f64) -> Tensor<f64> {
        Tensor::from_f64(&[n, d], &(0..n * d).map(|i| ((i as f64) * 0.37 + salt).sin()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn divisibility_is_checked() {
        assert!(AttentionDims::new(6, 6, 4).is_err());
        assert!(AttentionDims::new(8, 6, 4).is_err());
        assert!(AttentionDims::new(8, 8, 4).is_ok());
    }

    #[test]
    fn zero_temporal_projections_leave_a0() {
        let (mut reg, p, _, dims) = setup(4, 4, 2, 1);
        for id in [p.wt_q, p.wt_k] {
            reg.get_mut(id).data_mut().fill(0.0);
        }
        let mut s = Session::inference(&reg);
        let x = s.constant(&seq(3, 4, 0.2));
        let ops = init_evolution_operators(&mut s, x, x, &p, dims).unwrap();
        for v in [ops.a1, ops.a2, ops.a3] {
            assert!(s.tape.value(v).iter().all(|&z| z == 0.0));
        }
        let code = s.constant(&Tensor::from_f64(&[4], &[0.3, -1.0, 2.0, 0.5]).unwrap());
        let logits = evolved_logits(&mut s.tape, &ops, code).unwrap();
        assert_eq!(s.tape.value(logits), s.tape.value(ops.a0));
    }

    #[test]
    fn one_token_hand_case() {
        let dims = AttentionDims::new(2, 2, 1).unwrap();
        let mut reg = ParameterRegistry::<f64>::new();
        let t = |v: &[f64]| Tensor::from_f64(&[2, 4], v).unwrap();
        let p = OperatorParams {
            w_q: reg.add("w_q", t(&[1., 0., 2., 0., 0., 1., 0., 1.])).unwrap(),
            w_k: reg.add("w_k", t(&[0., 1., 0., 0., 1., 0., 1., 1.])).unwrap(),
            wt_q: reg.add("wt_q", Tensor::zeros(&[2, 4]).unwrap()).unwrap(),
            wt_k: reg.add("wt_k", Tensor::zeros(&[2, 4]).unwrap()).unwrap(),
        };
        let mut s = Session::inference(&reg);
        let x = s.constant(&Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let ops = init_evolution_operators(&mut s, x, x, &p, dims).unwrap();
        // X·W_q = [1,2,2,2], X·W_k = [2,1,2,2]
        let want = (2.0 + 2.0 + 4.0 + 4.0) / 2f64.sqrt();
        assert!((s.tape.value(ops.a0)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn key_term_alone_gives_closed_form_softmax() {
        let mut tape = Tape::<f64>::new();
        let c = |t: &mut Tape<f64>, shape: &[usize], v: &[f64]| t.constant(&Tensor::from_f64(shape, v).unwrap());
        let ops = EvolutionOperators {
            a0: c(&mut tape, &[1, 2, 2], &[0.0; 4]),
            a1: c(&mut tape, &[1, 2, 2], &[0.0; 4]),
            a2: c(&mut tape, &[1, 2, 2], &[1.0, 2.0, 0.0, 0.0]),
            a3: c(&mut tape, &[1, 2, 2], &[0.0; 4]),
            n_q: 2,
            n_k: 2,
        };
        let code = c(&mut tape, &[2], &[1.0, 0.0]);
        let logits = evolved_logits(&mut tape, &ops, code).unwrap();
        assert_eq!(tape.value(logits), &[1.0, 2.0, 1.0, 2.0]);
        let w = tape.softmax_rows(logits, None).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.value(w)[0] - e / (e + e * e)).abs() < 1e-12);
        assert!((tape.value(w)[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn zero_output_projection_is_residual() {
        let (mut reg, p, layer, dims) = setup(4, 4, 2, 3);
        reg.get_mut(layer.w_o).data_mut().fill(0.0);
        let mut s = Session::inference(&reg);
        let xt = seq(3, 4, 0.7);
        let x = s.constant(&xt);
        let ops = init_evolution_operators(&mut s, x, x, &p, dims).unwrap();
        let code = s.constant(&Tensor::from_f64(&[4], &[0.1, 0.2, 0.3, 0.4]).unwrap());
        let y = attention_layer_forward(&mut s, x, x, &ops, code, &layer, None, dims).unwrap();
        assert_eq!(s.tape.value(y), xt.data());
    }

    #[test]
    fn single_token_output_is_projection_plus_input() {
        let (reg, p, layer, dims) = setup(4, 4, 2, 4);
        let mut s = Session::inference(&reg);
        let xt = seq(1, 4, 1.1);
        let x = s.constant(&xt);
        let ops = init_evolution_operators(&mut s, x, x, &p, dims).unwrap();
        let code = s.constant(&Tensor::from_f64(&[4], &[1.0; 4]).unwrap());
        let y = attention_layer_forward(&mut s, x, x, &ops, code, &layer, None, dims).unwrap();
        let want = xt.matmul(reg.get(layer.w_o)).unwrap();
        for ((a, b), c) in s.tape.value(y).iter().zip(want.data()).zip(xt.data()) {
            assert!((a - (b + c)).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_row_zero_ignores_later_tokens() {
        let (reg, p, layer, dims) = setup(4, 4, 2, 5);
        let run = |xt: &Tensor<f64>| {
            let mut s = Session::inference(&reg);
            let x = s.constant(xt);
            let ops = init_evolution_operators(&mut s, x, x, &p, dims).unwrap();
            let code = s.constant(&Tensor::from_f64(&[4], &[0.5; 4]).unwrap());
            let y = attention_layer_forward(&mut s, x, x, &ops, code, &layer, Some(&Mask::causal(3)), dims).unwrap();
            s.tape.value(y)[..4].to_vec()
        };
        let a = seq(3, 4, 0.0);
        let mut b = a.clone();
        b.data_mut()[5] += 3.0;
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn cost_examples() {
        assert_eq!(logit_cost(2, 2, 4, 4, 1, Phase::Initial).a0_products, 32);
        assert_eq!(
            count_logit_multiplications(2, 2, 4, 4, 1, Phase::PerDepth),
            2 * 4 + 2 * 4 + 16 + 4
        );
        let ratio = |n| {
            count_logit_multiplications(n, n, 64, 64, 8, Phase::Initial) as f64
                / count_logit_multiplications(n, n, 64, 64, 8, Phase::PerDepth) as f64
        };
        assert!(ratio(2048) / ratio(1024) > 1.8);
    }

    #[test]
    fn counter_matches_closed_forms() {
        use crate::tensor::counter;
        let (reg, p, _, dims) = setup(8, 8, 4, 6);
        let mut s = Session::inference(&reg);
        let xq = s.constant(&seq(5, 8, 0.1));
        let xk = s.constant(&seq(3, 8, 0.9));
        let (ops, init) = counter::measure(|| init_evolution_operators(&mut s, xq, xk, &p, dims).unwrap());
        assert_eq!(init, count_logit_multiplications(5, 3, 8, 8, 4, Phase::Initial));
        let code = s.constant(&Tensor::from_f64(&[8], &[1.0; 8]).unwrap());
        let (_, per) = counter::measure(|| evolved_logits(&mut s.tape, &ops, code).unwrap());
        assert_eq!(per, count_logit_multiplications(5, 3, 8, 8, 4, Phase::PerDepth));
    }
}
