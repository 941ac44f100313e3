//! Brute-force reference computations, each written without calling the code
//! path it checks, and the `verify` suites built on them.
//!
//! Everything here runs in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    evolved_logits, init_evolution_operators, init_evolution_operators_scaled, AttentionDims, OperatorParams,
};
use crate::depth::{derive_seed, rotation_matrix, DepthCode};
use crate::error::{Error, Result};
use crate::ff::{full_ff_forward, random_ff_forward, FullFfParams, RandomFfParams};
use crate::harness::{Adam, AdamConfig};
use crate::model::{
    count_params, Architecture, AttentionKind, FfVariant, FrozenStore, Model, ModelConfig,
    ParameterRegistry, Session,
};
use crate::tensor::{finite_diff_grad, relative_error, Tensor};

/// Outcome of one suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub suite: String,
    pub cases: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub diagnostics: Vec<String>,
}

impl OracleReport {
    fn new(suite: &str) -> Self {
        Self {
            suite: suite.to_string(),
            cases: 0,
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            passed: true,
            diagnostics: Vec::new(),
        }
    }

    /// Records one case; a failing case also leaves a diagnostic line.
    fn case(&mut self, abs: f64, rel: f64, ok: bool, what: impl FnOnce() -> String) {
        self.cases += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        if !ok {
            self.passed = false;
            self.diagnostics.push(format!("FAIL {}", what()));
        }
    }

    fn note(&mut self, line: String) {
        self.diagnostics.push(line);
    }
}

/// Suites runnable through `verify`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    All,
    Attention,
    Rotation,
    Cancellation,
    Gradients,
    Ff,
    Params,
}

impl Suite {
    const EACH: [Suite; 6] = [
        Suite::Attention,
        Suite::Rotation,
        Suite::Cancellation,
        Suite::Gradients,
        Suite::Ff,
        Suite::Params,
    ];

    /// Reports sorted by suite name.
    pub fn run(self) -> Vec<OracleReport> {
        let suites: Vec<Suite> = match self {
            Suite::All => Self::EACH.to_vec(),
            one => vec![one],
        };
        let mut reports: Vec<OracleReport> = suites
            .into_iter()
            .map(|s| {
                let (name, outcome) = match s {
                    Suite::Attention => ("attention", attention_suite()),
                    Suite::Rotation => ("rotation", rotation_suite()),
                    Suite::Cancellation => ("cancellation", cancellation_suite()),
                    Suite::Gradients => ("gradients", gradient_suite()),
                    Suite::Ff => ("ff", ff_suite()),
                    Suite::Params => ("params", params_suite()),
                    Suite::All => unreachable!("expanded above"),
                };
                // A suite that cannot even run its cases has failed.
                outcome.unwrap_or_else(|e| {
                    let mut r = OracleReport::new(name);
                    r.case(f64::INFINITY, f64::INFINITY, false, || format!("aborted: {e}"));
                    r
                })
            })
            .collect();
        reports.sort_by(|a, b| a.suite.cmp(&b.suite));
        reports
    }
}

/// Fixed-width table of reports.
pub fn format_table(reports: &[OracleReport]) -> String {
    let mut out = format!("{:<14} {:>6} {:>12} {:>12}  {}\n", "suite", "cases", "max abs", "max rel", "result");
    for r in reports {
        out.push_str(&format!(
            "{:<14} {:>6} {:>12.3e} {:>12.3e}  {}\n",
            r.suite,
            r.cases,
            r.max_abs_error,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

// ---------------------------------------------------------------- attention

/// Pre-softmax logits `[m, n_q, n_k]` of plain multi-head attention over the
/// depth-augmented inputs `[x, code]`, without any scaling.
///
/// The augmented projections are the row-wise stacks of `w_q` over `wt_q`
/// and `w_k` over `wt_k`; heads split the `d + d′` output columns evenly.
#[allow(clippy::too_many_arguments)]
pub fn augmented_attention_oracle(
    xq: &Tensor<f64>,
    xk: &Tensor<f64>,
    code: &[f64],
    w_q: &Tensor<f64>,
    w_k: &Tensor<f64>,
    wt_q: &Tensor<f64>,
    wt_k: &Tensor<f64>,
    heads: usize,
) -> Vec<f64> {
    let d = xq.shape()[1];
    let dp = code.len();
    let a = d + dp;
    let augment = |x: &Tensor<f64>| -> Vec<Vec<f64>> {
        (0..x.shape()[0])
            .map(|i| (0..d).map(|c| x.at(&[i, c])).chain(code.iter().copied()).collect())
            .collect()
    };
    let stack = |top: &Tensor<f64>, bottom: &Tensor<f64>| -> Vec<Vec<f64>> {
        (0..a)
            .map(|r| {
                (0..a)
                    .map(|c| if r < d { top.at(&[r, c]) } else { bottom.at(&[r - d, c]) })
                    .collect()
            })
            .collect()
    };
    let project = |rows: &[Vec<f64>], w: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|row| (0..a).map(|c| (0..a).map(|r| row[r] * w[r][c]).sum()).collect())
            .collect()
    };
    let q = project(&augment(xq), &stack(w_q, wt_q));
    let k = project(&augment(xk), &stack(w_k, wt_k));
    let hw = a / heads;
    let mut out = Vec::with_capacity(heads * q.len() * k.len());
    for h in 0..heads {
        for qi in &q {
            for kj in &k {
                out.push((h * hw..(h + 1) * hw).map(|c| qi[c] * kj[c]).sum());
            }
        }
    }
    out
}

struct AttentionInstance {
    reg: ParameterRegistry<f64>,
    params: OperatorParams,
    dims: AttentionDims,
    xq: Tensor<f64>,
    xk: Tensor<f64>,
    code: Vec<f64>,
}

impl AttentionInstance {
    fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d = [4, 8, 12, 16][rng.gen_range(0..4)];
        let dims = AttentionDims::new(d, d, heads)?;
        let mut reg = ParameterRegistry::new();
        let params = OperatorParams::register(&mut reg, "ops", dims, &mut rng)?;
        let n_q = rng.gen_range(1..=8);
        let n_k = if rng.gen_bool(0.5) { n_q } else { rng.gen_range(1..=8) };
        let l = rng.gen_range(0..=6);
        let weights: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let code = DepthCode::new(d, 6)?.evaluate(l, &weights)?;
        Ok(Self {
            xq: random_tensor(&[n_q, d], &mut rng),
            xk: random_tensor(&[n_k, d], &mut rng),
            reg,
            params,
            dims,
            code,
        })
    }

    fn oracle(&self) -> Vec<f64> {
        let g = |id| self.reg.get(id);
        let p = &self.params;
        augmented_attention_oracle(&self.xq, &self.xk, &self.code, g(p.w_q), g(p.w_k), g(p.wt_q), g(p.wt_k), self.dims.heads)
    }

    /// Library logits with `A0` left unscaled.
    fn decomposed(&self, code: &[f64]) -> Result<Vec<f64>> {
        let mut s = Session::inference(&self.reg);
        let xq = s.constant(&self.xq);
        let xk = s.constant(&self.xk);
        let ops = init_evolution_operators_scaled(&mut s, xq, xk, &self.params, self.dims, 1.0)?;
        let c = s.tape.constant_f64(&[code.len()], code)?;
        let logits = evolved_logits(&mut s.tape, &ops, c)?;
        Ok(s.tape.value(logits).to_vec())
    }
}

pub const ATTENTION_CASES: usize = 60;
pub const ATTENTION_TOL: f64 = 1e-10;

pub fn attention_suite() -> Result<OracleReport> {
    let mut r = OracleReport::new("attention");
    let mut control_gap = f64::INFINITY;
    for i in 0..ATTENTION_CASES {
        let inst = AttentionInstance::random(derive_seed(0xA77, &[i as u64]))?;
        let want = inst.oracle();
        let got = inst.decomposed(&inst.code)?;
        let err = max_abs_diff(&want, &got);
        let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        r.case(err, err / scale, err < ATTENTION_TOL, || format!("instance {i}: max abs diff {err:e}"));

        // Negative control: the oracle must see a perturbed code.
        let mut shifted = inst.code.clone();
        shifted.iter_mut().for_each(|v| *v += 0.25);
        control_gap = control_gap.min(max_abs_diff(&want, &inst.decomposed(&shifted)?));
    }
    let control_ok = control_gap > 1e3 * ATTENTION_TOL;
    r.case(0.0, 0.0, control_ok, || format!("negative control gap only {control_gap:e}"));
    r.note(format!("negative control: smallest gap under a shifted code {control_gap:.3e}"));

    // Zero temporal projections reduce to plain dot-product logits of x.
    let mut inst = AttentionInstance::random(0xA78)?;
    for id in [inst.params.wt_q, inst.params.wt_k] {
        inst.reg.get_mut(id).data_mut().fill(0.0);
    }
    let plain = {
        let (q, k) = (inst.xq.matmul(inst.reg.get(inst.params.w_q))?, inst.xk.matmul(inst.reg.get(inst.params.w_k))?);
        let hw = inst.dims.head_width();
        let mut out = Vec::new();
        for h in 0..inst.dims.heads {
            for i in 0..q.shape()[0] {
                for j in 0..k.shape()[0] {
                    out.push((h * hw..(h + 1) * hw).map(|c| q.at(&[i, c]) * k.at(&[j, c])).sum());
                }
            }
        }
        out
    };
    let err = max_abs_diff(&plain, &inst.decomposed(&inst.code)?);
    r.case(err, err, err < ATTENTION_TOL, || format!("zero temporal projections: {err:e}"));
    Ok(r)
}

// ---------------------------------------------------------------- rotation

/// Monte-Carlo summary of `U·Uᵀ` over `trials` independently seeded matrices.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RotationStats {
    pub dim: usize,
    pub depth: usize,
    pub trials: usize,
    /// Largest `|diag − ½|` over all trials.
    pub max_diag_error: f64,
    /// Mean over trials of each matrix's mean `|off-diagonal|`.
    pub per_matrix_offdiag: f64,
    /// Standard error of `per_matrix_offdiag`.
    pub per_matrix_stderr: f64,
    /// Mean `|off-diagonal|` of the trial-averaged `U·Uᵀ`.
    pub averaged_offdiag: f64,
}

fn gram(u: &Tensor<f64>) -> Vec<f64> {
    let n = u.shape()[0];
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = (0..n).map(|c| u.at(&[i, c]) * u.at(&[j, c])).sum();
        }
    }
    g
}

pub fn rotation_statistics(dim: usize, depth: usize, total_depth: usize, trials: usize, seed: u64) -> Result<RotationStats> {
    if trials < 2 {
        return Err(Error::Input("need at least two trials".into()));
    }
    let mut max_diag_error = 0.0f64;
    let mut per_matrix = Vec::with_capacity(trials);
    let mut sum = vec![0.0; dim * dim];
    let off = (dim * dim - dim) as f64;
    for t in 0..trials {
        let g = gram(&rotation_matrix(dim, depth, total_depth, derive_seed(seed, &[t as u64]))?);
        let mut acc = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                let v = g[i * dim + j];
                sum[i * dim + j] += v;
                if i == j {
                    max_diag_error = max_diag_error.max((v - 0.5).abs());
                } else {
                    acc += v.abs();
                }
            }
        }
        per_matrix.push(acc / off);
    }
    let k = trials as f64;
    let mean = per_matrix.iter().sum::<f64>() / k;
    let var = per_matrix.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let averaged_offdiag = (0..dim * dim)
        .filter(|i| i / dim != i % dim)
        .map(|i| (sum[i] / k).abs())
        .sum::<f64>()
        / off;
    Ok(RotationStats {
        dim,
        depth,
        trials,
        max_diag_error,
        per_matrix_offdiag: mean,
        per_matrix_stderr: (var / k).sqrt(),
        averaged_offdiag,
    })
}

pub const DIAG_TOL: f64 = 1e-12;
pub const OFFDIAG_LIMIT: f64 = 0.05;

pub fn rotation_suite() -> Result<OracleReport> {
    let mut r = OracleReport::new("rotation");
    for (dim, l) in [(64, 1), (64, 3), (64, 6)] {
        let s = rotation_statistics(dim, l, 6, 100, 0x5EED)?;
        r.case(s.max_diag_error, s.max_diag_error / 0.5, s.max_diag_error < DIAG_TOL, || {
            format!("dim {dim} depth {l}: diag error {:e}", s.max_diag_error)
        });
        r.case(0.0, 0.0, s.averaged_offdiag < OFFDIAG_LIMIT, || {
            format!("dim {dim} depth {l}: averaged off-diagonal {}", s.averaged_offdiag)
        });
        r.note(format!(
            "dim {dim} depth {l}: averaged |offdiag| {:.4}, per-matrix |offdiag| {:.4} ± {:.4}",
            s.averaged_offdiag,
            s.per_matrix_offdiag,
            2.0 * s.per_matrix_stderr
        ));
    }
    for (dim, l, seed) in [(2, 1, 0), (6, 2, 1), (16, 5, 2), (128, 4, 3)] {
        let s = rotation_statistics(dim, l, 6, 3, seed)?;
        r.case(s.max_diag_error, s.max_diag_error / 0.5, s.max_diag_error < DIAG_TOL, || {
            format!("dim {dim} depth {l}: diag error {:e}", s.max_diag_error)
        });
    }
    // Depth zero collapses every entry to the cosine at zero.
    let g = gram(&rotation_matrix(64, 0, 6, 9)?);
    let err = max_abs_diff(&g, &vec![0.5; g.len()]);
    r.case(err, err / 0.5, err < DIAG_TOL, || format!("depth zero: max |g − ½| {err:e}"));
    Ok(r)
}

// ---------------------------------------------------------------- cancellation

fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    out
}

/// Scaled `A0 + T·A2` for self-attention, computed with loops from the raw
/// weights. Shape `[m, n, n]`.
fn key_term_logits(inst: &AttentionInstance) -> Vec<f64> {
    let (d, dp, heads) = (inst.dims.d, inst.dims.d_prime, inst.dims.heads);
    let a = d + dp;
    let hw = a / heads;
    let x = &inst.xq;
    let n = x.shape()[0];
    let p = &inst.params;
    let proj = |w: &Tensor<f64>, rows: usize, row: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..a).map(|c| (0..rows).map(|r| row(r) * w.at(&[r, c])).sum()).collect()
    };
    let q: Vec<Vec<f64>> = (0..n).map(|i| proj(inst.reg.get(p.w_q), d, &|r| x.at(&[i, r]))).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|i| proj(inst.reg.get(p.w_k), d, &|r| x.at(&[i, r]))).collect();
    let tq = proj(inst.reg.get(p.wt_q), dp, &|r| inst.code[r]);
    let scale = inst.dims.logit_scale();
    let mut out = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        let cols = h * hw..(h + 1) * hw;
        for qi in &q {
            for kj in &k {
                let a0: f64 = cols.clone().map(|c| qi[c] * kj[c]).sum();
                let key: f64 = cols.clone().map(|c| tq[c] * kj[c]).sum();
                out.push(scale * a0 + key);
            }
        }
    }
    out
}

pub const CANCELLATION_TOL: f64 = 1e-9;

pub fn cancellation_suite() -> Result<OracleReport> {
    let mut r = OracleReport::new("cancellation");
    let mut control_gap = f64::INFINITY;
    for i in 0..40 {
        let mut inst = AttentionInstance::random(derive_seed(0xCA5, &[i as u64]))?;
        inst.xk = inst.xq.clone();
        let n = inst.xq.shape()[0];
        let mut s = Session::inference(&inst.reg);
        let x = s.constant(&inst.xq);
        let ops = init_evolution_operators(&mut s, x, x, &inst.params, inst.dims)?;
        let c = s.tape.constant_f64(&[inst.code.len()], &inst.code)?;
        let logits = evolved_logits(&mut s.tape, &ops, c)?;
        let full = s.tape.softmax_rows(logits, None)?;
        let reduced_logits = key_term_logits(&inst);
        let reduced = softmax_rows(&reduced_logits, n);
        let err = max_abs_diff(s.tape.value(full), &reduced);
        r.case(err, err, err < CANCELLATION_TOL, || format!("instance {i} (n = {n}): {err:e}"));

        // Negative control: a term varying across keys within a row must not cancel.
        if n > 1 {
            let injected: Vec<f64> = reduced_logits
                .iter()
                .enumerate()
                .map(|(idx, v)| v + 0.3 * (idx % n) as f64)
                .collect();
            control_gap = control_gap.min(max_abs_diff(&softmax_rows(&injected, n), &reduced));
        }
    }
    let ok = control_gap > 1e3 * CANCELLATION_TOL;
    r.case(0.0, 0.0, ok, || format!("negative control gap only {control_gap:e}"));
    r.note(format!("negative control: smallest gap with an injected key-varying term {control_gap:.3e}"));

    // Zero operators give uniform weights on both sides.
    let mut inst = AttentionInstance::random(0xCA6)?;
    inst.xk = inst.xq.clone();
    for id in [inst.params.w_q, inst.params.w_k, inst.params.wt_q, inst.params.wt_k] {
        inst.reg.get_mut(id).data_mut().fill(0.0);
    }
    let n = inst.xq.shape()[0];
    let uniform = softmax_rows(&key_term_logits(&inst), n);
    let err = max_abs_diff(&uniform, &vec![1.0 / n as f64; uniform.len()]);
    r.case(err, err, err < CANCELLATION_TOL, || format!("zero operators: {err:e}"));
    Ok(r)
}

// ---------------------------------------------------------------- gradients

pub const GRADIENT_TOL: f64 = 1e-5;
/// Gradient magnitude below which relative error is measured against this floor.
pub const GRADIENT_FLOOR: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn tiny_loss(model: &Model<f64>, track: bool) -> Result<(f64, Option<crate::model::Gradients<f64>>)> {
    use crate::harness::loss::label_smoothed_ce_sum;
    let reg = model.registry();
    let mut s = if track { Session::training(reg, 0.0, 0) } else { Session::inference(reg) };
    let loss = match model.config().architecture {
        Architecture::EncoderOnly => {
            let tokens = [3, 4, 5, 6, 3, 0];
            let pad = [false, false, false, false, false, true];
            let logits = model.classify(&mut s, &tokens, Some(&pad))?;
            let logits = s.tape.reshape(logits, &[1, model.config().num_classes])?;
            label_smoothed_ce_sum(&mut s.tape, logits, &[1], 0.1, None)?.0
        }
        Architecture::EncoderDecoder => {
            let logits = model.seq2seq_logits(&mut s, &[3, 5, 4, 6, 2], &[1, 6, 4, 5, 3])?;
            label_smoothed_ce_sum(&mut s.tape, logits, &[6, 4, 5, 3, 2], 0.1, None)?.0
        }
    };
    let value = s.tape.value(loss)[0];
    let grads = if track { Some(s.backward(loss)?) } else { None };
    Ok((value, grads))
}

pub fn gradient_suite() -> Result<OracleReport> {
    let mut r = OracleReport::new("gradients");
    for arch in [Architecture::EncoderOnly, Architecture::EncoderDecoder] {
        for ff in [FfVariant::Full, FfVariant::Random] {
            let mut model = Model::<f64>::build(&ModelConfig::tiny(arch, ff))?;
            // Move norms and biases off their initial values so every path is exercised.
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            for id in model.registry().ids().collect::<Vec<_>>() {
                for v in model.registry_mut().get_mut(id).data_mut() {
                    *v += rng.gen_range(-0.1..0.1);
                }
            }
            let (_, grads) = tiny_loss(&model, true)?;
            let grads = grads.expect("tracked session");
            let label = format!("{arch:?}/{ff:?}");
            for id in model.registry().ids().collect::<Vec<_>>() {
                let name = model.registry().name(id).to_string();
                let original = model.registry().get(id).clone();
                let analytic = grads.get_or_zero(id, original.numel());
                let numeric = finite_diff_grad(
                    |x| {
                        *model.registry_mut().get_mut(id) = x.clone();
                        tiny_loss(&model, false).map(|(l, _)| l)
                    },
                    &original,
                    FD_STEP,
                )?;
                *model.registry_mut().get_mut(id) = original;
                let abs = max_abs_diff(&analytic, numeric.data());
                let rel = relative_error(&analytic, numeric.data(), GRADIENT_FLOOR);
                r.case(abs, rel, rel < GRADIENT_TOL, || format!("{label} {name}: relative error {rel:e}"));
            }
            for id in model.depth_code_params() {
                let g = grads.get_or_zero(id, model.registry().get(id).numel());
                let peak = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                r.case(0.0, 0.0, peak > 1e-8, || format!("{label} {}: depth-code gradient vanished", model.registry().name(id)));
            }
            // Frozen factors sit outside the registry, so an optimizer step cannot touch them.
            if ff == FfVariant::Random {
                let before: Vec<(String, Tensor<f64>)> =
                    model.frozen().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
                let mut adam = Adam::new(model.registry(), AdamConfig::default());
                adam.update(model.registry_mut(), &grads, 1e-2)?;
                let unchanged = !before.is_empty()
                    && before.iter().all(|(n, t)| model.frozen().get(n) == Some(t))
                    && before.iter().all(|(n, _)| model.registry().id_of(n).is_none());
                r.case(0.0, 0.0, unchanged, || format!("{label}: frozen factors changed or became trainable"));
            }
        }
    }
    Ok(r)
}

// ---------------------------------------------------------------- feed-forward

pub const FF_TOL: f64 = 1e-10;

fn dense_product(u: &Tensor<f64>, sigma: &[f64], v: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (rows, cols) = (u.shape()[0], v.shape()[1]);
    (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| sigma.iter().enumerate().map(|(c, s)| u.at(&[i, c]) * s * v.at(&[c, j])).sum())
                .collect()
        })
        .collect()
}

/// `relu(h·M1 + b1)·M2 + b2 + h`, row by row.
fn two_layer_oracle(h: &Tensor<f64>, m1: &[Vec<f64>], b1: &[f64], m2: &[Vec<f64>], b2: &[f64]) -> Vec<f64> {
    let (n, d) = (h.shape()[0], h.shape()[1]);
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let hidden: Vec<f64> = (0..b1.len())
            .map(|j| ((0..d).map(|c| h.at(&[i, c]) * m1[c][j]).sum::<f64>() + b1[j]).max(0.0))
            .collect();
        for c in 0..d {
            out.push(hidden.iter().enumerate().map(|(j, y)| y * m2[j][c]).sum::<f64>() + b2[c] + h.at(&[i, c]));
        }
    }
    out
}

pub fn ff_suite() -> Result<OracleReport> {
    let mut r = OracleReport::new("ff");
    for (case, (d, d_ff)) in [(4, 6), (6, 4), (8, 8), (8, 32)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0xFF, &[case as u64]));
        let h = random_tensor(&[3, d], &mut rng);

        // Random-rotation variant against its dense composition.
        let mut reg = ParameterRegistry::<f64>::new();
        let mut frozen = FrozenStore::new();
        let p = RandomFfParams::register(&mut reg, &mut frozen, "ff", d, d_ff, 2, 6, 7 + case as u64, false)?;
        for id in [p.sigma1, p.sigma2, p.b1, p.b2] {
            let t = reg.get_mut(id);
            *t = random_tensor(t.shape(), &mut rng);
        }
        let f = |role: &str| frozen.get(&format!("ff.{role}")).expect("registered factor");
        let m1 = dense_product(f("u1"), reg.get(p.sigma1).data(), f("v1"));
        let m2 = dense_product(f("u2"), reg.get(p.sigma2).data(), f("v2"));
        let want = two_layer_oracle(&h, &m1, reg.get(p.b1).data(), &m2, reg.get(p.b2).data());
        let got = {
            let mut s = Session::inference(&reg);
            let x = s.constant(&h);
            let y = random_ff_forward(&mut s, x, &p)?;
            s.tape.value(y).to_vec()
        };
        let err = max_abs_diff(&want, &got);
        r.case(err, err, err < FF_TOL, || format!("random {d}×{d_ff}: {err:e}"));

        // Zero diagonals and biases leave only the residual.
        for id in [p.sigma1, p.sigma2, p.b1, p.b2] {
            reg.get_mut(id).data_mut().fill(0.0);
        }
        let mut s = Session::inference(&reg);
        let x = s.constant(&h);
        let y = random_ff_forward(&mut s, x, &p)?;
        let err = max_abs_diff(s.tape.value(y), h.data());
        r.case(err, err, err == 0.0, || format!("random {d}×{d_ff} residual identity: {err:e}"));

        // Dense variant.
        let mut reg = ParameterRegistry::<f64>::new();
        let p = FullFfParams::register(&mut reg, "ff", d, d_ff, false, &mut rng)?;
        for id in [p.b1, p.b2] {
            let t = reg.get_mut(id);
            *t = random_tensor(t.shape(), &mut rng);
        }
        let rows = |t: &Tensor<f64>| -> Vec<Vec<f64>> {
            (0..t.shape()[0]).map(|i| (0..t.shape()[1]).map(|j| t.at(&[i, j])).collect()).collect()
        };
        let want = two_layer_oracle(&h, &rows(reg.get(p.w1)), reg.get(p.b1).data(), &rows(reg.get(p.w2)), reg.get(p.b2).data());
        let got = {
            let mut s = Session::inference(&reg);
            let x = s.constant(&h);
            let y = full_ff_forward(&mut s, x, &p)?;
            s.tape.value(y).to_vec()
        };
        let err = max_abs_diff(&want, &got);
        r.case(err, err, err < FF_TOL, || format!("full {d}×{d_ff}: {err:e}"));

        for id in [p.w1, p.w2, p.b1, p.b2] {
            reg.get_mut(id).data_mut().fill(0.0);
        }
        let mut s = Session::inference(&reg);
        let x = s.constant(&h);
        let y = full_ff_forward(&mut s, x, &p)?;
        let err = max_abs_diff(s.tape.value(y), h.data());
        r.case(err, err, err == 0.0, || format!("full {d}×{d_ff} residual identity: {err:e}"));
    }
    Ok(r)
}

// ---------------------------------------------------------------- params

pub fn params_suite() -> Result<OracleReport> {
    let mut r = OracleReport::new("params");
    for arch in [Architecture::EncoderOnly, Architecture::EncoderDecoder] {
        for ff in [FfVariant::Random, FfVariant::Full] {
            for attention in [AttentionKind::Evolving, AttentionKind::Standard] {
                for (blocks, depth, post_norm) in [(1, 2, true), (2, 1, true), (1, 3, false)] {
                    let mut c = ModelConfig::tiny(arch, ff);
                    c.attention = attention;
                    c.num_blocks = blocks;
                    c.depth_per_block = depth;
                    c.post_norm = post_norm;
                    let closed = count_params(&c)?.total;
                    let built = Model::<f64>::build(&c)?.registry().count();
                    let diff = closed.abs_diff(built) as f64;
                    r.case(diff, diff / built as f64, closed == built, || {
                        format!("{arch:?}/{ff:?}/{attention:?} {blocks}×{depth}: closed form {closed}, registry {built}")
                    });
                }
            }
        }
    }
    let total = |c: ModelConfig| count_params(&c).map(|b| b.total);
    let order = [
        total(ModelConfig::base(FfVariant::Random, 1))?,
        total(ModelConfig::base(FfVariant::Random, 2))?,
        total(ModelConfig::base(FfVariant::Full, 1))?,
        total(ModelConfig::base(FfVariant::Full, 2))?,
        total(ModelConfig::base_standard())?,
    ];
    r.case(0.0, 0.0, order.windows(2).all(|w| w[0] < w[1]), || format!("base ordering broken: {order:?}"));
    r.note(format!("base totals: {order:?}"));
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_with_zero_code_and_projections_is_plain_logits() {
        let x = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = Tensor::from_f64(&[2, 4], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let zero = Tensor::zeros(&[2, 4]).unwrap();
        let logits = augmented_attention_oracle(&x, &x, &[0.0, 0.0], &w, &w, &zero, &zero, 1);
        assert_eq!(logits, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn attention_and_cancellation_pass() {
        for report in [attention_suite().unwrap(), cancellation_suite().unwrap()] {
            assert!(report.passed, "{report:?}");
            assert!(report.cases >= 40);
        }
    }

    #[test]
    fn table_lists_each_suite() {
        let t = format_table(&[OracleReport::new("x"), OracleReport::new("y")]);
        assert_eq!(t.lines().count(), 3);
    }
}
