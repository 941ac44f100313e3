//! Instrumented logit-construction costs over sequence lengths.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    baseline_logit_multiplications, count_logit_multiplications, evolved_logits, init_evolution_operators,
    standard_heads, standard_logits, OperatorParams, Phase, StandardAttentionParams,
};
use crate::depth::{initial_code_weights, DepthCode};
use crate::error::{Error, Result};
use crate::model::{gaussian, ModelConfig, ParameterRegistry, Session};
use crate::tensor::counter;

/// Measured and closed-form multiplication counts at one length.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub n: usize,
    pub baseline_measured: u64,
    pub baseline_closed: u64,
    pub initial_measured: u64,
    pub initial_closed: u64,
    pub per_depth_measured: u64,
    pub per_depth_closed: u64,
    pub baseline_ms: f64,
    pub initial_ms: f64,
    pub per_depth_ms: f64,
}

impl CostRow {
    pub fn counts_match(&self) -> bool {
        self.baseline_measured == self.baseline_closed
            && self.initial_measured == self.initial_closed
            && self.per_depth_measured == self.per_depth_closed
    }

    pub const CSV_HEADER: &'static str = "n,baseline_measured,baseline_closed,initial_measured,initial_closed,\
per_depth_measured,per_depth_closed,baseline_ms,initial_ms,per_depth_ms";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3},{:.3},{:.3}",
            self.n,
            self.baseline_measured,
            self.baseline_closed,
            self.initial_measured,
            self.initial_closed,
            self.per_depth_measured,
            self.per_depth_closed,
            self.baseline_ms,
            self.initial_ms,
            self.per_depth_ms
        )
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Runs one self-attention logit construction of each kind per length, in
/// double precision, counting multiplications on the tape.
pub fn bench_costs(config: &ModelConfig, lengths: &[usize]) -> Result<Vec<CostRow>> {
    config.validate()?;
    let dims = config.attention_dims()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut reg = ParameterRegistry::<f64>::new();
    let ops_params = OperatorParams::register(&mut reg, "bench.ops", dims, &mut rng)?;
    let std_params = StandardAttentionParams::register(&mut reg, "bench.std", dims.d, false, &mut rng)?;
    let code = DepthCode::new(dims.d_prime, config.total_depth().max(1))?;
    let weights = initial_code_weights::<f64>(dims.d_prime)?;

    let mut rows = Vec::with_capacity(lengths.len());
    for &n in lengths {
        if n == 0 {
            return Err(Error::Input("sequence length must be positive".into()));
        }
        let x = gaussian::<f64>(&[n, dims.d], 1.0, &mut rng)?;
        let mut s = Session::inference(&reg);
        let xv = s.constant(&x);

        let (qh, kh) = standard_heads(&mut s, xv, xv, &std_params, dims)?;
        let t = Instant::now();
        let (_, baseline_measured) = counter::measure(|| standard_logits(&mut s.tape, qh, kh, dims));
        let baseline_ms = ms(t);

        let t = Instant::now();
        let (ops, initial_measured) = counter::measure(|| init_evolution_operators(&mut s, xv, xv, &ops_params, dims));
        let initial_ms = ms(t);
        let ops = ops?;

        let w = s.constant(&weights);
        let c = code.record(&mut s.tape, 1, w)?;
        let t = Instant::now();
        let (logits, per_depth_measured) = counter::measure(|| evolved_logits(&mut s.tape, &ops, c));
        let per_depth_ms = ms(t);
        logits?;

        rows.push(CostRow {
            n,
            baseline_measured,
            baseline_closed: baseline_logit_multiplications(n, n, dims.d, dims.heads),
            initial_measured,
            initial_closed: count_logit_multiplications(n, n, dims.d, dims.d_prime, dims.heads, Phase::Initial),
            per_depth_measured,
            per_depth_closed: count_logit_multiplications(n, n, dims.d, dims.d_prime, dims.heads, Phase::PerDepth),
            baseline_ms,
            initial_ms,
            per_depth_ms,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[CostRow]) -> String {
    let mut out = format!("{}\n", CostRow::CSV_HEADER);
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| *v <= 0.0) {
        return Err(Error::Input("need at least two positive points".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("lengths must differ".into()));
    }
    Ok(sxy / sxx)
}

/// Closed-form logit multiplications of a `depth`-deep self-attention stack:
/// `(evolving, baseline)`. The evolving stack pays the initial phase once.
pub fn stack_logit_costs(n: usize, d: usize, d_prime: usize, heads: usize, depth: usize) -> (u64, u64) {
    let evolving = count_logit_multiplications(n, n, d, d_prime, heads, Phase::Initial)
        + depth as u64 * count_logit_multiplications(n, n, d, d_prime, heads, Phase::PerDepth);
    (evolving, depth as u64 * baseline_logit_multiplications(n, n, d, heads))
}
