use crate::error::{Error, Result};
use crate::model::argmax;
use crate::tensor::{Real, Tape, Var};

/// Summed label-smoothed cross-entropy over the rows of `logits` `[n, V]`.
///
/// The target gets weight `1−ε`, every other class `ε/(V−1)`. Rows whose
/// target equals `ignore` contribute nothing. Returns the summed loss, the
/// number of scored rows, and how many of them the argmax got right.
pub fn label_smoothed_ce_sum<R: Real>(
    tape: &mut Tape<R>,
    logits: Var,
    targets: &[usize],
    eps: f64,
    ignore: Option<usize>,
) -> Result<(Var, usize, usize)> {
    let [n, v] = tape.shape(logits)[..] else {
        return Err(Error::Shape(format!("logits must be [n, V], got {:?}", tape.shape(logits))));
    };
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} rows", targets.len())));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Input(format!("label smoothing {eps} outside [0, 1)")));
    }
    if v < 2 {
        return Err(Error::Input("need at least two classes".into()));
    }
    let off = eps / (v - 1) as f64;
    let mut q = vec![0.0; n * v];
    let (mut scored, mut correct) = (0, 0);
    for (i, &t) in targets.iter().enumerate() {
        if Some(t) == ignore {
            continue;
        }
        if t >= v {
            return Err(Error::Input(format!("target {t} outside {v} classes")));
        }
        scored += 1;
        q[i * v..(i + 1) * v].fill(off);
        q[i * v + t] = 1.0 - eps;
        if argmax(&tape.value(logits)[i * v..(i + 1) * v]) == t {
            correct += 1;
        }
    }
    if scored == 0 {
        return Err(Error::Input("no scored targets: every position is padding".into()));
    }
    let logp = tape.log_softmax_rows(logits)?;
    let qv = tape.constant_f64(&[n, v], &q)?;
    let weighted = tape.mul(logp, qv)?;
    let total = tape.sum(weighted)?;
    Ok((tape.scale(total, -1.0)?, scored, correct))
}

/// Mean label-smoothed cross-entropy over scored rows.
pub fn label_smoothed_ce<R: Real>(
    tape: &mut Tape<R>,
    logits: Var,
    targets: &[usize],
    eps: f64,
    ignore: Option<usize>,
) -> Result<Var> {
    let (sum, scored, _) = label_smoothed_ce_sum(tape, logits, targets, eps, ignore)?;
    tape.scale(sum, 1.0 / scored as f64)
}
