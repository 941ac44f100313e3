use super::Tensor;
use crate::error::Result;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape(), grad)
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`.
///
/// The floor keeps gradients that are exactly zero in theory (and hence pure
/// rounding noise in both estimates) from reading as large relative errors.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / inf(a).max(inf(b)).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn square_sum() {
        let x = Tensor::from_f64(&[1], &[3.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-6).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn softmax_entry_matches_analytic_jacobian_row() {
        let xs = [0.3, -1.2, 0.7, 2.0, -0.1];
        let x = Tensor::from_f64(&[1, 5], &xs).unwrap();
        let k = 2;
        let entry = |t: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(t);
            let s = tape.softmax_rows(v, None)?;
            Ok(tape.value(s)[k])
        };
        let fd = finite_diff_grad(entry, &x, 1e-6).unwrap();
        let max = xs.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = xs.iter().map(|v| (v - max).exp()).sum();
        let p: Vec<f64> = xs.iter().map(|v| (v - max).exp() / z).collect();
        let analytic: Vec<f64> = (0..5)
            .map(|j| p[k] * (if j == k { 1.0 } else { 0.0 } - p[j]))
            .collect();
        assert!(relative_error(fd.data(), &analytic, 0.0) < 1e-6);
    }
}
