/// Warmup then inverse-square-root decay, peaking at `step == warmup`:
/// `(lr_max/√d)·min(step^-0.5, warmup^-1.5·step)`.
pub fn lr_at(step: u64, d: usize, lr_max: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    lr_max / (d as f64).sqrt() * s.powf(-0.5).min(w.powf(-1.5) * s)
}
