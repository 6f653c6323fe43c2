use super::DistillConfig;

/// Linear warmup from 0 to `peak_lr`, then half-cosine decay to `min_lr`
/// at `total_steps`; constant `min_lr` afterwards.
pub fn lr_at(step: usize, config: &DistillConfig) -> f64 {
    let (peak, floor) = (config.peak_lr, config.min_lr);
    let warmup = config.warmup_steps;
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = config.total_steps.saturating_sub(warmup);
    let progress = if span == 0 {
        if step > warmup {
            1.0
        } else {
            0.0
        }
    } else {
        ((step - warmup) as f64 / span as f64).clamp(0.0, 1.0)
    };
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
