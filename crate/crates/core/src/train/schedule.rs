use std::f64::consts::PI;

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at
/// `total`. Steps outside `[0, total]` are clamped.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total == warmup {
        return peak;
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    peak * 0.5 * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(lr_schedule(0, 10, 100, 0.5), 0.0);
        assert_eq!(lr_schedule(10, 10, 100, 0.5), 0.5);
        assert_eq!(lr_schedule(100, 10, 100, 0.5), 0.0);
        assert_eq!(lr_schedule(5, 10, 100, 0.5), 0.25);
        assert_eq!(lr_schedule(0, 0, 10, 2.0), 2.0);
    }

    #[test]
    fn continuous_at_warmup() {
        let below = lr_schedule(999, 1000, 5000, 1.0);
        let at = lr_schedule(1000, 1000, 5000, 1.0);
        let above = lr_schedule(1001, 1000, 5000, 1.0);
        assert!((at - below).abs() < 2e-3 && (at - above).abs() < 2e-3);
    }
}
