use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at
/// `total_steps`. With no decay phase the rate is `base_lr` until the end.
pub fn cosine_schedule(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f32) -> Result<f32> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if warmup_steps > total_steps {
        return Err(Error::Config(format!("warmup_steps {warmup_steps} exceeds total_steps {total_steps}")));
    }
    if step > total_steps {
        return Err(Error::Precondition(format!("step {step} is past total_steps {total_steps}")));
    }
    let base = base_lr as f64;
    let lr = if step < warmup_steps {
        base * step as f64 / warmup_steps as f64
    } else if warmup_steps == total_steps {
        base
    } else {
        let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
        base * 0.5 * (1.0 + (PI * progress).cos())
    };
    Ok((lr as f32).clamp(0.0, base_lr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(cosine_schedule(0, 4, 20, 0.1).unwrap(), 0.0);
        assert_eq!(cosine_schedule(4, 4, 20, 0.1).unwrap(), 0.1);
        assert_eq!(cosine_schedule(20, 4, 20, 0.1).unwrap(), 0.0);
        assert!((cosine_schedule(12, 4, 20, 0.1).unwrap() - 0.05).abs() < 1e-7);
        assert!((cosine_schedule(2, 4, 20, 0.1).unwrap() - 0.05).abs() < 1e-7);
    }

    #[test]
    fn errors() {
        assert!(matches!(cosine_schedule(0, 0, 0, 0.1), Err(Error::Config(_))));
        assert!(matches!(cosine_schedule(0, 5, 4, 0.1), Err(Error::Config(_))));
        assert!(matches!(cosine_schedule(5, 0, 4, 0.1), Err(Error::Precondition(_))));
    }

    #[test]
    fn no_decay_phase_holds_base() {
        assert_eq!(cosine_schedule(3, 3, 3, 0.1).unwrap(), 0.1);
    }
}
