use crate::{Error, Result};

/// `base_lr * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond schedule length {total_steps}")));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    if 2 * step == total_steps {
        return Ok(base_lr / 2.0);
    }
    let t = step as f64 / total_steps as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 0.1).unwrap(), 0.1);
        assert_eq!(cosine_lr(100, 100, 0.1).unwrap(), 0.0);
        assert_eq!(cosine_lr(50, 100, 0.1).unwrap(), 0.05);
        assert_eq!(cosine_lr(1, 2, 0.1).unwrap(), 0.05);
        assert!(cosine_lr(0, 0, 0.1).is_err());
        assert!(cosine_lr(3, 2, 0.1).is_err());
    }

    #[test]
    fn monotone_decreasing() {
        let lrs: Vec<f64> = (0..=37).map(|s| cosine_lr(s, 37, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }
}
