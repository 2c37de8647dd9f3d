use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplier applied every `decay_every` iterations.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub n_folds: usize,
    pub seed: u64,
    pub dice_eps: f64,
    /// Share of each outer fold's training IDs held out for checkpoint selection.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 32,
            lr0: 1e-3,
            decay_factor: 0.3,
            decay_every: 2000,
            n_folds: 6,
            seed: 0,
            dice_eps: 1e-5,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.iterations == 0 || self.batch_size == 0 || self.decay_every == 0 || self.n_folds == 0 {
            return bad("iterations, batch_size, decay_every and n_folds must be positive".into());
        }
        if !(self.lr0 > 0.0) || !(self.dice_eps > 0.0) {
            return bad(format!("lr0 ({}) and dice_eps ({}) must be positive", self.lr0, self.dice_eps));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must be in (0, 1], got {}", self.decay_factor));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Step schedule `lr0 * decay_factor^floor(iteration / decay_every)`.
pub fn learning_rate(iteration: usize, cfg: &TrainConfig) -> f64 {
    let steps = (iteration / cfg.decay_every) as i32;
    cfg.lr0 * cfg.decay_factor.powi(steps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_breakpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(0, &cfg), 0.001);
        assert_eq!(learning_rate(1999, &cfg), 0.001);
        assert!((learning_rate(2000, &cfg) - 3e-4).abs() < 1e-18);
        assert!((learning_rate(9999, &cfg) - 8.1e-6).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for it in 0..cfg.iterations {
            let lr = learning_rate(it, &cfg);
            assert!(lr <= prev);
            if it % cfg.decay_every != 0 {
                assert_eq!(lr, prev);
            }
            prev = lr;
        }
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { decay_factor: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { decay_factor: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"iterations": 5, "momentum": 0.9}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"iterations": 5}"#).unwrap();
        assert_eq!(c.iterations, 5);
        assert_eq!(c.batch_size, 32);
    }
}
