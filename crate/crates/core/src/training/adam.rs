use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Moments, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update at step `t >= 1`, elementwise.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut Moments<T>,
    lr: f64,
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("adam step index starts at 1".into()));
    }
    let n = params.len();
    if grads.len() != n || state.first.len() != n || state.second.len() != n {
        return Err(Error::Shape(format!(
            "adam: params {n}, grads {}, moments {}/{}",
            grads.len(),
            state.first.len(),
            state.second.len()
        )));
    }
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(exp);
    let c2 = 1.0 - cfg.beta2.powi(exp);
    for i in 0..n {
        let g = grads[i].as_f64();
        let m = cfg.beta1 * state.first[i].as_f64() + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.second[i].as_f64() + (1.0 - cfg.beta2) * g * g;
        state.first[i] = T::from_f64_lossy(m);
        state.second[i] = T::from_f64_lossy(v);
        let update = lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        params[i] = T::from_f64_lossy(params[i].as_f64() - update);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.3f64, -1.0, 2.0];
        let before = p.clone();
        let mut s = Moments::zeros(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 1e-3, &AdamConfig::default(), 1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut p = vec![1.0f64];
        let mut s = Moments::zeros(1);
        adam_step(&mut p, &[0.5], &mut s, 1e-3, &AdamConfig::default(), 1).unwrap();
        // m̂ = 0.5, v̂ = 0.25 -> Δ = -lr * 0.5 / (0.5 + 1e-8)
        let expect = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = vec![0.0f32; 2];
        let mut s = Moments::zeros(2);
        assert!(adam_step(&mut p, &[0.0; 3], &mut s, 1e-3, &AdamConfig::default(), 1).is_err());
        assert!(adam_step(&mut p, &[0.0; 2], &mut s, 1e-3, &AdamConfig::default(), 0).is_err());
    }
}
