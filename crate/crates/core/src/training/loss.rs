use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// Negative sum of per-class soft Dice scores, background included.
///
/// For class `c`, pooled over batch and pixels:
/// `D_c = (2 Σ p·g + eps) / (Σ p + Σ g + eps)`, and `loss = -Σ_c D_c`.
/// Returns the loss and its gradient w.r.t. `probs`.
pub fn soft_dice_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<(f64, Tensor<T>)> {
    let (loss, _, grad) = soft_dice_terms(probs, target, eps)?;
    Ok((loss, grad))
}

/// Like [`soft_dice_loss`] but also returns the per-class scores.
pub fn soft_dice_terms<T: Scalar>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    eps: f64,
) -> Result<(f64, Vec<f64>, Tensor<T>)> {
    if probs.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "soft dice: probs {:?} vs target {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    let [b, c, h, w] = probs.shape();
    let hw = h * w;
    let (p, g) = (probs.data(), target.data());
    let mut inter = vec![0f64; c];
    let mut psum = vec![0f64; c];
    let mut gsum = vec![0f64; c];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * hw;
            for i in off..off + hw {
                let (pv, gv) = (p[i].as_f64(), g[i].as_f64());
                inter[ch] += pv * gv;
                psum[ch] += pv;
                gsum[ch] += gv;
            }
        }
    }
    let mut scores = Vec::with_capacity(c);
    let mut coef = Vec::with_capacity(c);
    for ch in 0..c {
        let num = 2.0 * inter[ch] + eps;
        let den = psum[ch] + gsum[ch] + eps;
        scores.push(num / den);
        // dD/dp = (2 g den - num) / den²  ->  a·g - q
        coef.push((2.0 / den, num / (den * den)));
    }
    let mut grad = Tensor::zeros(probs.shape());
    let out = grad.data_mut();
    for n in 0..b {
        for (ch, &(a, q)) in coef.iter().enumerate() {
            let off = (n * c + ch) * hw;
            for i in off..off + hw {
                out[i] = T::from_f64_lossy(-(a * g[i].as_f64() - q));
            }
        }
    }
    Ok((-scores.iter().sum::<f64>(), scores, grad))
}
