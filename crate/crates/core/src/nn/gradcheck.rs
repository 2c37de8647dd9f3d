//! Central-difference verification of the analytic backward passes, in
//! float64.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::training::loss::soft_dice_loss;

use super::layers::{relu, relu_backward, upsample_nearest2x, upsample_nearest2x_backward};
use super::{softmax_channels, softmax_channels_backward, BatchNorm2d, Conv2d, Mode, Network, NetworkConfig, Param};
use super::{ResidualBlock, Tensor};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]; keeps near-zero gradients from
/// turning roundoff into large relative errors.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// `(f(+h) - f(-h)) / 2h` where `f(delta)` evaluates the objective with one
/// coordinate shifted by `delta`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(STEP)? - f(-STEP)?) / (2.0 * STEP))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape matches")
}

fn randomize(p: &mut Param<f64>, scale: f64, offset: f64, rng: &mut ChaCha8Rng) {
    for v in p.value.iter_mut() {
        *v = offset + scale * rng.sample::<f64, _>(StandardNormal);
    }
}

/// A layer that can be probed with a linear objective `sum(r * f(x))`.
trait Probe {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>>;
    fn params(&mut self) -> Vec<&mut Param<f64>>;
}

impl Probe for Conv2d<f64> {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        Conv2d::forward(self, x, Mode::Train)
    }
    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        Conv2d::backward(self, g)
    }
    fn params(&mut self) -> Vec<&mut Param<f64>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl Probe for BatchNorm2d<f64> {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        BatchNorm2d::forward(self, x, Mode::Train)
    }
    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        BatchNorm2d::backward(self, g)
    }
    fn params(&mut self) -> Vec<&mut Param<f64>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

impl Probe for ResidualBlock<f64> {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        ResidualBlock::forward(self, x, Mode::Train)
    }
    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        ResidualBlock::backward(self, g)
    }
    fn params(&mut self) -> Vec<&mut Param<f64>> {
        vec![
            &mut self.first.conv.weight,
            &mut self.first.bn.gamma,
            &mut self.first.bn.beta,
            &mut self.conv.weight,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ]
    }
}

#[derive(Default)]
struct Relu(Option<Tensor<f64>>);

impl Probe for Relu {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.0 = Some(x.clone());
        Ok(relu(x))
    }
    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        relu_backward(self.0.as_ref().expect("forward first"), g)
    }
    fn params(&mut self) -> Vec<&mut Param<f64>> {
        Vec::new()
    }
}

struct Upsample;

impl Probe for Upsample {
    fn forward(&mut self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(upsample_nearest2x(x))
    }
    fn backward(&mut self, g: &Tensor<f64>) -> Result<Tensor<f64>> {
        upsample_nearest2x_backward(g)
    }
    fn params(&mut self) -> Vec<&mut Param<f64>> {
        Vec::new()
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks the input gradient and every parameter entry of `layer`.
fn probe<P: Probe>(name: &str, layer: &mut P, x: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let y = layer.forward(x)?;
    let r = random_tensor(y.shape(), rng);
    for p in layer.params() {
        p.zero_grad();
    }
    let gx = layer.backward(&r)?;
    let analytic_params: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad.clone()).collect();

    let mut worst = 0f64;
    let mut checked = 0;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        let n = central_difference(|d| {
            xp.data_mut()[i] = orig + d;
            Ok(dot(&r, &layer.forward(&xp)?))
        })?;
        xp.data_mut()[i] = orig;
        worst = worst.max(relative_error(gx.data()[i], n));
        checked += 1;
    }
    for (pi, analytic) in analytic_params.iter().enumerate() {
        for i in 0..analytic.len() {
            let orig = layer.params()[pi].value[i];
            let n = central_difference(|d| {
                layer.params()[pi].value[i] = orig + d;
                Ok(dot(&r, &layer.forward(x)?))
            })?;
            layer.params()[pi].value[i] = orig;
            worst = worst.max(relative_error(analytic[i], n));
            checked += 1;
        }
    }
    Ok(GradReport { name: name.to_string(), checked, max_rel_error: worst })
}

/// 1×2×8×8 input, 3 output channels, 3×3 kernels at strides 1 and 2.
pub fn check_conv2d(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor([1, 2, 8, 8], &mut rng);
    let mut worst = GradReport { name: "conv2d".into(), checked: 0, max_rel_error: 0.0 };
    for stride in [1, 2] {
        let mut conv = Conv2d::<f64>::same(2, 3, 3, stride);
        randomize(&mut conv.weight, 0.5, 0.0, &mut rng);
        randomize(&mut conv.bias, 0.5, 0.0, &mut rng);
        let r = probe("conv2d", &mut conv, &x, &mut rng)?;
        worst.checked += r.checked;
        worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
    }
    Ok(worst)
}

/// Train-mode batch normalization on a 2×3×4×4 input.
pub fn check_batch_norm(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor([2, 3, 4, 4], &mut rng);
    let mut bn = BatchNorm2d::<f64>::new(3);
    randomize(&mut bn.gamma, 0.3, 1.0, &mut rng);
    randomize(&mut bn.beta, 0.3, 0.0, &mut rng);
    probe("batch_norm", &mut bn, &x, &mut rng)
}

/// Inputs are kept at least 0.01 away from the kink.
pub fn check_relu(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor([2, 3, 5, 5], &mut rng).map(|v| if v.abs() < 0.01 { v.signum() * 0.01 + v } else { v });
    probe("relu", &mut Relu::default(), &x, &mut rng)
}

pub fn check_upsample(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor([2, 2, 3, 4], &mut rng);
    probe("upsample_nearest2x", &mut Upsample, &x, &mut rng)
}

/// One residual block of width 3 on a 1×3×6×6 input.
pub fn check_residual_block(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor([1, 3, 6, 6], &mut rng);
    let mut block = ResidualBlock::<f64>::new(3);
    for p in Probe::params(&mut block) {
        randomize(p, 0.3, 0.0, &mut rng);
    }
    randomize(&mut block.first.bn.gamma, 0.2, 1.0, &mut rng);
    randomize(&mut block.bn.gamma, 0.2, 1.0, &mut rng);
    probe("residual_block", &mut block, &x, &mut rng)
}

fn one_hot(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let [b, c, h, w] = shape;
    let mut t = Tensor::zeros(shape);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                *t.at_mut(bi, rng.random_range(0..c), y, x) = 1.0;
            }
        }
    }
    t
}

fn dice_of_logits(z: &Tensor<f64>, target: &Tensor<f64>) -> Result<f64> {
    Ok(soft_dice_loss(&softmax_channels(z), target, 1e-5)?.0)
}

/// Soft-Dice loss of softmax probabilities w.r.t. the logits, on 1×3×4×4.
pub fn check_softmax_dice(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = random_tensor([1, 3, 4, 4], &mut rng);
    let target = one_hot(z.shape(), &mut rng);
    let p = softmax_channels(&z);
    let (_, gp) = soft_dice_loss(&p, &target, 1e-5)?;
    let gz = softmax_channels_backward(&p, &gp)?;
    let mut zp = z.clone();
    let mut worst = 0f64;
    for i in 0..z.len() {
        let orig = zp.data()[i];
        let n = central_difference(|d| {
            zp.data_mut()[i] = orig + d;
            dice_of_logits(&zp, &target)
        })?;
        zp.data_mut()[i] = orig;
        worst = worst.max(relative_error(gz.data()[i], n));
    }
    Ok(GradReport { name: "softmax+soft_dice".into(), checked: z.len(), max_rel_error: worst })
}

/// Soft-Dice loss w.r.t. probabilities on a random simplex-valued 1×3×4×4.
pub fn check_soft_dice(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = softmax_channels(&random_tensor([1, 3, 4, 4], &mut rng));
    let target = one_hot(p.shape(), &mut rng);
    let (_, gp) = soft_dice_loss(&p, &target, 1e-5)?;
    let mut pp = p.clone();
    let mut worst = 0f64;
    for i in 0..p.len() {
        let orig = pp.data()[i];
        let n = central_difference(|d| {
            pp.data_mut()[i] = orig + d;
            Ok(soft_dice_loss(&pp, &target, 1e-5)?.0)
        })?;
        pp.data_mut()[i] = orig;
        worst = worst.max(relative_error(gp.data()[i], n));
    }
    Ok(GradReport { name: "soft_dice".into(), checked: p.len(), max_rel_error: worst })
}

/// End-to-end soft-Dice loss of the full network on a 1×5×16×16 input
/// (base width 4, one residual block), at `samples` random parameter entries.
pub fn check_network(seed: u64, samples: usize) -> Result<GradReport> {
    let cfg = NetworkConfig { in_channels: 5, n_classes: 8, base_channels: 4, n_down: 3, n_up: 3, n_res_blocks: 1 };
    let mut net = Network::<f64>::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    for (name, p) in net.params_mut() {
        if name.ends_with("bias") || name.ends_with("beta") {
            randomize(p, 0.1, 0.0, &mut rng);
        } else if name.ends_with("gamma") {
            randomize(p, 0.2, 1.0, &mut rng);
        }
    }
    let x = random_tensor([1, 5, 16, 16], &mut rng);
    let target = one_hot([1, 8, 16, 16], &mut rng);

    net.zero_grad();
    let p = softmax_channels(&net.forward(&x, Mode::Train)?);
    let (_, gp) = soft_dice_loss(&p, &target, 1e-5)?;
    net.backward(&softmax_channels_backward(&p, &gp)?)?;

    let sizes: Vec<usize> = net.params().iter().map(|(_, p)| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<usize> = sample(&mut rng, total, samples.min(total)).into_vec();
    picks.sort_unstable();
    let mut worst = 0f64;
    for flat in picks {
        let (mut pi, mut i) = (0, flat);
        while i >= sizes[pi] {
            i -= sizes[pi];
            pi += 1;
        }
        let analytic = net.params()[pi].1.grad[i];
        let orig = net.params()[pi].1.value[i];
        let n = central_difference(|d| {
            net.params_mut()[pi].1.value[i] = orig + d;
            dice_of_logits(&net.forward(&x, Mode::Train)?, &target)
        })?;
        net.params_mut()[pi].1.value[i] = orig;
        worst = worst.max(relative_error(analytic, n));
    }
    Ok(GradReport { name: "network".into(), checked: samples.min(total), max_rel_error: worst })
}
