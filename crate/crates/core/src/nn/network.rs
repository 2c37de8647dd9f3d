//! Residual encoder-decoder FCN for 2.5D slab inputs.
//!
//! Topology: 7×7 stem, `n_down` stride-2 3×3 convolutions doubling the
//! width, `n_res_blocks` residual blocks at the bottleneck, `n_up` nearest ×2
//! upsampling + 3×3 convolutions halving the width, and a 1×1 head producing
//! per-class logits. Every convolution except the head is followed by batch
//! normalization and ReLU.
//!
//! Convolutions followed by batch normalization have no trainable bias since
//! the normalization cancels it; only the head's bias is a parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::layers::{relu, relu_backward, upsample_nearest2x, upsample_nearest2x_backward};
use super::{BatchNorm2d, Conv2d, Mode, Param, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    pub base_channels: usize,
    pub n_down: usize,
    pub n_up: usize,
    pub n_res_blocks: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { in_channels: 5, n_classes: 8, base_channels: 32, n_down: 3, n_up: 3, n_res_blocks: 6 }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_down != self.n_up {
            return Err(Error::InvalidArgument(format!(
                "n_down ({}) must equal n_up ({})",
                self.n_down, self.n_up
            )));
        }
        if self.in_channels == 0 || self.n_classes == 0 || self.base_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this factor.
    pub fn spatial_factor(&self) -> usize {
        1 << self.n_down
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.n_down
    }
}

/// conv → BN → ReLU
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    activation: Option<Tensor<T>>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(conv: Conv2d<T>) -> Self {
        let bn = BatchNorm2d::new(conv.shape.out_channels);
        Self { conv, bn, activation: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(relu(&self.bn.infer(&self.conv.infer(x)?)?))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = relu(&self.bn.forward(&self.conv.forward(x, mode)?, mode)?);
        self.activation = (mode == Mode::Train).then(|| y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let act = self.activation.take().ok_or_else(|| Error::Shape("backward without forward".into()))?;
        let g = relu_backward(&act, grad)?;
        self.conv.backward(&self.bn.backward(&g)?)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((format!("{prefix}.conv.weight"), &self.conv.weight));
        out.push((format!("{prefix}.bn.gamma"), &self.bn.gamma));
        out.push((format!("{prefix}.bn.beta"), &self.bn.beta));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((format!("{prefix}.conv.weight"), &mut self.conv.weight));
        out.push((format!("{prefix}.bn.gamma"), &mut self.bn.gamma));
        out.push((format!("{prefix}.bn.beta"), &mut self.bn.beta));
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        out.push((format!("{prefix}.bn.running_mean"), &self.bn.running_mean));
        out.push((format!("{prefix}.bn.running_var"), &self.bn.running_var));
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        out.push((format!("{prefix}.bn.running_mean"), &mut self.bn.running_mean));
        out.push((format!("{prefix}.bn.running_var"), &mut self.bn.running_var));
    }
}

/// `out = x + BN(conv(ReLU(BN(conv(x)))))` with an identity skip.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub first: ConvBnRelu<T>,
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            first: ConvBnRelu::new(Conv2d::same(channels, channels, 3, 1)),
            conv: Conv2d::same(channels, channels, 3, 1),
            bn: BatchNorm2d::new(channels),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.bn.infer(&self.conv.infer(&self.first.infer(x)?)?)?;
        y.add_assign(x)?;
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.first.forward(x, mode)?;
        let mut y = self.bn.forward(&self.conv.forward(&h, mode)?, mode)?;
        y.add_assign(x)?;
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.conv.backward(&self.bn.backward(grad)?)?;
        let mut gx = self.first.backward(&g)?;
        gx.add_assign(grad)?;
        Ok(gx)
    }

    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.first.params(&format!("{prefix}.a"), out);
        out.push((format!("{prefix}.b.conv.weight"), &self.conv.weight));
        out.push((format!("{prefix}.b.bn.gamma"), &self.bn.gamma));
        out.push((format!("{prefix}.b.bn.beta"), &self.bn.beta));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.first.params_mut(&format!("{prefix}.a"), out);
        out.push((format!("{prefix}.b.conv.weight"), &mut self.conv.weight));
        out.push((format!("{prefix}.b.bn.gamma"), &mut self.bn.gamma));
        out.push((format!("{prefix}.b.bn.beta"), &mut self.bn.beta));
    }

    fn buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        self.first.buffers(&format!("{prefix}.a"), out);
        out.push((format!("{prefix}.b.bn.running_mean"), &self.bn.running_mean));
        out.push((format!("{prefix}.b.bn.running_var"), &self.bn.running_var));
    }

    fn buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        self.first.buffers_mut(&format!("{prefix}.a"), out);
        out.push((format!("{prefix}.b.bn.running_mean"), &mut self.bn.running_mean));
        out.push((format!("{prefix}.b.bn.running_var"), &mut self.bn.running_var));
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    config: NetworkConfig,
    pub stem: ConvBnRelu<T>,
    pub down: Vec<ConvBnRelu<T>>,
    pub res: Vec<ResidualBlock<T>>,
    /// Each applied after a nearest ×2 upsample.
    pub up: Vec<ConvBnRelu<T>>,
    pub head: Conv2d<T>,
}

impl<T: Scalar> Network<T> {
    /// Builds the topology with zero weights; see [`Network::init`].
    pub fn zeros(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let stem = ConvBnRelu::new(Conv2d::same(config.in_channels, b, 7, 1));
        let down = (0..config.n_down).map(|i| ConvBnRelu::new(Conv2d::same(b << i, b << (i + 1), 3, 2))).collect();
        let width = config.bottleneck_channels();
        let res = (0..config.n_res_blocks).map(|_| ResidualBlock::new(width)).collect();
        let up = (0..config.n_up)
            .map(|i| ConvBnRelu::new(Conv2d::same(width >> i, width >> (i + 1), 3, 1)))
            .collect();
        let head = Conv2d::new(b, config.n_classes, 1, 1, 0);
        Ok(Self { config: config.clone(), stem, down, res, up, head })
    }

    /// He-normal conv weights (`std = sqrt(2 / fan_in)`) from a seeded
    /// ChaCha stream in parameter order; biases 0, BN gamma 1 and beta 0.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in net.convs_mut() {
            let std = (2.0 / conv.fan_in() as f64).sqrt();
            for w in conv.weight.value.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = T::from_f64_lossy(std * z);
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut out = vec![&mut self.stem.conv];
        out.extend(self.down.iter_mut().map(|l| &mut l.conv));
        for r in self.res.iter_mut() {
            out.push(&mut r.first.conv);
            out.push(&mut r.conv);
        }
        out.extend(self.up.iter_mut().map(|l| &mut l.conv));
        out.push(&mut self.head);
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        let f = self.config.spatial_factor();
        let (h, w) = x.spatial();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("spatial dims {h}x{w} must be positive multiples of {f}")));
        }
        Ok(())
    }

    /// Eval-mode forward pass; does not touch any state.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.stem.infer(x)?;
        for l in &self.down {
            h = l.infer(&h)?;
        }
        for r in &self.res {
            h = r.infer(&h)?;
        }
        for l in &self.up {
            h = l.infer(&upsample_nearest2x(&h))?;
        }
        self.head.infer(&h)
    }

    /// Forward pass returning logits. In train mode caches activations for
    /// [`Network::backward`] and updates BN running statistics.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x, mode)?;
        for l in self.down.iter_mut() {
            h = l.forward(&h, mode)?;
        }
        for r in self.res.iter_mut() {
            h = r.forward(&h, mode)?;
        }
        for l in self.up.iter_mut() {
            h = l.forward(&upsample_nearest2x(&h), mode)?;
        }
        self.head.forward(&h, mode)
    }

    /// Accumulates parameter gradients from a gradient w.r.t. the logits and
    /// returns the gradient w.r.t. the input.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(grad_logits)?;
        for l in self.up.iter_mut().rev() {
            g = upsample_nearest2x_backward(&l.backward(&g)?)?;
        }
        for r in self.res.iter_mut().rev() {
            g = r.backward(&g)?;
        }
        for l in self.down.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        self.stem.backward(&g)
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Learnable parameters in canonical order.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.stem.params("stem", &mut out);
        for (i, l) in self.down.iter().enumerate() {
            l.params(&format!("down{i}"), &mut out);
        }
        for (i, r) in self.res.iter().enumerate() {
            r.params(&format!("res{i}"), &mut out);
        }
        for (i, l) in self.up.iter().enumerate() {
            l.params(&format!("up{i}"), &mut out);
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.stem.params_mut("stem", &mut out);
        for (i, l) in self.down.iter_mut().enumerate() {
            l.params_mut(&format!("down{i}"), &mut out);
        }
        for (i, r) in self.res.iter_mut().enumerate() {
            r.params_mut(&format!("res{i}"), &mut out);
        }
        for (i, l) in self.up.iter_mut().enumerate() {
            l.params_mut(&format!("up{i}"), &mut out);
        }
        out.push(("head.weight".into(), &mut self.head.weight));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// BN running statistics in canonical order.
    pub fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        self.stem.buffers("stem", &mut out);
        for (i, l) in self.down.iter().enumerate() {
            l.buffers(&format!("down{i}"), &mut out);
        }
        for (i, r) in self.res.iter().enumerate() {
            r.buffers(&format!("res{i}"), &mut out);
        }
        for (i, l) in self.up.iter().enumerate() {
            l.buffers(&format!("up{i}"), &mut out);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        self.stem.buffers_mut("stem", &mut out);
        for (i, l) in self.down.iter_mut().enumerate() {
            l.buffers_mut(&format!("down{i}"), &mut out);
        }
        for (i, r) in self.res.iter_mut().enumerate() {
            r.buffers_mut(&format!("res{i}"), &mut out);
        }
        for (i, l) in self.up.iter_mut().enumerate() {
            l.buffers_mut(&format!("up{i}"), &mut out);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}
