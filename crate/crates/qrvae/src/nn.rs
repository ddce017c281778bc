//! Neural-network layers assembled into [`Sequential`] stacks.
//!
//! Layers own their parameter tensors. A forward pass registers parameters
//! on the caller's [`Tape`] and pushes the resulting [`Var`]s onto `bound`
//! in the same order as [`Sequential::params`], which is how the trainer
//! pairs gradients with the tensors it updates.
//!
//! Convolutions use the cross-correlation convention (no kernel flip).
//! Weights are initialized uniformly in `±sqrt(6 / (fan_in + fan_out))`,
//! with fan counted as kernel-area times channels for conv layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};

/// Train/eval switch; batchnorm is the only layer that differs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// Fully connected layer, `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn new(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        Dense { w: glorot(vec![inp, out], inp, out, rng), b: Tensor::zeros(vec![out]) }
    }

    fn forward(&self, tape: &mut Tape, x: Var, bound: &mut Vec<Var>) -> Var {
        let w = tape.leaf(&self.w);
        let b = tape.leaf(&self.b);
        bound.push(w);
        bound.push(b);
        let xw = tape.matmul(x, w);
        let target = tape.shape(xw).to_vec();
        let bb = tape.broadcast(b, &target);
        tape.add(xw, bb)
    }
}

/// 2-D convolution, stride/padding shared across both spatial dims.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: Tensor, // [out_c, in_c, k, k]
    pub b: Tensor, // [out_c]
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let fan_out = out_c * k * k;
        Conv2d {
            w: glorot(vec![out_c, in_c, k, k], fan_in, fan_out, rng),
            b: Tensor::zeros(vec![out_c]),
            stride,
            pad,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, bound: &mut Vec<Var>) -> Var {
        let w = tape.leaf(&self.w);
        let b = tape.leaf(&self.b);
        bound.push(w);
        bound.push(b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// 2-D transposed convolution (adjoint of [`Conv2d`]).
#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub w: Tensor, // [in_c, out_c, k, k]
    pub b: Tensor, // [out_c]
    pub stride: usize,
    pub pad: usize,
}

impl Deconv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let fan_out = out_c * k * k;
        Deconv2d {
            w: glorot(vec![in_c, out_c, k, k], fan_in, fan_out, rng),
            b: Tensor::zeros(vec![out_c]),
            stride,
            pad,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, bound: &mut Vec<Var>) -> Var {
        let w = tape.leaf(&self.w);
        let b = tape.leaf(&self.b);
        bound.push(w);
        bound.push(b);
        tape.deconv2d(x, w, b, self.stride, self.pad)
    }
}

/// Per-channel batch normalization over `[B,C,H,W]`.
///
/// Train mode normalizes by batch statistics (eps 1e-5 by default) and
/// updates running statistics as `running = momentum * running +
/// (1 - momentum) * batch`; eval mode normalizes by the running statistics.
/// Running variance stores the biased batch variance, so eval output reaches
/// a fixed point of train output on a repeated batch.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
            eps: 1e-5,
            momentum: 0.9,
        }
    }

    fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode, bound: &mut Vec<Var>) -> Var {
        let gamma = tape.leaf(&self.gamma);
        let beta = tape.leaf(&self.beta);
        bound.push(gamma);
        bound.push(beta);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, self.eps);
                let m = self.momentum;
                for (r, b) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = m * *r + (1.0 - m) * b;
                }
                for (r, b) in self.running_var.data_mut().iter_mut().zip(&var) {
                    *r = m * *r + (1.0 - m) * b;
                }
                y
            }
            Mode::Eval => {
                // y = gamma * (x - rm) / sqrt(rv + eps) + beta, per channel.
                let c = self.gamma.numel();
                let inv: Vec<f64> = self
                    .running_var
                    .data()
                    .iter()
                    .map(|&v| 1.0 / (v + self.eps).sqrt())
                    .collect();
                let shape = tape.shape(x).to_vec();
                let scale = tape.leaf(&Tensor::new(vec![c, 1, 1], inv));
                let shift =
                    tape.leaf(&Tensor::new(vec![c, 1, 1], self.running_mean.data().to_vec()));
                let gamma_c = tape.reshape(gamma, vec![c, 1, 1]);
                let beta_c = tape.reshape(beta, vec![c, 1, 1]);
                let shift_b = tape.broadcast(shift, &shape);
                let centered = tape.sub(x, shift_b);
                let scale_b = tape.broadcast(scale, &shape);
                let normed = tape.mul(centered, scale_b);
                let gamma_b = tape.broadcast(gamma_c, &shape);
                let scaled = tape.mul(normed, gamma_b);
                let beta_b = tape.broadcast(beta_c, &shape);
                tape.add(scaled, beta_b)
            }
        }
    }
}

/// A single layer of a [`Sequential`] stack.
#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Deconv2d(Deconv2d),
    BatchNorm(BatchNorm2d),
    Relu,
    Sigmoid,
    /// `[B, d...] -> [B, prod(d)]`
    Flatten,
    /// `[B, n] -> [B, dims...]` with `prod(dims) == n`
    Unflatten(Vec<usize>),
}

/// Shape-level description of a layer, stored in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Dense { inp: usize, out: usize },
    Conv2d { in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize },
    Deconv2d { in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize },
    BatchNorm { channels: usize },
    Relu,
    Sigmoid,
    Flatten,
    Unflatten { dims: Vec<usize> },
}

impl Layer {
    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode, bound: &mut Vec<Var>) -> Var {
        match self {
            Layer::Dense(l) => l.forward(tape, x, bound),
            Layer::Conv2d(l) => l.forward(tape, x, bound),
            Layer::Deconv2d(l) => l.forward(tape, x, bound),
            Layer::BatchNorm(l) => l.forward(tape, x, mode, bound),
            Layer::Relu => tape.relu(x),
            Layer::Sigmoid => tape.sigmoid(x),
            Layer::Flatten => {
                let shape = tape.shape(x).to_vec();
                let batch = shape[0];
                let rest: usize = shape[1..].iter().product();
                tape.reshape(x, vec![batch, rest])
            }
            Layer::Unflatten(dims) => {
                let batch = tape.shape(x)[0];
                let mut shape = vec![batch];
                shape.extend_from_slice(dims);
                tape.reshape(x, shape)
            }
        }
    }

    /// Trainable parameters, in forward binding order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(l) => vec![&l.w, &l.b],
            Layer::Conv2d(l) => vec![&l.w, &l.b],
            Layer::Deconv2d(l) => vec![&l.w, &l.b],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(l) => vec![&mut l.w, &mut l.b],
            Layer::Conv2d(l) => vec![&mut l.w, &mut l.b],
            Layer::Deconv2d(l) => vec![&mut l.w, &mut l.b],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            _ => vec![],
        }
    }

    /// All persistent state: parameters plus batchnorm running statistics.
    pub fn state(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Dense(l) => vec![("w", &l.w), ("b", &l.b)],
            Layer::Conv2d(l) => vec![("w", &l.w), ("b", &l.b)],
            Layer::Deconv2d(l) => vec![("w", &l.w), ("b", &l.b)],
            Layer::BatchNorm(l) => vec![
                ("gamma", &l.gamma),
                ("beta", &l.beta),
                ("running_mean", &l.running_mean),
                ("running_var", &l.running_var),
            ],
            _ => vec![],
        }
    }

    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Dense(l) => vec![("w", &mut l.w), ("b", &mut l.b)],
            Layer::Conv2d(l) => vec![("w", &mut l.w), ("b", &mut l.b)],
            Layer::Deconv2d(l) => vec![("w", &mut l.w), ("b", &mut l.b)],
            Layer::BatchNorm(l) => vec![
                ("gamma", &mut l.gamma),
                ("beta", &mut l.beta),
                ("running_mean", &mut l.running_mean),
                ("running_var", &mut l.running_var),
            ],
            _ => vec![],
        }
    }

    pub fn desc(&self) -> LayerDesc {
        match self {
            Layer::Dense(l) => LayerDesc::Dense { inp: l.w.shape()[0], out: l.w.shape()[1] },
            Layer::Conv2d(l) => LayerDesc::Conv2d {
                in_c: l.w.shape()[1],
                out_c: l.w.shape()[0],
                k: l.w.shape()[2],
                stride: l.stride,
                pad: l.pad,
            },
            Layer::Deconv2d(l) => LayerDesc::Deconv2d {
                in_c: l.w.shape()[0],
                out_c: l.w.shape()[1],
                k: l.w.shape()[2],
                stride: l.stride,
                pad: l.pad,
            },
            Layer::BatchNorm(l) => LayerDesc::BatchNorm { channels: l.gamma.numel() },
            Layer::Relu => LayerDesc::Relu,
            Layer::Sigmoid => LayerDesc::Sigmoid,
            Layer::Flatten => LayerDesc::Flatten,
            Layer::Unflatten(dims) => LayerDesc::Unflatten { dims: dims.clone() },
        }
    }

    /// Build a layer from its description with zeroed/default parameters
    /// (used when loading checkpoints; state is filled in afterwards).
    pub fn from_desc(desc: &LayerDesc) -> Layer {
        match desc {
            LayerDesc::Dense { inp, out } => Layer::Dense(Dense {
                w: Tensor::zeros(vec![*inp, *out]),
                b: Tensor::zeros(vec![*out]),
            }),
            LayerDesc::Conv2d { in_c, out_c, k, stride, pad } => Layer::Conv2d(Conv2d {
                w: Tensor::zeros(vec![*out_c, *in_c, *k, *k]),
                b: Tensor::zeros(vec![*out_c]),
                stride: *stride,
                pad: *pad,
            }),
            LayerDesc::Deconv2d { in_c, out_c, k, stride, pad } => Layer::Deconv2d(Deconv2d {
                w: Tensor::zeros(vec![*in_c, *out_c, *k, *k]),
                b: Tensor::zeros(vec![*out_c]),
                stride: *stride,
                pad: *pad,
            }),
            LayerDesc::BatchNorm { channels } => Layer::BatchNorm(BatchNorm2d::new(*channels)),
            LayerDesc::Relu => Layer::Relu,
            LayerDesc::Sigmoid => Layer::Sigmoid,
            LayerDesc::Flatten => Layer::Flatten,
            LayerDesc::Unflatten { dims } => Layer::Unflatten(dims.clone()),
        }
    }
}

/// Ordered stack of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode, bound: &mut Vec<Var>) -> Var {
        let mut h = x;
        for layer in &mut self.layers {
            h = layer.forward(tape, h, mode, bound);
        }
        h
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn descs(&self) -> Vec<LayerDesc> {
        self.layers.iter().map(|l| l.desc()).collect()
    }

    pub fn from_descs(descs: &[LayerDesc]) -> Self {
        Sequential { layers: descs.iter().map(Layer::from_desc).collect() }
    }
}
