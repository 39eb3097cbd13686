//! Named architecture presets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};
use crate::graph::{BatchNorm, Conv, Layer, Linear, Network, SkipEdge};
use crate::tensor::Tensor;

pub const PRESETS: [&str; 4] = ["toy-cnn", "vgg16-cifar", "resnet18-cifar", "resnet56-cifar"];

pub const CIFAR_INPUT: [usize; 3] = [3, 32, 32];
pub const TOY_INPUT: [usize; 3] = [3, 8, 8];

/// VGG16 channel plan; `0` marks a 2x2 max pool.
pub const VGG16_PLAN: [usize; 17] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512,
];

/// The thirteen conv widths of [`VGG16_PLAN`].
pub const VGG16_WIDTHS: [usize; 13] = [64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512];

/// Build preset `name` for a given per-sample input shape.
pub fn preset(name: &str, input: [usize; 3], num_classes: usize, seed: u64) -> Result<Network> {
    let mut b = Builder::new(input, num_classes, seed);
    match name {
        "toy-cnn" => b.toy(),
        "vgg16-cifar" => b.vgg16(&VGG16_WIDTHS),
        "resnet18-cifar" => b.resnet(&[64, 128, 256, 512], 2),
        "resnet56-cifar" => b.resnet(&[16, 32, 64], 9),
        other => {
            return Err(arg_err(format!(
                "unknown architecture {other:?} (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(b.net)
}

pub fn default_input(name: &str) -> [usize; 3] {
    if name == "toy-cnn" {
        TOY_INPUT
    } else {
        CIFAR_INPUT
    }
}

/// Four 3x3 conv layers (16/32/32/64) with biases and no batch norm.
pub fn toy_cnn(num_classes: usize, seed: u64) -> Network {
    preset("toy-cnn", TOY_INPUT, num_classes, seed).unwrap()
}

/// Thirteen bias-free 3x3 convs with batch norm, four max pools, global
/// average pooling and one linear classifier.
pub fn vgg16_cifar(num_classes: usize, seed: u64) -> Network {
    preset("vgg16-cifar", CIFAR_INPUT, num_classes, seed).unwrap()
}

/// VGG16 layout at CIFAR input with custom conv widths.
pub fn vgg16_with_widths(widths: &[usize; 13], num_classes: usize, seed: u64) -> Network {
    let mut b = Builder::new(CIFAR_INPUT, num_classes, seed);
    b.vgg16(widths);
    b.net
}

pub fn resnet18_cifar(num_classes: usize, seed: u64) -> Network {
    preset("resnet18-cifar", CIFAR_INPUT, num_classes, seed).unwrap()
}

pub fn resnet56_cifar(num_classes: usize, seed: u64) -> Network {
    preset("resnet56-cifar", CIFAR_INPUT, num_classes, seed).unwrap()
}

/// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

struct Builder {
    net: Network,
    rng: ChaCha8Rng,
    channels: usize,
}

impl Builder {
    fn new(input: [usize; 3], num_classes: usize, seed: u64) -> Self {
        Self {
            net: Network::new(input, num_classes),
            rng: ChaCha8Rng::seed_from_u64(seed),
            channels: input[0],
        }
    }

    fn conv_layer(&mut self, c_in: usize, c_out: usize, k: usize, stride: usize, bias: bool) -> Layer {
        let weight = fan_in_uniform(&mut self.rng, &[c_out, c_in, k, k], c_in * k * k);
        Layer::Conv(Conv::new(weight, bias.then(|| vec![0.0; c_out]), stride, k / 2))
    }

    fn conv(&mut self, c_out: usize, k: usize, stride: usize, bias: bool) {
        let layer = self.conv_layer(self.channels, c_out, k, stride, bias);
        self.net.push(layer);
        self.channels = c_out;
    }

    fn bn(&mut self) {
        self.net.push(Layer::BatchNorm(BatchNorm::new(self.channels)));
    }

    fn classifier(&mut self) {
        self.net.push(Layer::GlobalAvgPool);
        let n = self.net.num_classes;
        let weight = fan_in_uniform(&mut self.rng, &[n, self.channels], self.channels);
        self.net.push(Layer::Linear(Linear {
            weight,
            bias: Some(vec![0.0; n]),
        }));
    }

    fn toy(&mut self) {
        for (i, c) in [16, 32, 32, 64].into_iter().enumerate() {
            self.conv(c, 3, 1, true);
            self.net.push(Layer::Relu);
            if i == 1 {
                self.net.push(Layer::MaxPool { window: 2, stride: 2 });
            }
        }
        self.classifier();
    }

    fn vgg16(&mut self, widths: &[usize; 13]) {
        let mut next = widths.iter();
        for c in VGG16_PLAN {
            if c == 0 {
                self.net.push(Layer::MaxPool { window: 2, stride: 2 });
            } else {
                self.conv(*next.next().unwrap(), 3, 1, false);
                self.bn();
                self.net.push(Layer::Relu);
            }
        }
        self.classifier();
    }

    /// CIFAR-style residual network of basic blocks; a stride-2 1x1
    /// projection with batch norm bridges each width change.
    fn resnet(&mut self, widths: &[usize], blocks: usize) {
        self.conv(widths[0], 3, 1, false);
        self.bn();
        self.net.push(Layer::Relu);
        for (s, &w) in widths.iter().enumerate() {
            for b in 0..blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let from = self.net.layers.len();
                let c_in = self.channels;
                self.conv(w, 3, stride, false);
                self.bn();
                self.net.push(Layer::Relu);
                self.conv(w, 3, 1, false);
                self.bn();
                let to = self.net.push(Layer::Relu);
                let projection = if stride != 1 || c_in != w {
                    let conv = self.conv_layer(c_in, w, 1, stride, false);
                    vec![conv, Layer::BatchNorm(BatchNorm::new(w))]
                } else {
                    Vec::new()
                };
                self.net.skips.push(SkipEdge { from, to, projection });
            }
        }
        self.classifier();
    }
}
