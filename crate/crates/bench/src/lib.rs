//! Seeded inputs shared by the criterion benches.

use bknet_core::graph::{DecomposedConv, Linear};
use bknet_core::{Layer, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `c x c` decomposed 3x3 conv on `size x size` inputs with `d` basis
/// kernels and roughly `density` of the coefficients non-zero, followed by
/// a pooled linear head.
pub fn sparse_layer(c: usize, size: usize, d: usize, density: f64, seed: u64) -> Network {
    let mut r = rng(seed);
    let basis = uniform(&mut r, &[d, 9]);
    let coeffs = Tensor::from_fn(&[c, c, d], |_| {
        if r.gen_bool(density) {
            r.gen_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    let mut net = Network::new([c, size, size], 10);
    net.push(Layer::DecomposedConv(DecomposedConv {
        basis,
        coeffs,
        bias: None,
        kernel: 3,
        stride: 1,
        padding: 1,
        mask: None,
        mean_row: false,
    }));
    net.push(Layer::GlobalAvgPool);
    net.push(Layer::Linear(Linear {
        weight: uniform(&mut r, &[10, c]),
        bias: None,
    }));
    net
}
