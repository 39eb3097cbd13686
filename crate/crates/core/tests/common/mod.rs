#![allow(dead_code)]

use bknet_core::graph::{BatchNorm, DecomposedConv, Linear, SkipEdge};
use bknet_core::tensor::Element;
use bknet_core::{Layer, Network, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod oracle;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

/// `||a - b|| / max(||b||, tiny)` in f64.
pub fn rel<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    let den: f64 = b.data().iter().map(|&y| y.as_f64().powi(2)).sum();
    num.sqrt() / den.sqrt().max(1e-30)
}

/// Decomposed conv with random basis and coefficients, each coefficient
/// kept with probability `density`.
pub fn sparse_decomposed(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
    d: usize,
    density: f64,
) -> DecomposedConv {
    let basis = randn(rng, &[d, k * k]);
    let coeffs = Tensor::from_fn(&[c_out, c_in, d], |_| {
        if rng.gen_bool(density) {
            rng.gen_range(-1.0f32..1.0)
        } else {
            0.0
        }
    });
    DecomposedConv {
        basis,
        coeffs,
        bias: None,
        kernel: k,
        stride: 1,
        padding: k / 2,
        mask: None,
        mean_row: false,
    }
}

/// Random sparse network description, kept alongside the network so an
/// oracle can work from it without the crate's own bundle analysis.
#[derive(Clone, Debug)]
pub struct SparseNet {
    pub net: Network,
    /// Main-chain index of conv `i`.
    pub conv_at: Vec<usize>,
    /// Channel bundle read and written by conv `i`, after merging identity
    /// skips. Bundle `0` is the input.
    pub conv_in: Vec<usize>,
    pub conv_out: Vec<usize>,
    /// Projection convs `(edge, in_bundle, out_bundle)`.
    pub proj: Vec<(usize, usize, usize)>,
    pub widths: Vec<usize>,
    /// Bundle read by the final linear layer.
    pub last: usize,
}

/// Chain of decomposed convs (each followed by ReLU, sometimes batch norm
/// or max pooling), then global pooling and a linear head. Skips span whole
/// conv blocks, identity when widths allow and a 1x1 projection otherwise.
/// Biases, batch-norm shifts and running means are zero.
pub fn random_sparse_net(rng: &mut ChaCha8Rng) -> SparseNet {
    let n_conv = rng.gen_range(2..=6);
    let mut widths: Vec<usize> = (0..=n_conv).map(|_| rng.gen_range(1..=5)).collect();
    let c0 = widths[0];
    // skips (a, b): from the input of conv a to the input of the ReLU after conv b
    let mut spans = Vec::new();
    let mut a = 0;
    while a < n_conv {
        if rng.gen_bool(0.5) {
            let b = rng.gen_range(a..n_conv);
            if a > 0 && b + 1 < n_conv && rng.gen_bool(0.5) {
                widths[b + 1] = widths[a];
            }
            spans.push((a, b));
            a = b + 1;
        } else {
            a += 1;
        }
    }
    let size = 6;
    let mut net = Network::new([c0, size, size], 3);
    let mut conv_at = Vec::new();
    let mut relu_at = Vec::new();
    let mut pool_used = false;
    for i in 0..n_conv {
        let k = if rng.gen_bool(0.8) { 3 } else { 1 };
        let d = if k == 1 { 1 } else { rng.gen_range(1..=3) };
        let density = rng.gen_range(0.2..0.8);
        conv_at.push(net.push(Layer::DecomposedConv(sparse_decomposed(
            rng,
            widths[i + 1],
            widths[i],
            k,
            d,
            density,
        ))));
        let in_block = spans.iter().any(|&(a, b)| i >= a && i < b);
        if rng.gen_bool(0.3) {
            let mut bn = BatchNorm::new(widths[i + 1]);
            bn.scale = (0..widths[i + 1]).map(|_| rng.gen_range(0.5..1.5)).collect();
            bn.running_var = (0..widths[i + 1]).map(|_| rng.gen_range(0.5..2.0)).collect();
            net.push(Layer::BatchNorm(bn));
        }
        relu_at.push(net.push(Layer::Relu));
        if !pool_used && !in_block && rng.gen_bool(0.2) {
            net.push(Layer::MaxPool { window: 2, stride: 2 });
            pool_used = true;
        }
    }
    net.push(Layer::GlobalAvgPool);
    let lin = randn(rng, &[3, widths[n_conv]]);
    net.push(Layer::Linear(Linear {
        weight: lin,
        bias: None,
    }));

    // bundles: merge identity spans with a tiny union-find over conv inputs
    let mut parent: Vec<usize> = (0..=n_conv).collect();
    fn root(p: &mut [usize], x: usize) -> usize {
        if p[x] == x {
            x
        } else {
            let r = root(p, p[x]);
            p[x] = r;
            r
        }
    }
    let mut proj = Vec::new();
    for (edge, &(a, b)) in spans.iter().enumerate() {
        let from = conv_at[a];
        let to = relu_at[b];
        if widths[a] == widths[b + 1] && rng.gen_bool(0.7) {
            net.skips.push(SkipEdge::identity(from, to));
            let (ra, rb) = (root(&mut parent, a), root(&mut parent, b + 1));
            parent[ra.max(rb)] = ra.min(rb);
        } else {
            let p = sparse_decomposed(rng, widths[b + 1], widths[a], 1, 1, 0.6);
            net.skips.push(SkipEdge {
                from,
                to,
                projection: vec![Layer::DecomposedConv(p)],
            });
            proj.push((edge, a, b + 1));
        }
    }
    let bundle = |p: &mut Vec<usize>, x: usize| root(p, x);
    let conv_in = (0..n_conv).map(|i| bundle(&mut parent, i)).collect();
    let conv_out = (0..n_conv).map(|i| bundle(&mut parent, i + 1)).collect();
    let proj = proj
        .into_iter()
        .map(|(e, a, b)| (e, bundle(&mut parent, a), bundle(&mut parent, b)))
        .collect();
    let last = bundle(&mut parent, n_conv);
    SparseNet {
        net,
        conv_at,
        conv_in,
        conv_out,
        proj,
        widths,
        last,
    }
}
