use super::{validate, BatchNorm, Layer, Network};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{conv2d, gemm, Tensor, Transpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses running statistics.
    Eval,
    /// Batch norm normalises with batch statistics and updates running ones.
    Train,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Tensor,
    /// Raw layer outputs; index 0 is the input, `i + 1` the output of layer `i`.
    pub activations: Vec<Tensor>,
}

/// Per-layer state kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum LayerCache {
    None,
    /// Dense weight rebuilt from basis and coefficients.
    Decomposed { weight: Tensor },
    /// Flat input index of the maximum for each output element.
    MaxPool { argmax: Vec<usize> },
    BatchNorm {
        xhat: Tensor,
        inv_std: Vec<f32>,
        /// Batch mean and biased variance; `None` in eval mode.
        stats: Option<(Vec<f32>, Vec<f32>)>,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct Trace {
    pub acts: Vec<Tensor>,
    /// Layer input after the residual sum, for layers that receive a skip.
    pub summed: Vec<Option<Tensor>>,
    pub caches: Vec<LayerCache>,
    /// Per skip edge: projection activations (`projection.len() + 1`).
    pub skip_acts: Vec<Vec<Tensor>>,
    pub skip_caches: Vec<Vec<LayerCache>>,
}

impl Trace {
    pub fn input_of(&self, i: usize) -> &Tensor {
        self.summed[i].as_ref().unwrap_or(&self.acts[i])
    }

    pub fn logits(&self) -> &Tensor {
        self.acts.last().unwrap()
    }

    /// Write batch-norm running statistics gathered in train mode.
    pub fn update_running_stats(&self, net: &mut Network) {
        let n = self.acts[0].dim(0);
        for (layer, cache) in net.layers.iter_mut().zip(&self.caches) {
            update_bn(layer, cache, n, self.input_spatial(cache));
        }
        for (edge, caches) in net.skips.iter_mut().zip(&self.skip_caches) {
            for (layer, cache) in edge.projection.iter_mut().zip(caches) {
                update_bn(layer, cache, n, self.input_spatial(cache));
            }
        }
    }

    fn input_spatial(&self, cache: &LayerCache) -> usize {
        match cache {
            LayerCache::BatchNorm { xhat, .. } => xhat.len() / (xhat.dim(0) * xhat.dim(1)),
            _ => 1,
        }
    }
}

fn update_bn(layer: &mut Layer, cache: &LayerCache, n: usize, spatial: usize) {
    if let (Layer::BatchNorm(bn), LayerCache::BatchNorm { stats: Some((mean, var)), .. }) =
        (layer, cache)
    {
        let count = (n * spatial) as f32;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let m = bn.momentum;
        for c in 0..bn.channels() {
            bn.running_mean[c] = (1.0 - m) * bn.running_mean[c] + m * mean[c];
            bn.running_var[c] = (1.0 - m) * bn.running_var[c] + m * var[c] * unbias;
        }
    }
}

/// Inference-mode logits for an `(n, c, h, w)` batch.
pub fn forward(net: &Network, input: &Tensor) -> Result<Tensor> {
    let trace = run(net, input, Mode::Eval)?;
    Ok(trace.acts.into_iter().last().unwrap())
}

/// Forward pass keeping every activation. In [`Mode::Train`] batch-norm
/// running statistics in `net` are updated.
pub fn forward_mode(net: &mut Network, input: &Tensor, mode: Mode) -> Result<ForwardPass> {
    let trace = run(net, input, mode)?;
    if mode == Mode::Train {
        trace.update_running_stats(net);
    }
    let activations = trace.acts;
    let logits = activations.last().unwrap().clone();
    Ok(ForwardPass {
        logits,
        activations,
    })
}

pub(crate) fn run(net: &Network, input: &Tensor, mode: Mode) -> Result<Trace> {
    let diags = validate(net);
    if !diags.is_empty() {
        return Err(Error::Invalid(diags));
    }
    let [c, h, w] = net.input_shape;
    if input.rank() != 4 || input.shape()[1..] != [c, h, w] {
        return Err(shape_err(format!(
            "input batch {:?} does not match network input {c}x{h}x{w}",
            input.shape()
        )));
    }

    let n_layers = net.layers.len();
    let mut trace = Trace {
        acts: Vec::with_capacity(n_layers + 1),
        summed: vec![None; n_layers],
        caches: Vec::with_capacity(n_layers),
        skip_acts: vec![Vec::new(); net.skips.len()],
        skip_caches: vec![Vec::new(); net.skips.len()],
    };
    trace.acts.push(input.clone());
    for (i, layer) in net.layers.iter().enumerate() {
        if let Some(e) = net.skip_into(i) {
            let edge = &net.skips[e];
            let mut cur = trace.acts[edge.from].clone();
            let mut acts = Vec::with_capacity(edge.projection.len() + 1);
            let mut caches = Vec::with_capacity(edge.projection.len());
            for l in &edge.projection {
                let (out, cache) = layer_forward(l, &cur, mode)?;
                acts.push(cur);
                caches.push(cache);
                cur = out;
            }
            let sum = trace.acts[i].add(&cur)?;
            acts.push(cur);
            trace.skip_acts[e] = acts;
            trace.skip_caches[e] = caches;
            trace.summed[i] = Some(sum);
        }
        let (out, cache) = layer_forward(layer, trace.input_of(i), mode)?;
        trace.caches.push(cache);
        trace.acts.push(out);
    }
    Ok(trace)
}

pub(crate) fn layer_forward(layer: &Layer, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
    match layer {
        Layer::Conv(c) => Ok((
            conv2d(x, &c.weight, c.bias.as_deref(), c.stride, c.padding)?,
            LayerCache::None,
        )),
        Layer::DecomposedConv(d) => {
            let weight = d.reconstruct();
            let out = conv2d(x, &weight, d.bias.as_deref(), d.stride, d.padding)?;
            Ok((out, LayerCache::Decomposed { weight }))
        }
        Layer::Linear(l) => {
            let (n, f) = (x.dim(0), x.len() / x.dim(0).max(1));
            let o = l.out_features();
            let mut out = vec![0.0; n * o];
            gemm(
                Transpose::No,
                Transpose::Yes,
                n,
                o,
                f,
                x.data(),
                l.weight.data(),
                &mut out,
                false,
            );
            if let Some(b) = &l.bias {
                for row in out.chunks_exact_mut(o) {
                    row.iter_mut().zip(b).for_each(|(v, &bi)| *v += bi);
                }
            }
            Ok((Tensor::new(&[n, o], out)?, LayerCache::None))
        }
        Layer::Relu => Ok((x.map(|v| v.max(0.0)), LayerCache::None)),
        Layer::MaxPool { window, stride } => {
            let (out, argmax) = max_pool(x, *window, *stride)?;
            Ok((out, LayerCache::MaxPool { argmax }))
        }
        Layer::AvgPool { window, stride } => Ok((avg_pool(x, *window, *stride)?, LayerCache::None)),
        Layer::GlobalAvgPool => {
            let (n, c) = (x.dim(0), x.dim(1));
            let plane = x.len() / (n * c).max(1);
            let out = x
                .data()
                .chunks_exact(plane)
                .map(|p| p.iter().sum::<f32>() / plane as f32)
                .collect();
            Ok((Tensor::new(&[n, c], out)?, LayerCache::None))
        }
        Layer::BatchNorm(bn) => batch_norm(bn, x, mode),
    }
}

fn pool_geometry(x: &Tensor, window: usize, stride: usize) -> Result<(usize, usize)> {
    if x.rank() != 4 {
        return Err(shape_err("pooling needs an NCHW input"));
    }
    let oh = crate::tensor::conv_output_extent(x.dim(2), window, stride, 0)?;
    let ow = crate::tensor::conv_output_extent(x.dim(3), window, stride, 0)?;
    Ok((oh, ow))
}

fn max_pool(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (oh, ow) = pool_geometry(x, window, stride)?;
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    let data = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, argmax))
}

fn avg_pool(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (oh, ow) = pool_geometry(x, window, stride)?;
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let area = (window * window) as f32;
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..window {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    acc += data[row..row + window].iter().sum::<f32>();
                }
                out.push(acc / area);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

fn batch_norm(bn: &BatchNorm, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
    let n = x.dim(0);
    let c = bn.channels();
    if x.dim(1) != c {
        return Err(shape_err(format!(
            "batch norm over {c} channels fed {} channels",
            x.dim(1)
        )));
    }
    let plane = x.len() / (n * c).max(1);
    let data = x.data();
    let (mean, var, stats) = match mode {
        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), false),
        Mode::Train => {
            let count = (n * plane) as f64;
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for s_idx in 0..n {
                    let off = (s_idx * c + ch) * plane;
                    s += data[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
                }
                let mu = s / count;
                let mut q = 0.0f64;
                for s_idx in 0..n {
                    let off = (s_idx * c + ch) * plane;
                    q += data[off..off + plane]
                        .iter()
                        .map(|&v| (v as f64 - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = mu as f32;
                var[ch] = (q / count) as f32;
            }
            (mean, var, true)
        }
    };
    let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = vec![0.0f32; x.len()];
    let mut out = vec![0.0f32; x.len()];
    for (p, (xs, (hs, os))) in data
        .chunks_exact(plane)
        .zip(xhat.chunks_exact_mut(plane).zip(out.chunks_exact_mut(plane)))
        .enumerate()
    {
        let ch = p % c;
        for ((&v, h), o) in xs.iter().zip(hs.iter_mut()).zip(os.iter_mut()) {
            *h = (v - mean[ch]) * inv_std[ch];
            *o = bn.scale[ch] * *h + bn.shift[ch];
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(&shape, out)?,
        LayerCache::BatchNorm {
            xhat: Tensor::new(&shape, xhat)?,
            inv_std,
            stats: stats.then_some((mean, var)),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Conv, Linear, SkipEdge};

    fn tiny_residual() -> Network {
        let mut net = Network::new([2, 4, 4], 2);
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.set(&[0, 0, 0, 0], 2.0);
        w.set(&[1, 1, 0, 0], -1.0);
        net.push(Layer::Conv(Conv::new(w, None, 1, 0)));
        net.push(Layer::Relu);
        net.push(Layer::GlobalAvgPool);
        net.push(Layer::Linear(Linear {
            weight: Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Some(vec![0.5, -0.5]),
        }));
        net.skips.push(SkipEdge::identity(0, 1));
        net
    }

    #[test]
    fn residual_sum_precedes_relu() {
        let net = tiny_residual();
        let x = Tensor::full(&[1, 2, 4, 4], 1.0);
        // channel 0: relu(2 + 1) = 3, channel 1: relu(-1 + 1) = 0
        let logits = forward(&net, &x).unwrap();
        assert_eq!(logits.data(), &[3.5, -0.5]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let net = tiny_residual();
        assert!(forward(&net, &Tensor::zeros(&[1, 3, 4, 4])).is_err());
    }

    #[test]
    fn max_pool_picks_first_maximum() {
        let x = Tensor::new(&[1, 1, 2, 4], vec![1., 5., 2., 2., 5., 0., 2., 1.]).unwrap();
        let (y, arg) = max_pool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
        assert_eq!(avg_pool(&x, 2, 2).unwrap().data(), &[2.75, 1.75]);
    }

    #[test]
    fn batch_norm_train_normalises_and_updates_running_stats() {
        let mut net = Network::new([1, 1, 2], 1);
        net.push(Layer::BatchNorm(BatchNorm::new(1)));
        net.push(Layer::GlobalAvgPool);
        let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let pass = forward_mode(&mut net, &x, Mode::Train).unwrap();
        let y = pass.activations[1].data();
        let mean = y.iter().sum::<f32>() / 4.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
        let Layer::BatchNorm(bn) = &net.layers[0] else { unreachable!() };
        // mean 3, biased var 3.5, unbiased 14/3
        assert!((bn.running_mean[0] - 0.3).abs() < 1e-6);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-6);
    }
}
