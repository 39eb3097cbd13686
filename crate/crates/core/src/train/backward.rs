//! Hand-derived backward passes.

use serde::{Deserialize, Serialize};

use crate::decompose::kernel_matrix;
use crate::error::{shape_err, Result};
use crate::graph::{BatchNorm, Layer, LayerCache, Network, Trace};
use crate::tensor::{conv2d_grads, gemm, Element, Tensor, Transpose};

/// Parameter group that moves in a training phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Basis,
    Coefficients,
    /// Both groups together (dense training and fine-tuning).
    Joint,
}

impl Group {
    pub fn trains_basis(self) -> bool {
        self != Group::Coefficients
    }

    pub fn trains_coeffs(self) -> bool {
        self != Group::Basis
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Basis => "basis",
            Group::Coefficients => "coefficients",
            Group::Joint => "joint",
        }
    }

    pub fn other(self) -> Group {
        match self {
            Group::Basis => Group::Coefficients,
            Group::Coefficients => Group::Basis,
            Group::Joint => Group::Joint,
        }
    }
}

fn sign<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Gradients of basis and coefficients given the gradient of the
/// reconstructed weight.
///
/// `grad_basis[m] = sum_{i,j} A[i,j,m] * G[i,j]` and
/// `grad_coeffs[i,j,m] = <G[i,j], basis[m]> + gamma * sign(A[i,j,m])`.
/// The frozen group comes back as zeros, as do masked coefficients and the
/// fixed mean row.
#[allow(clippy::too_many_arguments)]
pub fn basis_coeff_grads<T: Element>(
    basis: &Tensor<T>,
    coeffs: &Tensor<T>,
    mask: Option<&[bool]>,
    mean_row: bool,
    grad_weight: &Tensor<T>,
    gamma: T,
    group: Group,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (d, k2) = (basis.dim(0), basis.dim(1));
    let (c_out, c_in) = (coeffs.dim(0), coeffs.dim(1));
    if coeffs.dim(2) != d || grad_weight.shape() != [c_out, c_in, k2.isqrt(), k2.isqrt()] {
        return Err(shape_err(format!(
            "gradient {:?} does not match basis {:?} / coefficients {:?}",
            grad_weight.shape(),
            basis.shape(),
            coeffs.shape()
        )));
    }
    let g = kernel_matrix(grad_weight)?;
    let rows = c_out * c_in;
    let learned = d - usize::from(mean_row);

    let mut grad_b = vec![T::zero(); d * k2];
    if group.trains_basis() {
        gemm(
            Transpose::Yes,
            Transpose::No,
            d,
            k2,
            rows,
            coeffs.data(),
            g.data(),
            &mut grad_b,
            false,
        );
        grad_b[learned * k2..].iter_mut().for_each(|v| *v = T::zero());
    }

    let mut grad_a = vec![T::zero(); rows * d];
    if group.trains_coeffs() {
        gemm(
            Transpose::No,
            Transpose::Yes,
            rows,
            d,
            k2,
            g.data(),
            basis.data(),
            &mut grad_a,
            false,
        );
        for (idx, (ga, &a)) in grad_a.iter_mut().zip(coeffs.data()).enumerate() {
            if idx % d >= learned || mask.is_some_and(|m| !m[idx]) {
                *ga = T::zero();
            } else {
                *ga += gamma * sign(a);
            }
        }
    }
    Ok((
        Tensor::new(&[d, k2], grad_b)?,
        Tensor::new(&[c_out, c_in, d], grad_a)?,
    ))
}

/// Parameter gradients of one layer.
#[derive(Clone, Debug)]
pub enum ParamGrads {
    None,
    /// Weight gradient for a dense conv, or for the reconstructed weight of a
    /// decomposed conv.
    Conv {
        weight: Tensor,
        bias: Vec<f32>,
    },
    Linear {
        weight: Tensor,
        bias: Vec<f32>,
    },
    BatchNorm {
        scale: Vec<f32>,
        shift: Vec<f32>,
    },
}

#[derive(Clone, Debug)]
pub struct NetGrads {
    pub main: Vec<ParamGrads>,
    pub skips: Vec<Vec<ParamGrads>>,
}

/// Backpropagate `grad_logits` through a recorded forward pass.
pub(crate) fn backward(net: &Network, trace: &Trace, grad_logits: Tensor) -> Result<NetGrads> {
    let n_layers = net.layers.len();
    let mut grad_acts: Vec<Option<Tensor>> = vec![None; n_layers + 1];
    grad_acts[n_layers] = Some(grad_logits);
    let mut main = vec![ParamGrads::None; n_layers];
    let mut skips = vec![Vec::new(); net.skips.len()];

    for i in (0..n_layers).rev() {
        let Some(g_out) = grad_acts[i + 1].take() else {
            continue;
        };
        let need_input = i > 0 || net.skip_into(i).is_some();
        let (g_in, pg) = layer_backward(
            &net.layers[i],
            &trace.caches[i],
            trace.input_of(i),
            &trace.acts[i + 1],
            g_out,
            need_input,
        )?;
        main[i] = pg;
        let Some(g_in) = g_in else { continue };

        if let Some(e) = net.skip_into(i) {
            let edge = &net.skips[e];
            let mut g = g_in.clone();
            let mut pgs = vec![ParamGrads::None; edge.projection.len()];
            for pos in (0..edge.projection.len()).rev() {
                let (gi, pg) = layer_backward(
                    &edge.projection[pos],
                    &trace.skip_caches[e][pos],
                    &trace.skip_acts[e][pos],
                    &trace.skip_acts[e][pos + 1],
                    g,
                    true,
                )?;
                pgs[pos] = pg;
                g = gi.expect("input gradient requested");
            }
            skips[e] = pgs;
            accumulate(&mut grad_acts[edge.from], g)?;
        }
        accumulate(&mut grad_acts[i], g_in)?;
    }
    Ok(NetGrads { main, skips })
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradient with respect to the layer input (if requested) and parameters.
fn layer_backward(
    layer: &Layer,
    cache: &LayerCache,
    input: &Tensor,
    output: &Tensor,
    g_out: Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, ParamGrads)> {
    match (layer, cache) {
        (Layer::Conv(c), _) => {
            let g = conv2d_grads(input, &c.weight, &g_out, c.stride, c.padding)?;
            Ok((
                need_input.then_some(g.input),
                ParamGrads::Conv {
                    weight: g.weight,
                    bias: g.bias,
                },
            ))
        }
        (Layer::DecomposedConv(d), LayerCache::Decomposed { weight }) => {
            let g = conv2d_grads(input, weight, &g_out, d.stride, d.padding)?;
            Ok((
                need_input.then_some(g.input),
                ParamGrads::Conv {
                    weight: g.weight,
                    bias: g.bias,
                },
            ))
        }
        (Layer::Linear(l), _) => {
            let n = input.dim(0);
            let f = l.in_features();
            let o = l.out_features();
            let mut gw = vec![0.0; o * f];
            gemm(
                Transpose::Yes,
                Transpose::No,
                o,
                f,
                n,
                g_out.data(),
                input.data(),
                &mut gw,
                false,
            );
            let mut gb = vec![0.0; o];
            for row in g_out.data().chunks_exact(o) {
                gb.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
            }
            let gi = if need_input {
                let mut gi = vec![0.0; n * f];
                gemm(
                    Transpose::No,
                    Transpose::No,
                    n,
                    f,
                    o,
                    g_out.data(),
                    l.weight.data(),
                    &mut gi,
                    false,
                );
                Some(Tensor::new(input.shape(), gi)?)
            } else {
                None
            };
            Ok((
                gi,
                ParamGrads::Linear {
                    weight: Tensor::new(&[o, f], gw)?,
                    bias: gb,
                },
            ))
        }
        (Layer::Relu, _) => {
            let gi = g_out.zip_with(output, |g, y| if y > 0.0 { g } else { 0.0 })?;
            Ok((Some(gi), ParamGrads::None))
        }
        (Layer::MaxPool { .. }, LayerCache::MaxPool { argmax }) => {
            let mut gi = vec![0.0; input.len()];
            for (&src, &g) in argmax.iter().zip(g_out.data()) {
                gi[src] += g;
            }
            Ok((Some(Tensor::new(input.shape(), gi)?), ParamGrads::None))
        }
        (Layer::AvgPool { window, stride }, _) => {
            let (h, w) = (input.dim(2), input.dim(3));
            let (oh, ow) = (g_out.dim(2), g_out.dim(3));
            let area = (window * window) as f32;
            let mut gi = vec![0.0; input.len()];
            for (p, go) in g_out.data().chunks_exact(oh * ow).enumerate() {
                let base = p * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = go[oy * ow + ox] / area;
                        for ky in 0..*window {
                            let row = base + (oy * stride + ky) * w + ox * stride;
                            gi[row..row + window].iter_mut().for_each(|v| *v += g);
                        }
                    }
                }
            }
            Ok((Some(Tensor::new(input.shape(), gi)?), ParamGrads::None))
        }
        (Layer::GlobalAvgPool, _) => {
            let plane = input.len() / g_out.len().max(1);
            let gi = g_out
                .data()
                .iter()
                .flat_map(|&g| std::iter::repeat(g / plane as f32).take(plane))
                .collect();
            Ok((Some(Tensor::new(input.shape(), gi)?), ParamGrads::None))
        }
        (Layer::BatchNorm(bn), LayerCache::BatchNorm { xhat, inv_std, stats }) => {
            let (gi, gs, gb) = batch_norm_backward(bn, xhat, inv_std, stats.is_some(), &g_out)?;
            Ok((Some(gi), ParamGrads::BatchNorm { scale: gs, shift: gb }))
        }
        _ => Err(shape_err(format!(
            "no cached state for {} layer backward",
            layer.kind()
        ))),
    }
}

fn batch_norm_backward(
    bn: &BatchNorm,
    xhat: &Tensor,
    inv_std: &[f32],
    batch_stats: bool,
    g_out: &Tensor,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let c = bn.channels();
    let n = xhat.dim(0);
    let plane = xhat.len() / (n * c).max(1);
    let count = (n * plane) as f64;
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (p, (gs, xs)) in g_out
        .data()
        .chunks_exact(plane)
        .zip(xhat.data().chunks_exact(plane))
        .enumerate()
    {
        let ch = p % c;
        for (&g, &x) in gs.iter().zip(xs) {
            sum_g[ch] += g as f64;
            sum_gx[ch] += (g * x) as f64;
        }
    }
    let mut gi = vec![0.0f32; xhat.len()];
    for (p, ((dst, gs), xs)) in gi
        .chunks_exact_mut(plane)
        .zip(g_out.data().chunks_exact(plane))
        .zip(xhat.data().chunks_exact(plane))
        .enumerate()
    {
        let ch = p % c;
        let k = bn.scale[ch] * inv_std[ch];
        if batch_stats {
            let mg = (sum_g[ch] / count) as f32;
            let mgx = (sum_gx[ch] / count) as f32;
            for ((o, &g), &x) in dst.iter_mut().zip(gs).zip(xs) {
                *o = k * (g - mg - x * mgx);
            }
        } else {
            for (o, &g) in dst.iter_mut().zip(gs) {
                *o = k * g;
            }
        }
    }
    Ok((
        Tensor::new(xhat.shape(), gi)?,
        sum_gx.iter().map(|&v| v as f32).collect(),
        sum_g.iter().map(|&v| v as f32).collect(),
    ))
}
