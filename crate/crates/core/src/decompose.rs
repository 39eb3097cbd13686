//! Kernel-space decomposition of convolution layers into a shared basis and
//! per-slot coefficients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::graph::{Conv, DecomposedConv, Layer, LayerId, Network};
use crate::parallel;
use crate::tensor::{sym_eig, Element, Tensor};

/// Default basis size for kernels larger than 1x1.
pub const DEFAULT_D: usize = 5;

/// `(c_out * c_in) x k*k` view of a conv weight: row `i * c_in + j` is the
/// flattened kernel of filter `i`, input channel `j`.
pub fn kernel_matrix<T: Element>(weight: &Tensor<T>) -> Result<Tensor<T>> {
    if weight.rank() != 4 || weight.dim(2) != weight.dim(3) {
        return Err(shape_err(format!(
            "expected a (c_out, c_in, k, k) weight, got {:?}",
            weight.shape()
        )));
    }
    let s = weight.shape();
    weight.clone().reshape(&[s[0] * s[1], s[2] * s[3]])
}

/// Inverse of [`kernel_matrix`].
pub fn from_kernel_matrix<T: Element>(
    theta: &Tensor<T>,
    c_out: usize,
    c_in: usize,
) -> Result<Tensor<T>> {
    let k = square_side(theta.dim(1))?;
    theta.clone().reshape(&[c_out, c_in, k, k])
}

fn square_side(k2: usize) -> Result<usize> {
    let k = (k2 as f64).sqrt().round() as usize;
    if k * k != k2 || k == 0 {
        return Err(shape_err(format!("{k2} is not a square kernel size")));
    }
    Ok(k)
}

#[derive(Clone, Debug)]
pub struct Decomposition<T = f32> {
    /// `d x k*k`, orthonormal rows.
    pub basis: Tensor<T>,
    /// `c_out x c_in x d`.
    pub coeffs: Tensor<T>,
    /// Squared Frobenius error of the reconstruction.
    pub err2: f64,
    /// Full spectrum of `theta'^T theta'`, non-increasing.
    pub eigenvalues: Vec<f64>,
}

/// Project every kernel of `weight` onto the top-`d` eigenvectors of
/// `W = theta'^T theta'`.
pub fn decompose_layer<T: Element>(weight: &Tensor<T>, d: usize) -> Result<Decomposition<T>> {
    let theta = kernel_matrix(weight)?;
    let (c_out, c_in) = (weight.dim(0), weight.dim(1));
    let k2 = theta.dim(1);
    if d == 0 || d > k2 {
        return Err(arg_err(format!("basis size {d} outside 1..={k2}")));
    }
    let rows = theta.dim(0);
    let t64: Vec<f64> = theta.data().iter().map(|v| v.as_f64()).collect();

    let mut w = vec![0.0f64; k2 * k2];
    for r in 0..rows {
        let row = &t64[r * k2..(r + 1) * k2];
        for a in 0..k2 {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            for b in 0..k2 {
                w[a * k2 + b] += ra * row[b];
            }
        }
    }
    let eig = sym_eig(&Tensor::new(&[k2, k2], w)?)?;

    let basis64: Vec<f64> = (0..d).flat_map(|m| eig.vector(m)).collect();
    let basis: Vec<T> = basis64.iter().map(|&v| T::from_f64(v)).collect();
    let basis_t: Vec<f64> = basis.iter().map(|v| v.as_f64()).collect();

    let mut coeffs = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let row = &t64[r * k2..(r + 1) * k2];
        for m in 0..d {
            let u = &basis64[m * k2..(m + 1) * k2];
            coeffs.push(T::from_f64(row.iter().zip(u).map(|(a, b)| a * b).sum()));
        }
    }

    let mut err2 = 0.0;
    for r in 0..rows {
        let a = &coeffs[r * d..(r + 1) * d];
        for p in 0..k2 {
            let mut rec = 0.0;
            for m in 0..d {
                rec += a[m].as_f64() * basis_t[m * k2 + p];
            }
            err2 += (t64[r * k2 + p] - rec).powi(2);
        }
    }

    Ok(Decomposition {
        basis: Tensor::new(&[d, k2], basis)?,
        coeffs: Tensor::new(&[c_out, c_in, d], coeffs)?,
        err2,
        eigenvalues: eig.eigenvalues,
    })
}

/// Dense `(c_out, c_in, k, k)` weight with kernel `(i, j)` equal to
/// `sum_m coeffs[i, j, m] * basis[m]`. Masked-out coefficients contribute
/// nothing.
pub fn reconstruct<T: Element>(
    basis: &Tensor<T>,
    coeffs: &Tensor<T>,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    if basis.rank() != 2 || coeffs.rank() != 3 || coeffs.dim(2) != basis.dim(0) {
        return Err(shape_err(format!(
            "basis {:?} and coefficients {:?} do not agree",
            basis.shape(),
            coeffs.shape()
        )));
    }
    if let Some(m) = mask {
        if m.len() != coeffs.len() {
            return Err(shape_err(format!(
                "mask has {} entries for {} coefficients",
                m.len(),
                coeffs.len()
            )));
        }
    }
    let (d, k2) = (basis.dim(0), basis.dim(1));
    let k = square_side(k2)?;
    let (c_out, c_in) = (coeffs.dim(0), coeffs.dim(1));
    let b = basis.data();
    let mut out = vec![T::zero(); c_out * c_in * k2];
    for (slot, kernel) in out.chunks_exact_mut(k2).enumerate() {
        for m in 0..d {
            let idx = slot * d + m;
            if mask.is_some_and(|mk| !mk[idx]) {
                continue;
            }
            let a = coeffs.data()[idx];
            if a == T::zero() {
                continue;
            }
            for (o, &u) in kernel.iter_mut().zip(&b[m * k2..(m + 1) * k2]) {
                *o += a * u;
            }
        }
    }
    Tensor::new(&[c_out, c_in, k, k], out)
}

/// Replace a dense conv by its decomposition. 1x1 kernels always become a
/// one-element basis `[1]` with the original weights as coefficients.
pub fn decompose_conv(conv: &Conv, d: usize, center: bool) -> Result<(DecomposedConv, f64)> {
    let (c_out, c_in, k) = (conv.out_channels(), conv.in_channels(), conv.kernel());
    let make = |basis, coeffs, mean_row| DecomposedConv {
        basis,
        coeffs,
        bias: conv.bias.clone(),
        kernel: k,
        stride: conv.stride,
        padding: conv.padding,
        mask: None,
        mean_row,
    };
    if k == 1 {
        if d != 1 {
            return Err(arg_err(format!("1x1 kernels take d = 1, got {d}")));
        }
        let coeffs = conv.weight.clone().reshape(&[c_out, c_in, 1])?;
        return Ok((make(Tensor::full(&[1, 1], 1.0), coeffs, false), 0.0));
    }
    if !center {
        let dec = decompose_layer(&conv.weight, d)?;
        return Ok((make(dec.basis, dec.coeffs, false), dec.err2));
    }

    let theta = kernel_matrix(&conv.weight)?;
    let (rows, k2) = (theta.dim(0), theta.dim(1));
    let mut mean = vec![0.0f64; k2];
    for row in theta.data().chunks_exact(k2) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let centered = Tensor::from_fn(&[c_out, c_in, k, k], |i| {
        theta.data()[i] - mean32[i % k2]
    });
    let dec = decompose_layer(&centered, d)?;
    let mut basis = dec.basis.into_data();
    basis.extend_from_slice(&mean32);
    let mut coeffs = Vec::with_capacity(rows * (d + 1));
    for a in dec.coeffs.data().chunks_exact(d) {
        coeffs.extend_from_slice(a);
        coeffs.push(1.0);
    }
    let layer = make(
        Tensor::new(&[d + 1, k2], basis)?,
        Tensor::new(&[c_out, c_in, d + 1], coeffs)?,
        true,
    );
    let rec = layer.reconstruct();
    let err2 = rec
        .data()
        .iter()
        .zip(conv.weight.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok((layer, err2))
}

/// Which layers to decompose and with how many basis kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecomposePlan {
    /// Used for every conv with `k >= 2` not listed in `per_layer`,
    /// clamped to `k * k`.
    pub default_d: usize,
    pub per_layer: BTreeMap<LayerId, usize>,
    /// Store the kernel mean as a frozen extra basis row.
    pub center: bool,
}

impl Default for DecomposePlan {
    fn default() -> Self {
        Self {
            default_d: DEFAULT_D,
            per_layer: BTreeMap::new(),
            center: false,
        }
    }
}

impl DecomposePlan {
    fn d_for(&self, id: LayerId, k: usize) -> usize {
        match self.per_layer.get(&id) {
            Some(&d) => d,
            None if k == 1 => 1,
            None => self.default_d.min(k * k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDecomposition {
    pub layer: LayerId,
    pub kernel: usize,
    pub d: usize,
    pub err2: f64,
    /// `err2 / ||theta||^2`, zero for an all-zero weight.
    pub rel_err2: f64,
}

/// Decompose every dense conv layer (main chain and skip projections).
pub fn decompose_network(
    net: &Network,
    plan: &DecomposePlan,
) -> Result<(Network, Vec<LayerDecomposition>)> {
    for (&id, &d) in &plan.per_layer {
        match net.layer(id) {
            None => return Err(arg_err(format!("layer {id} does not exist"))),
            Some(Layer::Conv(c)) => {
                let k2 = c.kernel() * c.kernel();
                if d == 0 || d > k2 {
                    return Err(arg_err(format!(
                        "layer {id}: basis size {d} outside 1..={k2}"
                    )));
                }
            }
            Some(other) => {
                return Err(arg_err(format!(
                    "layer {id} is {}, not a dense conv",
                    other.kind()
                )))
            }
        }
    }
    let targets: Vec<(LayerId, &Conv)> = net
        .layer_ids()
        .into_iter()
        .filter_map(|id| match net.layer(id) {
            Some(Layer::Conv(c)) => Some((id, c)),
            _ => None,
        })
        .collect();
    let results = parallel::map_indexed(targets.len(), |t| {
        let (id, conv) = targets[t];
        let d = plan.d_for(id, conv.kernel());
        decompose_conv(conv, d, plan.center).map(|(layer, err2)| (id, d, layer, err2))
    });

    let mut out = net.clone();
    let mut report = Vec::with_capacity(results.len());
    for r in results {
        let (id, d, layer, err2) = r?;
        let norm = layer_norm_sq(net.layer(id).unwrap());
        report.push(LayerDecomposition {
            layer: id,
            kernel: layer.kernel,
            d,
            err2,
            rel_err2: if norm > 0.0 { err2 / norm } else { 0.0 },
        });
        *out.layer_mut(id).unwrap() = Layer::DecomposedConv(layer);
    }
    Ok((out, report))
}

fn layer_norm_sq(layer: &Layer) -> f64 {
    match layer {
        Layer::Conv(c) => c.weight.norm_sq(),
        _ => 0.0,
    }
}
