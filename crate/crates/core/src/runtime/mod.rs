//! Two-stage sparse inference.
//!
//! A decomposed conv runs as a per-channel convolution with every basis
//! kernel (stage 1, `c_in * d` planes) followed by a sparse weighted sum of
//! those planes (stage 2, one CSR row per output channel).

mod bench;
mod ledger;

pub use bench::{benchmark, median, p95, BenchReport, BenchRow, BENCH_CSV_HEADER};
pub use ledger::{count_flops, FlopLedger, LayerFlops, ParamBreakdown};

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{layer_forward, validate, Conv, DecomposedConv, Layer, Mode, Network};
use crate::parallel;
use crate::tensor::{axpy, gemm, im2col, Tensor, Transpose};

/// Coefficients `A (c_out, c_in, d)` as one sparse row per output channel.
/// Column `j * d + m` addresses stage-1 plane `(j, m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrCoefficients {
    pub c_out: usize,
    pub c_in: usize,
    pub d: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f32>,
}

impl CsrCoefficients {
    pub fn from_dense(coeffs: &Tensor) -> Result<Self> {
        if coeffs.rank() != 3 {
            return Err(shape_err(format!(
                "coefficients must be (c_out, c_in, d), got {:?}",
                coeffs.shape()
            )));
        }
        let (c_out, c_in, d) = (coeffs.dim(0), coeffs.dim(1), coeffs.dim(2));
        let row_len = c_in * d;
        let mut row_ptr = Vec::with_capacity(c_out + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in coeffs.data().chunks_exact(row_len.max(1)).take(c_out) {
            for (col, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    cols.push(col);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        if row_len == 0 {
            row_ptr.resize(c_out + 1, 0);
        }
        Ok(Self {
            c_out,
            c_in,
            d,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.c_out, self.c_in, self.d]);
        let row_len = self.c_in * self.d;
        for i in 0..self.c_out {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                out.data_mut()[i * row_len + self.cols[p]] = self.vals[p];
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f32]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }
}

/// Stage 1: plane `(j, m)` of the `(n, c_in * d, h', w')` output is input
/// channel `j` convolved with basis kernel `m`. `basis` is `(d, k * k)`.
pub fn stage1(input: &Tensor, basis: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if input.rank() != 4 || basis.rank() != 2 {
        return Err(shape_err(format!(
            "stage 1 needs an (n, c, h, w) input and a (d, k*k) basis, got {:?} and {:?}",
            input.shape(),
            basis.shape()
        )));
    }
    let (d, k2) = (basis.dim(0), basis.dim(1));
    let k = (k2 as f64).sqrt().round() as usize;
    if k * k != k2 {
        return Err(shape_err(format!("basis rows of length {k2} are not square kernels")));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let oh = crate::tensor::conv_output_extent(h, k, stride, padding)?;
    let ow = crate::tensor::conv_output_extent(w, k, stride, padding)?;
    let plane = oh * ow;
    let mut out = vec![0.0f32; n * c * d * plane];
    parallel::for_each_chunk(&mut out, (d * plane).max(1), |s, dst| {
        let (sample, j) = (s / c, s % c);
        let src = &input.data()[(sample * c + j) * h * w..(sample * c + j + 1) * h * w];
        let cols = im2col(src, 1, h, w, k, stride, padding).expect("extent already checked");
        gemm(Transpose::No, Transpose::No, d, plane, k2, basis.data(), &cols, dst, false);
    });
    Tensor::new(&[n, c * d, oh, ow], out)
}

/// Stage 2: output channel `i` is `bias[i] + sum val * plane[col]` over the
/// stored entries of CSR row `i`.
pub fn stage2(intermediate: &Tensor, coeffs: &CsrCoefficients, bias: Option<&[f32]>) -> Result<Tensor> {
    let planes = coeffs.c_in * coeffs.d;
    if intermediate.rank() != 4 || intermediate.dim(1) != planes {
        return Err(shape_err(format!(
            "stage 2 expects {planes} intermediate planes, got {:?}",
            intermediate.shape()
        )));
    }
    if let Some(&bad) = coeffs.cols.iter().find(|&&c| c >= planes) {
        return Err(shape_err(format!("coefficient column {bad} out of range for {planes} planes")));
    }
    if bias.is_some_and(|b| b.len() != coeffs.c_out) {
        return Err(shape_err("bias length differs from output channels"));
    }
    let (n, oh, ow) = (intermediate.dim(0), intermediate.dim(2), intermediate.dim(3));
    let plane = oh * ow;
    let c_out = coeffs.c_out;
    let mut out = vec![0.0f32; n * c_out * plane];
    parallel::for_each_chunk(&mut out, plane.max(1), |s, dst| {
        let (sample, i) = (s / c_out, s % c_out);
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[i]);
        }
        let base = sample * planes * plane;
        let (cols, vals) = coeffs.row(i);
        for (&col, &v) in cols.iter().zip(vals) {
            let src = &intermediate.data()[base + col * plane..base + (col + 1) * plane];
            axpy(dst, v, src);
        }
    });
    Tensor::new(&[n, c_out, oh, ow], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageConv {
    /// `(d, k * k)`.
    pub basis: Tensor,
    pub coeffs: CsrCoefficients,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
}

impl TwoStageConv {
    pub fn from_decomposed(d: &DecomposedConv) -> Result<Self> {
        let mut coeffs = d.coeffs.clone();
        if let Some(mask) = &d.mask {
            for (v, &keep) in coeffs.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
        Ok(Self {
            basis: d.basis.clone(),
            coeffs: CsrCoefficients::from_dense(&coeffs)?,
            bias: d.bias.clone(),
            stride: d.stride,
            padding: d.padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mid = stage1(x, &self.basis, self.stride, self.padding)?;
        stage2(&mid, &self.coeffs, self.bias.as_deref())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CompiledLayer {
    /// Executed exactly as in the graph forward pass.
    Dense(Layer),
    TwoStage(TwoStageConv),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Decomposed layers rebuilt into dense convolutions.
    Dense,
    TwoStage,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::TwoStage => "two_stage",
        }
    }
}

/// Immutable inference form of a network.
#[derive(Clone, Debug)]
pub struct CompiledSparseModel {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub variant: Variant,
    pub layers: Vec<CompiledLayer>,
    /// Per skip edge `(from, to, projection)`.
    pub skips: Vec<(usize, usize, Vec<CompiledLayer>)>,
    pub ledger: FlopLedger,
}

fn compile_layer(layer: &Layer, variant: Variant) -> Result<CompiledLayer> {
    Ok(match (layer, variant) {
        (Layer::DecomposedConv(d), Variant::TwoStage) => {
            CompiledLayer::TwoStage(TwoStageConv::from_decomposed(d)?)
        }
        (Layer::DecomposedConv(d), Variant::Dense) => CompiledLayer::Dense(Layer::Conv(Conv::new(
            d.reconstruct(),
            d.bias.clone(),
            d.stride,
            d.padding,
        ))),
        (other, _) => CompiledLayer::Dense(other.clone()),
    })
}

pub fn compile(net: &Network) -> Result<CompiledSparseModel> {
    compile_as(net, Variant::TwoStage)
}

pub fn compile_as(net: &Network, variant: Variant) -> Result<CompiledSparseModel> {
    let diags = validate(net);
    if !diags.is_empty() {
        return Err(Error::Invalid(diags));
    }
    let layers = net
        .layers
        .iter()
        .map(|l| compile_layer(l, variant))
        .collect::<Result<_>>()?;
    let skips = net
        .skips
        .iter()
        .map(|s| {
            let proj = s
                .projection
                .iter()
                .map(|l| compile_layer(l, variant))
                .collect::<Result<_>>()?;
            Ok((s.from, s.to, proj))
        })
        .collect::<Result<_>>()?;
    Ok(CompiledSparseModel {
        input_shape: net.input_shape,
        num_classes: net.num_classes,
        variant,
        layers,
        skips,
        ledger: count_flops(net)?,
    })
}

/// Timing and memory of one inference call.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Profile {
    pub total: Duration,
    pub stage1: Duration,
    pub stage2: Duration,
    /// Peak bytes of live activations, including stage-1 planes.
    pub peak_bytes: usize,
}

fn bytes(t: &Tensor) -> usize {
    t.len() * std::mem::size_of::<f32>()
}

struct Meter {
    profile: Profile,
    timed: bool,
}

impl Meter {
    fn run(&mut self, layer: &CompiledLayer, x: &Tensor, live: usize) -> Result<Tensor> {
        match layer {
            CompiledLayer::Dense(l) => {
                let (out, _) = layer_forward(l, x, Mode::Eval)?;
                self.peak(live + bytes(&out));
                Ok(out)
            }
            CompiledLayer::TwoStage(t) => {
                let start = self.timed.then(Instant::now);
                let mid = stage1(x, &t.basis, t.stride, t.padding)?;
                let split = self.timed.then(Instant::now);
                let out = stage2(&mid, &t.coeffs, t.bias.as_deref())?;
                if let (Some(a), Some(b)) = (start, split) {
                    self.profile.stage1 += b - a;
                    self.profile.stage2 += b.elapsed();
                }
                self.peak(live + bytes(&mid) + bytes(&out));
                Ok(out)
            }
        }
    }

    fn peak(&mut self, b: usize) {
        self.profile.peak_bytes = self.profile.peak_bytes.max(b);
    }
}

impl CompiledSparseModel {
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.run(batch, false).map(|(t, _)| t)
    }

    pub fn infer_profiled(&self, batch: &Tensor) -> Result<(Tensor, Profile)> {
        self.run(batch, true)
    }

    fn run(&self, batch: &Tensor, timed: bool) -> Result<(Tensor, Profile)> {
        let [c, h, w] = self.input_shape;
        if batch.rank() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(shape_err(format!(
                "input batch {:?} does not match model input {c}x{h}x{w}",
                batch.shape()
            )));
        }
        let start = Instant::now();
        let mut meter = Meter {
            profile: Profile::default(),
            timed,
        };
        // activations still needed as a skip source
        let mut saved: Vec<Option<Tensor>> = vec![None; self.layers.len() + 1];
        let keep = |a: usize, now: usize| self.skips.iter().any(|&(f, t, _)| f == a && t >= now);
        let mut cur = batch.clone();
        meter.peak(bytes(&cur));
        for (i, layer) in self.layers.iter().enumerate() {
            if keep(i, i) {
                saved[i] = Some(cur.clone());
            }
            let held: usize = saved.iter().flatten().map(bytes).sum();
            if let Some((from, _, proj)) = self.skips.iter().find(|s| s.1 == i) {
                let mut s = saved[*from].clone().expect("skip source saved");
                for l in proj {
                    s = meter.run(l, &s, held + bytes(&cur) + bytes(&s))?;
                }
                cur = cur.add(&s)?;
            }
            let next = meter.run(layer, &cur, held + bytes(&cur))?;
            for (a, slot) in saved.iter_mut().enumerate() {
                if slot.is_some() && !keep(a, i + 1) {
                    *slot = None;
                }
            }
            cur = next;
        }
        meter.profile.total = start.elapsed();
        Ok((cur, meter.profile))
    }

    pub fn two_stage_layers(&self) -> impl Iterator<Item = &TwoStageConv> {
        self.layers
            .iter()
            .chain(self.skips.iter().flat_map(|s| s.2.iter()))
            .filter_map(|l| match l {
                CompiledLayer::TwoStage(t) => Some(t),
                _ => None,
            })
    }
}
