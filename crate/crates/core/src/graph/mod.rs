//! Network representation: a chain of layers plus forward-only residual
//! skip edges.

pub mod format;
mod forward;
mod validate;

pub use forward::{forward, forward_mode, ForwardPass, Mode};
pub(crate) use forward::{layer_forward, run, LayerCache, Trace};
pub use validate::{validate, Diagnostic, DiagnosticKind};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decompose;
use crate::error::{Error, Result};
use crate::tensor::{conv_output_extent, Tensor};

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPSILON: f32 = 1e-5;

/// Dense convolution, weight `(c_out, c_in, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn new(weight: Tensor, bias: Option<Vec<f32>>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }
}

/// Convolution whose kernels are linear combinations of a shared basis.
///
/// Kernel `(i, j)` is `sum_m coeffs[i, j, m] * basis[m, :]` reshaped to
/// `k x k`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedConv {
    /// `d x k*k`, one flattened basis kernel per row.
    pub basis: Tensor,
    /// `c_out x c_in x d`.
    pub coeffs: Tensor,
    pub bias: Option<Vec<f32>>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Surviving coefficient positions after pruning; `None` until pruned.
    pub mask: Option<Vec<bool>>,
    /// Last basis row holds the kernel mean and its coefficients are fixed at 1.
    pub mean_row: bool,
}

impl DecomposedConv {
    pub fn out_channels(&self) -> usize {
        self.coeffs.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.coeffs.dim(1)
    }

    /// Number of basis kernels, including a mean row if present.
    pub fn d(&self) -> usize {
        self.basis.dim(0)
    }

    /// Basis rows whose coefficients are learned (excludes the mean row).
    pub fn learned_d(&self) -> usize {
        self.d() - usize::from(self.mean_row)
    }

    /// Whether coefficient position `idx` (flat into `coeffs`) is trainable.
    pub fn is_learned_coeff(&self, idx: usize) -> bool {
        !self.mean_row || idx % self.d() != self.d() - 1
    }

    pub fn is_live(&self, idx: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[idx])
    }

    /// Dense `(c_out, c_in, k, k)` weight.
    pub fn reconstruct(&self) -> Tensor {
        decompose::reconstruct(&self.basis, &self.coeffs, self.mask.as_deref())
            .expect("decomposed layer shapes are validated on construction")
    }

    /// Force masked-out coefficients to `+0.0`.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (v, &keep) in self.coeffs.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Fully connected layer, weight `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

impl Linear {
    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl BatchNorm {
    /// Identity-initialised normalisation over `channels`.
    pub fn new(channels: usize) -> Self {
        Self {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(Conv),
    DecomposedConv(DecomposedConv),
    Linear(Linear),
    Relu,
    MaxPool { window: usize, stride: usize },
    AvgPool { window: usize, stride: usize },
    BatchNorm(BatchNorm),
    GlobalAvgPool,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::DecomposedConv(_) => "decomposed_conv",
            Layer::Linear(_) => "linear",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "max_pool",
            Layer::AvgPool { .. } => "avg_pool",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::GlobalAvgPool => "global_avg_pool",
        }
    }

    /// Conv, decomposed conv and linear layers mix channels; everything else
    /// maps channel `c` to channel `c`.
    pub fn mixes_channels(&self) -> bool {
        matches!(
            self,
            Layer::Conv(_) | Layer::DecomposedConv(_) | Layer::Linear(_)
        )
    }

    /// Best-effort output shape. The error string is set when `input` is not
    /// acceptable; the returned shape is then what the layer would produce
    /// from its own parameters, so checking can continue downstream.
    pub fn infer_shape(&self, input: ActShape) -> (ActShape, Option<String>) {
        match self {
            Layer::Conv(c) => conv_shape(
                input,
                c.in_channels(),
                c.out_channels(),
                c.kernel(),
                c.stride,
                c.padding,
            ),
            Layer::DecomposedConv(c) => conv_shape(
                input,
                c.in_channels(),
                c.out_channels(),
                c.kernel,
                c.stride,
                c.padding,
            ),
            Layer::Linear(l) => match input {
                ActShape::Flat(n) if n == l.in_features() => (ActShape::Flat(l.out_features()), None),
                other => (
                    ActShape::Flat(l.out_features()),
                    Some(format!(
                        "linear expects {} features, got {other}",
                        l.in_features()
                    )),
                ),
            },
            Layer::Relu => (input, None),
            Layer::MaxPool { window, stride } | Layer::AvgPool { window, stride } => match input {
                ActShape::Map { c, h, w } => {
                    match (
                        conv_output_extent(h, *window, *stride, 0),
                        conv_output_extent(w, *window, *stride, 0),
                    ) {
                        (Ok(oh), Ok(ow)) => (ActShape::Map { c, h: oh, w: ow }, None),
                        _ => (
                            input,
                            Some(format!("pool window {window}/stride {stride} invalid for {input}")),
                        ),
                    }
                }
                ActShape::Flat(_) => (input, Some("pooling needs a feature map".into())),
            },
            Layer::BatchNorm(bn) => {
                let c = input.channels();
                if c == bn.channels() {
                    (input, None)
                } else {
                    (
                        input.with_channels(bn.channels()),
                        Some(format!(
                            "batch norm over {} channels fed {c} channels",
                            bn.channels()
                        )),
                    )
                }
            }
            Layer::GlobalAvgPool => match input {
                ActShape::Map { c, .. } => (ActShape::Flat(c), None),
                ActShape::Flat(_) => (input, Some("global pooling needs a feature map".into())),
            },
        }
    }
}

fn conv_shape(
    input: ActShape,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (ActShape, Option<String>) {
    match input {
        ActShape::Map { c, h, w } => {
            let spatial = (
                conv_output_extent(h, k, stride, padding),
                conv_output_extent(w, k, stride, padding),
            );
            let (oh, ow, err) = match spatial {
                (Ok(oh), Ok(ow)) => (oh, ow, None),
                (Err(e), _) | (_, Err(e)) => (h, w, Some(e.to_string())),
            };
            let err = if c != c_in {
                Some(format!("conv expects {c_in} input channels, got {c}"))
            } else {
                err
            };
            (ActShape::Map { c: c_out, h: oh, w: ow }, err)
        }
        ActShape::Flat(_) => (
            ActShape::Flat(c_out),
            Some("convolution needs a feature map".into()),
        ),
    }
}

/// Per-sample activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn channels(&self) -> usize {
        match *self {
            ActShape::Map { c, .. } => c,
            ActShape::Flat(n) => n,
        }
    }

    pub fn spatial(&self) -> usize {
        match *self {
            ActShape::Map { h, w, .. } => h * w,
            ActShape::Flat(_) => 1,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels() * self.spatial()
    }

    fn with_channels(self, c: usize) -> Self {
        match self {
            ActShape::Map { h, w, .. } => ActShape::Map { c, h, w },
            ActShape::Flat(_) => ActShape::Flat(c),
        }
    }

    /// Batched tensor shape.
    pub fn batched(&self, n: usize) -> Vec<usize> {
        match *self {
            ActShape::Map { c, h, w } => vec![n, c, h, w],
            ActShape::Flat(f) => vec![n, f],
        }
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActShape::Map { c, h, w } => write!(f, "{c}x{h}x{w}"),
            ActShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

/// Residual connection: the input of layer `to` becomes
/// `activation[to] + projection(activation[from])`.
///
/// Activations are indexed so that `0` is the network input and `i + 1` is
/// the output of layer `i`. An empty projection is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipEdge {
    pub from: usize,
    pub to: usize,
    pub projection: Vec<Layer>,
}

impl SkipEdge {
    pub fn identity(from: usize, to: usize) -> Self {
        Self {
            from,
            to,
            projection: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.projection.is_empty()
    }
}

/// Address of a layer: a main-chain index or a position inside a skip
/// projection. Written `"7"` or `"skip2.0"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerId {
    Main(usize),
    Skip { edge: usize, pos: usize },
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Main(i) => write!(f, "{i}"),
            LayerId::Skip { edge, pos } => write!(f, "skip{edge}.{pos}"),
        }
    }
}

impl FromStr for LayerId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Some(rest) = s.strip_prefix("skip") {
            let (e, p) = rest
                .split_once('.')
                .ok_or_else(|| format!("bad layer id {s:?}"))?;
            let edge = e.parse().map_err(|_| format!("bad layer id {s:?}"))?;
            let pos = p.parse().map_err(|_| format!("bad layer id {s:?}"))?;
            Ok(LayerId::Skip { edge, pos })
        } else {
            s.parse()
                .map(LayerId::Main)
                .map_err(|_| format!("bad layer id {s:?}"))
        }
    }
}

impl TryFrom<String> for LayerId {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<LayerId> for String {
    fn from(id: LayerId) -> String {
        id.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    /// Per-sample input `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    pub skips: Vec<SkipEdge>,
}

impl Network {
    pub fn new(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            input_shape,
            num_classes,
            layers: Vec::new(),
            skips: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: Layer) -> usize {
        self.layers.push(layer);
        self.layers.len() - 1
    }

    pub fn input_act_shape(&self) -> ActShape {
        let [c, h, w] = self.input_shape;
        ActShape::Map { c, h, w }
    }

    /// Every layer address: main chain first, then skip projections by edge.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut ids: Vec<LayerId> = (0..self.layers.len()).map(LayerId::Main).collect();
        for (edge, s) in self.skips.iter().enumerate() {
            ids.extend((0..s.projection.len()).map(|pos| LayerId::Skip { edge, pos }));
        }
        ids
    }

    pub fn layer(&self, id: LayerId) -> Option<&Layer> {
        match id {
            LayerId::Main(i) => self.layers.get(i),
            LayerId::Skip { edge, pos } => self.skips.get(edge)?.projection.get(pos),
        }
    }

    pub fn layer_mut(&mut self, id: LayerId) -> Option<&mut Layer> {
        match id {
            LayerId::Main(i) => self.layers.get_mut(i),
            LayerId::Skip { edge, pos } => self.skips.get_mut(edge)?.projection.get_mut(pos),
        }
    }

    /// Index of the skip edge feeding layer `to`, if any.
    pub fn skip_into(&self, to: usize) -> Option<usize> {
        self.skips.iter().position(|s| s.to == to)
    }

    /// Activation shapes `0..=layers.len()`; fails on the first violation.
    pub fn activation_shapes(&self) -> Result<Vec<ActShape>> {
        let diags = validate(self);
        if !diags.is_empty() {
            return Err(Error::Invalid(diags));
        }
        let mut shapes = vec![self.input_act_shape()];
        for layer in &self.layers {
            let (next, _) = layer.infer_shape(*shapes.last().unwrap());
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Input shape of every layer in [`Network::layer_ids`] order.
    pub fn layer_input_shapes(&self) -> Result<Vec<(LayerId, ActShape)>> {
        let acts = self.activation_shapes()?;
        let mut out: Vec<(LayerId, ActShape)> = (0..self.layers.len())
            .map(|i| (LayerId::Main(i), acts[i]))
            .collect();
        for (edge, s) in self.skips.iter().enumerate() {
            let mut cur = acts[s.from];
            for (pos, l) in s.projection.iter().enumerate() {
                out.push((LayerId::Skip { edge, pos }, cur));
                cur = l.infer_shape(cur).0;
            }
        }
        Ok(out)
    }

    pub fn decomposed_layers(&self) -> impl Iterator<Item = (LayerId, &DecomposedConv)> {
        self.layer_ids()
            .into_iter()
            .filter_map(move |id| match self.layer(id) {
                Some(Layer::DecomposedConv(d)) => Some((id, d)),
                _ => None,
            })
    }

    pub fn has_decomposed(&self) -> bool {
        self.decomposed_layers().next().is_some()
    }

    /// Fraction of learned coefficients that are exactly zero.
    pub fn coefficient_sparsity(&self) -> f64 {
        self.coefficient_fraction(|v| v == 0.0)
    }

    /// Fraction of learned coefficients with `|a| < tol`.
    pub fn coefficient_fraction_below(&self, tol: f32) -> f64 {
        self.coefficient_fraction(|v| v.abs() < tol)
    }

    fn coefficient_fraction(&self, pred: impl Fn(f32) -> bool) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for (_, d) in self.decomposed_layers() {
            for (idx, &v) in d.coeffs.data().iter().enumerate() {
                if d.is_learned_coeff(idx) {
                    total += 1;
                    hit += usize::from(pred(v));
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_id_text_roundtrip() {
        for id in [LayerId::Main(0), LayerId::Main(17), LayerId::Skip { edge: 2, pos: 1 }] {
            assert_eq!(id.to_string().parse::<LayerId>().unwrap(), id);
        }
        assert!("skip1".parse::<LayerId>().is_err());
        assert!("x".parse::<LayerId>().is_err());
    }
}
