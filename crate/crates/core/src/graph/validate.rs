use std::fmt;

use serde::Serialize;

use super::{ActShape, Layer, LayerId, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    /// A layer's input does not match its predecessor's output.
    ShapeChain,
    /// A skip edge's (projected) source does not match its destination.
    SkipShape,
    /// A skip edge points backwards or out of range.
    SkipOrder,
    /// Two skip edges cross, or two share a destination.
    SkipCrossing,
    /// A layer's own parameters are inconsistent.
    LayerParams,
    /// The final activation is not `num_classes` logits.
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub layer: Option<LayerId>,
    pub kind: DiagnosticKind,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(id) => write!(f, "layer {id}: {:?}: {}", self.kind, self.message),
            None => write!(f, "{:?}: {}", self.kind, self.message),
        }
    }
}

/// Check every structural invariant of `net`. Empty means well formed.
pub fn validate(net: &Network) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut push = |layer: Option<LayerId>, kind, message: String| {
        diags.push(Diagnostic {
            layer,
            kind,
            message,
        })
    };

    for id in net.layer_ids() {
        if let Some(msg) = check_params(net.layer(id).unwrap()) {
            push(Some(id), DiagnosticKind::LayerParams, msg);
        }
    }

    let n_layers = net.layers.len();
    let mut skip_ok = vec![true; net.skips.len()];
    for (e, s) in net.skips.iter().enumerate() {
        if s.to >= n_layers || s.from >= s.to {
            push(
                Some(LayerId::Main(s.to.min(n_layers.saturating_sub(1)))),
                DiagnosticKind::SkipOrder,
                format!(
                    "skip {e} from activation {} to layer {} is not forward-only within {n_layers} layers",
                    s.from, s.to
                ),
            );
            skip_ok[e] = false;
        }
    }
    for a in 0..net.skips.len() {
        for b in a + 1..net.skips.len() {
            let (sa, sb) = (&net.skips[a], &net.skips[b]);
            let crossing = (sa.from < sb.from && sb.from < sa.to && sa.to < sb.to)
                || (sb.from < sa.from && sa.from < sb.to && sb.to < sa.to);
            if crossing || sa.to == sb.to {
                push(
                    Some(LayerId::Main(sb.to)),
                    DiagnosticKind::SkipCrossing,
                    format!("skips {a} and {b} cross or share a destination"),
                );
                skip_ok[b] = false;
            }
        }
    }

    let mut acts = vec![net.input_act_shape()];
    for (i, layer) in net.layers.iter().enumerate() {
        let cur = acts[i];
        if let Some(e) = net.skips.iter().position(|s| s.to == i) {
            if skip_ok[e] {
                let s = &net.skips[e];
                let mut proj = acts[s.from];
                let mut broken = false;
                for (pos, l) in s.projection.iter().enumerate() {
                    let (next, err) = l.infer_shape(proj);
                    if let Some(msg) = err {
                        push(
                            Some(LayerId::Skip { edge: e, pos }),
                            DiagnosticKind::ShapeChain,
                            msg,
                        );
                        broken = true;
                    }
                    proj = next;
                }
                if !broken && proj != cur {
                    push(
                        Some(LayerId::Main(i)),
                        DiagnosticKind::SkipShape,
                        format!(
                            "skip {e} delivers {proj} but layer {i} receives {cur}"
                        ),
                    );
                }
            }
        }
        let (next, err) = layer.infer_shape(cur);
        if let Some(msg) = err {
            push(Some(LayerId::Main(i)), DiagnosticKind::ShapeChain, msg);
        }
        acts.push(next);
    }

    let last = *acts.last().unwrap();
    if last != ActShape::Flat(net.num_classes) {
        push(
            None,
            DiagnosticKind::Output,
            format!("network produces {last}, expected {} logits", net.num_classes),
        );
    }
    diags
}

fn check_params(layer: &Layer) -> Option<String> {
    match layer {
        Layer::Conv(c) => {
            let s = c.weight.shape();
            if s.len() != 4 || s[2] != s[3] {
                return Some(format!("conv weight must be (c_out, c_in, k, k), got {s:?}"));
            }
            if c.stride == 0 {
                return Some("stride must be at least 1".into());
            }
            check_bias(c.bias.as_deref(), s[0])
        }
        Layer::DecomposedConv(d) => {
            let k2 = d.kernel * d.kernel;
            let bs = d.basis.shape();
            let cs = d.coeffs.shape();
            if bs.len() != 2 || bs[1] != k2 {
                return Some(format!("basis must be d x {k2}, got {bs:?}"));
            }
            let max_d = k2 + usize::from(d.mean_row);
            if bs[0] == 0 || bs[0] > max_d {
                return Some(format!("basis size d = {} outside 1..={max_d}", bs[0]));
            }
            if cs.len() != 3 || cs[2] != bs[0] {
                return Some(format!(
                    "coefficients must be c_out x c_in x {}, got {cs:?}",
                    bs[0]
                ));
            }
            if d.stride == 0 {
                return Some("stride must be at least 1".into());
            }
            if let Some(mask) = &d.mask {
                if mask.len() != d.coeffs.len() {
                    return Some(format!(
                        "mask has {} entries for {} coefficients",
                        mask.len(),
                        d.coeffs.len()
                    ));
                }
                if let Some(idx) = mask
                    .iter()
                    .zip(d.coeffs.data())
                    .position(|(&keep, &v)| !keep && v != 0.0)
                {
                    return Some(format!("masked coefficient {idx} is nonzero"));
                }
            }
            check_bias(d.bias.as_deref(), cs[0])
        }
        Layer::Linear(l) => {
            if l.weight.rank() != 2 {
                return Some(format!("linear weight must be rank 2, got {:?}", l.weight.shape()));
            }
            check_bias(l.bias.as_deref(), l.weight.dim(0))
        }
        Layer::BatchNorm(bn) => {
            let c = bn.channels();
            if bn.shift.len() != c || bn.running_mean.len() != c || bn.running_var.len() != c {
                return Some("batch norm parameter lengths differ".into());
            }
            if bn.running_var.iter().any(|&v| !(v >= 0.0)) {
                return Some("batch norm running variance must be non-negative".into());
            }
            None
        }
        Layer::MaxPool { window, stride } | Layer::AvgPool { window, stride } => {
            if *window == 0 || *stride == 0 {
                Some("pool window and stride must be at least 1".into())
            } else {
                None
            }
        }
        Layer::Relu | Layer::GlobalAvgPool => None,
    }
}

fn check_bias(bias: Option<&[f32]>, n: usize) -> Option<String> {
    match bias {
        Some(b) if b.len() != n => Some(format!("bias has {} entries, expected {n}", b.len())),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use crate::graph::{Conv, SkipEdge};
    use crate::tensor::Tensor;

    fn conv(c_out: usize, c_in: usize, k: usize) -> Layer {
        Layer::Conv(Conv::new(Tensor::zeros(&[c_out, c_in, k, k]), None, 1, k / 2))
    }

    #[test]
    fn vgg_chain_is_clean() {
        assert!(validate(&arch::vgg16_cifar(10, 0)).is_empty());
        assert!(validate(&arch::resnet18_cifar(10, 0)).is_empty());
        assert!(validate(&arch::toy_cnn(3, 0)).is_empty());
    }

    #[test]
    fn channel_mismatch_yields_one_diagnostic() {
        let mut net = arch::toy_cnn(3, 0);
        let idx = net
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Conv(_)))
            .unwrap();
        let Layer::Conv(c) = &net.layers[idx] else { unreachable!() };
        net.layers[idx] = conv(c.out_channels(), c.in_channels() + 1, 3);
        let diags = validate(&net);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert_eq!(diags[0].kind, DiagnosticKind::ShapeChain);
        assert_eq!(diags[0].layer, Some(LayerId::Main(idx)));
    }

    #[test]
    fn skip_channel_mismatch_without_projection() {
        let mut net = Network::new([2, 4, 4], 3);
        net.push(conv(4, 2, 3));
        net.push(Layer::Relu);
        net.push(conv(6, 4, 3));
        net.push(Layer::Relu);
        net.push(Layer::GlobalAvgPool);
        net.push(Layer::Linear(crate::graph::Linear {
            weight: Tensor::zeros(&[3, 6]),
            bias: None,
        }));
        net.skips.push(SkipEdge::identity(2, 3));
        let diags = validate(&net);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert_eq!(diags[0].kind, DiagnosticKind::SkipShape);
    }

    #[test]
    fn backward_and_crossing_skips() {
        let mut net = Network::new([2, 4, 4], 2);
        for _ in 0..4 {
            net.push(conv(2, 2, 3));
        }
        net.push(Layer::GlobalAvgPool);
        net.skips.push(SkipEdge::identity(3, 2));
        assert_eq!(validate(&net)[0].kind, DiagnosticKind::SkipOrder);

        net.skips = vec![SkipEdge::identity(0, 2), SkipEdge::identity(1, 3)];
        let diags = validate(&net);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert_eq!(diags[0].kind, DiagnosticKind::SkipCrossing);

        net.skips = vec![SkipEdge::identity(0, 2), SkipEdge::identity(2, 4)];
        assert!(validate(&net).is_empty());
    }

    #[test]
    fn negative_running_variance_is_flagged() {
        let mut net = Network::new([2, 4, 4], 2);
        let mut bn = crate::graph::BatchNorm::new(2);
        bn.running_var[1] = -1.0;
        net.push(Layer::BatchNorm(bn));
        net.push(Layer::GlobalAvgPool);
        let diags = validate(&net);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].kind, DiagnosticKind::LayerParams);
    }
}
