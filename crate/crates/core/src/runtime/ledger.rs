use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{ActShape, Layer, LayerId, Network};

/// Multiply-accumulate counts for one layer. Layers without arithmetic
/// (ReLU, pooling, batch norm) count zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: LayerId,
    pub kind: String,
    /// Cost of the layer as a dense conv or linear layer.
    pub dense_macs: u64,
    pub stage1_macs: u64,
    pub stage2_macs: u64,
    pub two_stage_total: u64,
    /// What inference runs: the two-stage total for decomposed layers,
    /// the dense count otherwise.
    pub executed_macs: u64,
    pub params: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    /// Nonzero coefficients.
    pub coefficients: u64,
    pub basis: u64,
    pub conv_weights: u64,
    pub linear_weights: u64,
    pub biases: u64,
    /// Scale and shift.
    pub batch_norm: u64,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.coefficients
            + self.basis
            + self.conv_weights
            + self.linear_weights
            + self.biases
            + self.batch_norm
    }

    /// Convolution parameters only: coefficients, basis and dense kernels.
    pub fn conv_params(&self) -> u64 {
        self.coefficients + self.basis + self.conv_weights
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub layers: Vec<LayerFlops>,
    pub dense_macs: u64,
    pub stage1_macs: u64,
    pub stage2_macs: u64,
    pub two_stage_total: u64,
    pub executed_macs: u64,
    pub params: ParamBreakdown,
    pub params_total: u64,
}

impl FlopLedger {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn spatial_out(layer: &Layer, input: ActShape) -> u64 {
    layer.infer_shape(input).0.spatial() as u64
}

/// MAC and parameter ledger of `net` at its declared input size.
pub fn count_flops(net: &Network) -> Result<FlopLedger> {
    let mut params = ParamBreakdown::default();
    let mut layers = Vec::new();
    for (id, input) in net.layer_input_shapes()? {
        let layer = net.layer(id).expect("id from layer_input_shapes");
        let mut row = LayerFlops {
            layer: id,
            kind: layer.kind().to_string(),
            dense_macs: 0,
            stage1_macs: 0,
            stage2_macs: 0,
            two_stage_total: 0,
            executed_macs: 0,
            params: 0,
        };
        let before = params.total();
        match layer {
            Layer::Conv(c) => {
                let w = c.weight.len() as u64;
                row.dense_macs = w * spatial_out(layer, input);
                row.executed_macs = row.dense_macs;
                params.conv_weights += w;
                params.biases += c.bias.as_ref().map_or(0, |b| b.len() as u64);
            }
            Layer::DecomposedConv(d) => {
                let hw = spatial_out(layer, input);
                let (co, ci, dd) = (d.out_channels() as u64, d.in_channels() as u64, d.d() as u64);
                let k2 = (d.kernel * d.kernel) as u64;
                let nnz = d
                    .coeffs
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|&(i, &v)| v != 0.0 && d.is_live(i))
                    .count() as u64;
                row.dense_macs = co * ci * k2 * hw;
                row.stage1_macs = ci * dd * k2 * hw;
                row.stage2_macs = nnz * hw;
                row.two_stage_total = row.stage1_macs + row.stage2_macs;
                row.executed_macs = row.two_stage_total;
                params.coefficients += nnz;
                params.basis += dd * k2;
                params.biases += d.bias.as_ref().map_or(0, |b| b.len() as u64);
            }
            Layer::Linear(l) => {
                let w = l.weight.len() as u64;
                row.dense_macs = w;
                row.executed_macs = w;
                params.linear_weights += w;
                params.biases += l.bias.as_ref().map_or(0, |b| b.len() as u64);
            }
            Layer::BatchNorm(bn) => params.batch_norm += 2 * bn.channels() as u64,
            _ => {}
        }
        row.params = params.total() - before;
        layers.push(row);
    }
    let sum = |f: fn(&LayerFlops) -> u64| layers.iter().map(f).sum::<u64>();
    Ok(FlopLedger {
        dense_macs: sum(|l| l.dense_macs),
        stage1_macs: sum(|l| l.stage1_macs),
        stage2_macs: sum(|l| l.stage2_macs),
        two_stage_total: sum(|l| l.two_stage_total),
        executed_macs: sum(|l| l.executed_macs),
        params_total: params.total(),
        params,
        layers,
    })
}
