//! Magnitude pruning of coefficients with a per-layer standard-deviation
//! threshold.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::graph::{DecomposedConv, Layer, LayerId, Network};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    /// Threshold multiplier on the standard deviation.
    pub sensitivity: f32,
    /// Compute the deviation over nonzero entries only.
    pub std_nonzero_only: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            sensitivity: 1.0,
            std_nonzero_only: false,
        }
    }
}

/// `s` times the population standard deviation of `values`.
pub fn compute_threshold(values: &[f32], s: f32, nonzero_only: bool) -> Result<f32> {
    if !(s >= 0.0) {
        return Err(arg_err("sensitivity must be non-negative"));
    }
    let vals: Vec<f64> = values
        .iter()
        .filter(|&&v| !nonzero_only || v != 0.0)
        .map(|&v| v as f64)
        .collect();
    if vals.is_empty() {
        if nonzero_only && !values.is_empty() {
            return Ok(0.0);
        }
        return Err(arg_err("threshold of an empty coefficient tensor"));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((s as f64 * var.sqrt()) as f32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: LayerId,
    pub nnz: usize,
    pub total: usize,
    /// Percent, `100 * (1 - nnz / total)`.
    pub sparsity: f64,
    pub threshold: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    pub nnz: usize,
    pub total: usize,
    pub sparsity: f64,
}

impl SparsityReport {
    pub fn from_counts(rows: Vec<(LayerId, usize, usize, f32)>) -> Self {
        let layers: Vec<LayerSparsity> = rows
            .into_iter()
            .map(|(layer, nnz, total, threshold)| LayerSparsity {
                layer,
                nnz,
                total,
                sparsity: percent_sparse(nnz, total),
                threshold,
            })
            .collect();
        let nnz = layers.iter().map(|l| l.nnz).sum();
        let total = layers.iter().map(|l| l.total).sum();
        Self {
            layers,
            nnz,
            total,
            sparsity: percent_sparse(nnz, total),
        }
    }

    /// Counts of nonzero learned coefficients in `net` as it stands.
    pub fn measure(net: &Network) -> Self {
        Self::from_counts(
            net.decomposed_layers()
                .map(|(id, d)| {
                    let (nnz, total) = learned_counts(d);
                    (id, nnz, total, 0.0)
                })
                .collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn percent_sparse(nnz: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * (1.0 - nnz as f64 / total as f64)
    }
}

fn learned_counts(d: &DecomposedConv) -> (usize, usize) {
    let mut nnz = 0;
    let mut total = 0;
    for (i, &v) in d.coeffs.data().iter().enumerate() {
        if d.is_learned_coeff(i) {
            total += 1;
            nnz += usize::from(v != 0.0);
        }
    }
    (nnz, total)
}

fn learned_values(d: &DecomposedConv) -> Vec<f32> {
    d.coeffs
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| d.is_learned_coeff(*i))
        .map(|(_, &v)| v)
        .collect()
}

/// Mask every learned coefficient with `|a| < tau` and set it to `+0.0`.
/// Existing masks are intersected, never widened.
pub fn prune_layer(d: &mut DecomposedConv, tau: f32) {
    let mut mask = d.mask.take().unwrap_or_else(|| vec![true; d.coeffs.len()]);
    for (i, &v) in d.coeffs.data().iter().enumerate() {
        if d.is_learned_coeff(i) && v.abs() < tau {
            mask[i] = false;
        }
    }
    d.mask = Some(mask);
    d.apply_mask();
}

/// Prune every decomposed layer at `sensitivity * std` of its own
/// coefficients.
pub fn prune(net: &mut Network, cfg: &PruneConfig) -> Result<SparsityReport> {
    let ids: Vec<LayerId> = net.decomposed_layers().map(|(id, _)| id).collect();
    if ids.is_empty() {
        return Err(arg_err("pruning needs at least one decomposed layer"));
    }
    let mut taus = Vec::with_capacity(ids.len());
    for &id in &ids {
        let Some(Layer::DecomposedConv(d)) = net.layer(id) else { unreachable!() };
        taus.push(compute_threshold(
            &learned_values(d),
            cfg.sensitivity,
            cfg.std_nonzero_only,
        )?);
    }
    prune_with(net, &ids.into_iter().zip(taus).collect::<Vec<_>>())
}

/// Prune with explicit per-layer thresholds.
pub fn prune_with(net: &mut Network, thresholds: &[(LayerId, f32)]) -> Result<SparsityReport> {
    let mut rows = Vec::with_capacity(thresholds.len());
    for &(id, tau) in thresholds {
        match net.layer_mut(id) {
            Some(Layer::DecomposedConv(d)) => {
                prune_layer(d, tau);
                let (nnz, total) = learned_counts(d);
                rows.push((id, nnz, total, tau));
            }
            _ => return Err(arg_err(format!("layer {id} is not a decomposed conv"))),
        }
    }
    Ok(SparsityReport::from_counts(rows))
}
