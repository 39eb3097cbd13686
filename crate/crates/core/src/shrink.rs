//! Redundancy propagation and structural shrinking.
//!
//! Channels are grouped into bundles: sets of activation channels that are
//! the same wires. Pass-through layers (ReLU, pooling, batch norm, global
//! pooling) keep their input bundle; residual sums merge the bundles of both
//! operands. Conv, decomposed conv and linear layers are the producers of
//! their output bundle and the consumers of their input bundle.
//!
//! A channel of a bundle is dead when every producer leaves it without
//! nonzero coefficients, or when every consumer ignores it. On a plain chain
//! this is the union of the producer's output set and the consumer's input
//! set; with a projection skip it intersects the two producer-side sets.
//! Dense (non-decomposed) layers never mark anything dead.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::graph::{validate, ActShape, BatchNorm, DecomposedConv, Layer, LayerId, Network};
use crate::tensor::Tensor;

/// Nonzero counts of one decomposed layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedundancyVectors {
    /// Nonzero coefficients per input channel.
    pub p_in: Vec<usize>,
    /// Nonzero coefficients per output channel.
    pub p_out: Vec<usize>,
    /// Basis rows with no nonzero coefficient.
    pub dead_basis: Vec<usize>,
}

impl RedundancyVectors {
    pub fn zero_in(&self) -> Vec<usize> {
        zeros(&self.p_in)
    }

    pub fn zero_out(&self) -> Vec<usize> {
        zeros(&self.p_out)
    }
}

fn zeros(v: &[usize]) -> Vec<usize> {
    v.iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i)
        .collect()
}

pub fn redundancy_vectors(layer: &DecomposedConv) -> RedundancyVectors {
    let (c_out, c_in, d) = (layer.out_channels(), layer.in_channels(), layer.d());
    let mut p_in = vec![0; c_in];
    let mut p_out = vec![0; c_out];
    let mut per_basis = vec![0usize; d];
    for (idx, &v) in layer.coeffs.data().iter().enumerate() {
        if v != 0.0 {
            let (i, j, m) = (idx / (c_in * d), (idx / d) % c_in, idx % d);
            p_in[j] += 1;
            p_out[i] += 1;
            per_basis[m] += 1;
        }
    }
    RedundancyVectors {
        p_in,
        p_out,
        dead_basis: zeros(&per_basis),
    }
}

/// Channel bundles of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    pub widths: Vec<usize>,
    /// Bundle of each main activation `0..=layers.len()`.
    pub act_bundle: Vec<usize>,
    /// Input and output bundle of every layer.
    pub layer_in: BTreeMap<LayerId, usize>,
    pub layer_out: BTreeMap<LayerId, usize>,
    pub producers: Vec<Vec<LayerId>>,
    pub consumers: Vec<Vec<LayerId>>,
    /// Network input and logits.
    pub pinned: Vec<bool>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut y = x;
        while self.0[y] != r {
            let next = self.0[y];
            self.0[y] = r;
            y = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

impl Topology {
    pub fn build(net: &Network) -> Result<Self> {
        let acts = net.activation_shapes()?;
        let n_layers = net.layers.len();
        let mut widths: Vec<usize> = acts.iter().map(ActShape::channels).collect();
        let mut uf = UnionFind((0..=n_layers).collect());
        let mut raw_in: Vec<(LayerId, usize)> = Vec::new();
        let mut raw_out: Vec<(LayerId, usize)> = Vec::new();

        for (edge, s) in net.skips.iter().enumerate() {
            let mut node = s.from;
            let mut shape = acts[s.from];
            for (pos, l) in s.projection.iter().enumerate() {
                let id = LayerId::Skip { edge, pos };
                let (next_shape, _) = l.infer_shape(shape);
                let out = uf.0.len();
                uf.0.push(out);
                widths.push(next_shape.channels());
                if !l.mixes_channels() {
                    uf.union(node, out);
                }
                raw_in.push((id, node));
                raw_out.push((id, out));
                node = out;
                shape = next_shape;
            }
            uf.union(node, s.to);
        }
        for (i, l) in net.layers.iter().enumerate() {
            if !l.mixes_channels() {
                uf.union(i, i + 1);
            }
            raw_in.push((LayerId::Main(i), i));
            raw_out.push((LayerId::Main(i), i + 1));
        }

        let mut canon: BTreeMap<usize, usize> = BTreeMap::new();
        let mut bundle_of = vec![0; uf.0.len()];
        for node in 0..uf.0.len() {
            let root = uf.find(node);
            let next = canon.len();
            bundle_of[node] = *canon.entry(root).or_insert(next);
        }
        let n_bundles = canon.len();
        let mut bundle_width = vec![0; n_bundles];
        for (node, &b) in bundle_of.iter().enumerate() {
            bundle_width[b] = widths[node];
        }
        let mut producers = vec![Vec::new(); n_bundles];
        let mut consumers = vec![Vec::new(); n_bundles];
        let layer_in: BTreeMap<LayerId, usize> =
            raw_in.iter().map(|&(id, n)| (id, bundle_of[n])).collect();
        let layer_out: BTreeMap<LayerId, usize> =
            raw_out.iter().map(|&(id, n)| (id, bundle_of[n])).collect();
        for id in net.layer_ids() {
            if net.layer(id).unwrap().mixes_channels() {
                producers[layer_out[&id]].push(id);
                consumers[layer_in[&id]].push(id);
            }
        }
        let mut pinned = vec![false; n_bundles];
        pinned[bundle_of[0]] = true;
        pinned[bundle_of[n_layers]] = true;
        Ok(Self {
            widths: bundle_width,
            act_bundle: bundle_of[..=n_layers].to_vec(),
            layer_in,
            layer_out,
            producers,
            consumers,
            pinned,
        })
    }

    pub fn bundles(&self) -> usize {
        self.widths.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRedundancy {
    pub layer: LayerId,
    /// Indices into [`RedundancyReport::bundles`].
    pub in_bundle: usize,
    pub out_bundle: usize,
    pub p_in: Vec<usize>,
    pub p_out: Vec<usize>,
    pub zero_in: Vec<usize>,
    pub zero_out: Vec<usize>,
    pub dead_basis: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleSet {
    pub width: usize,
    /// Redundant channels at the fixpoint.
    pub dead: Vec<usize>,
    /// Channels shrinking removes: `dead`, except that one channel is kept
    /// when every channel is dead.
    pub removed: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub layers: Vec<LayerRedundancy>,
    pub bundles: Vec<BundleSet>,
    /// Passes run, including the final pass that changed nothing.
    pub iterations_to_fixpoint: usize,
}

impl RedundancyReport {
    pub fn removed_channels(&self) -> usize {
        self.bundles.iter().map(|b| b.removed.len()).sum()
    }

    pub fn removed_basis(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.dead_basis.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.removed_channels() == 0 && self.removed_basis() == 0
    }
}

fn intersect_all(sets: impl Iterator<Item = Option<Vec<bool>>>, width: usize) -> Vec<bool> {
    let mut acc: Option<Vec<bool>> = None;
    for s in sets {
        let Some(s) = s else {
            return vec![false; width];
        };
        acc = Some(match acc {
            None => s,
            Some(a) => a.iter().zip(&s).map(|(&x, &y)| x && y).collect(),
        });
    }
    acc.unwrap_or_else(|| vec![false; width])
}

/// Per bundle: channels dead from the producer side and from the consumer
/// side.
fn dead_sides(net: &Network, topo: &Topology) -> Vec<(Vec<bool>, Vec<bool>)> {
    let vectors: BTreeMap<LayerId, RedundancyVectors> = net
        .decomposed_layers()
        .map(|(id, d)| (id, redundancy_vectors(d)))
        .collect();
    (0..topo.bundles())
        .map(|b| {
            let w = topo.widths[b];
            if topo.pinned[b] {
                return (vec![false; w], vec![false; w]);
            }
            let side = |layers: &[LayerId], pick: fn(&RedundancyVectors) -> &Vec<usize>| {
                intersect_all(
                    layers.iter().map(|id| {
                        vectors
                            .get(id)
                            .map(|v| pick(v).iter().map(|&c| c == 0).collect())
                    }),
                    w,
                )
            };
            let prod = side(&topo.producers[b], |v| &v.p_out);
            let cons = side(&topo.consumers[b], |v| &v.p_in);
            (prod, cons)
        })
        .collect()
}

fn combine(sides: &[(Vec<bool>, Vec<bool>)]) -> Vec<Vec<bool>> {
    sides
        .iter()
        .map(|(p, c)| p.iter().zip(c).map(|(&a, &b)| a || b).collect())
        .collect()
}

/// Zero (and mask) every coefficient touching a dead channel. Returns
/// whether anything changed.
fn zero_dead(net: &mut Network, topo: &Topology, dead: &[Vec<bool>]) -> bool {
    let mut changed = false;
    for id in net.layer_ids() {
        let (bi, bo) = (topo.layer_in[&id], topo.layer_out[&id]);
        let Some(Layer::DecomposedConv(d)) = net.layer_mut(id) else {
            continue;
        };
        let (c_in, dd) = (d.in_channels(), d.d());
        let data = d.coeffs.data_mut();
        for (idx, v) in data.iter_mut().enumerate() {
            let (i, j) = (idx / (c_in * dd), (idx / dd) % c_in);
            if (dead[bo][i] || dead[bi][j]) && *v != 0.0 {
                *v = 0.0;
                changed = true;
            }
        }
        if let Some(mask) = d.mask.as_mut() {
            for (idx, m) in mask.iter_mut().enumerate() {
                let (i, j) = (idx / (c_in * dd), (idx / dd) % c_in);
                if dead[bo][i] || dead[bi][j] {
                    *m = false;
                }
            }
        }
        if changed {
            d.apply_mask();
        }
    }
    changed
}

/// Propagate redundancy to a fixpoint, zeroing implied coefficients in
/// `net` along the way.
pub fn propagate(net: &mut Network) -> Result<RedundancyReport> {
    propagate_with(net, &ShrinkConfig::default())
}

pub fn propagate_with(net: &mut Network, cfg: &ShrinkConfig) -> Result<RedundancyReport> {
    let topo = Topology::build(net)?;
    let limit = topo.widths.iter().sum::<usize>() + 2;
    let mut iterations = 0;
    let mut seen: Vec<Vec<bool>> = topo.widths.iter().map(|&w| vec![false; w]).collect();
    let dead = loop {
        iterations += 1;
        if iterations > limit {
            return Err(Error::NoFixpoint { limit });
        }
        let sides = dead_sides(net, &topo);
        let dead = combine(&sides);
        if cfg.fold_bias {
            for (b, (prod, _)) in sides.iter().enumerate() {
                let fresh: Vec<usize> = (0..prod.len())
                    .filter(|&c| prod[c] && !seen[b][c])
                    .collect();
                if !fresh.is_empty() {
                    fold_channels(net, &topo, b, &fresh)?;
                }
            }
        }
        seen.clone_from(&dead);
        if !zero_dead(net, &topo, &dead) && dead == combine(&dead_sides(net, &topo)) {
            break dead;
        }
    };

    let layers = net
        .decomposed_layers()
        .map(|(id, d)| {
            let v = redundancy_vectors(d);
            let mut dead_basis = v.dead_basis.clone();
            dead_basis.retain(|&m| !(d.mean_row && m == d.d() - 1));
            if dead_basis.len() == d.d() {
                dead_basis.remove(0);
            }
            LayerRedundancy {
                layer: id,
                in_bundle: topo.layer_in[&id],
                out_bundle: topo.layer_out[&id],
                zero_in: v.zero_in(),
                zero_out: v.zero_out(),
                p_in: v.p_in,
                p_out: v.p_out,
                dead_basis,
            }
        })
        .collect();
    let bundles = dead
        .iter()
        .zip(&topo.widths)
        .map(|(flags, &width)| {
            let dead: Vec<usize> = zeros(&flags.iter().map(|&f| usize::from(!f)).collect::<Vec<_>>());
            let mut removed = dead.clone();
            if removed.len() == width && width > 0 {
                removed.remove(0);
            }
            BundleSet {
                width,
                dead,
                removed,
            }
        })
        .collect();
    Ok(RedundancyReport {
        layers,
        bundles,
        iterations_to_fixpoint: iterations,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShrinkConfig {
    /// During propagation, fold the constant value of channels that lose
    /// all inputs into downstream biases (exact on interior pixels only).
    pub fold_bias: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthRow {
    pub layer: LayerId,
    pub width_before: usize,
    pub width_after: usize,
    pub d_before: Option<usize>,
    pub d_after: Option<usize>,
    pub nnz: Option<usize>,
}

pub const WIDTH_TABLE_HEADER: &str = "layer,width_before,width_after,d_before,d_after,nnz";

pub fn width_table_csv(rows: &[WidthRow]) -> String {
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(WIDTH_TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.layer,
            r.width_before,
            r.width_after,
            opt(r.d_before),
            opt(r.d_after),
            opt(r.nnz)
        );
    }
    out
}

fn keep_list(width: usize, removed: &[usize]) -> Vec<usize> {
    (0..width).filter(|c| removed.binary_search(c).is_err()).collect()
}

fn gather<T: Copy>(v: &[T], keep: &[usize]) -> Vec<T> {
    keep.iter().map(|&i| v[i]).collect()
}

/// Slice a `(a, b, rest)` row-major block to `keep_a x keep_b x keep_rest`.
fn slice3(data: &[f32], dims: [usize; 3], keep: [&[usize]; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(keep[0].len() * keep[1].len() * keep[2].len());
    for &a in keep[0] {
        for &b in keep[1] {
            let base = (a * dims[1] + b) * dims[2];
            out.extend(keep[2].iter().map(|&r| data[base + r]));
        }
    }
    out
}

fn slice3_bool(data: &[bool], dims: [usize; 3], keep: [&[usize]; 3]) -> Vec<bool> {
    let mut out = Vec::new();
    for &a in keep[0] {
        for &b in keep[1] {
            let base = (a * dims[1] + b) * dims[2];
            out.extend(keep[2].iter().map(|&r| data[base + r]));
        }
    }
    out
}

/// Remove every channel and basis row named in `report`. Returns the
/// shrunk network and the per-layer width table.
pub fn shrink(net: &Network, report: &RedundancyReport) -> Result<(Network, Vec<WidthRow>)> {
    let topo = Topology::build(net)?;
    if report.bundles.len() != topo.bundles()
        || report
            .bundles
            .iter()
            .zip(&topo.widths)
            .any(|(b, &w)| b.width != w)
    {
        return Err(arg_err("redundancy report does not belong to this network"));
    }
    let keep: Vec<Vec<usize>> = report
        .bundles
        .iter()
        .map(|b| keep_list(b.width, &b.removed))
        .collect();
    let dead_basis: BTreeMap<LayerId, &Vec<usize>> =
        report.layers.iter().map(|l| (l.layer, &l.dead_basis)).collect();

    let mut out = net.clone();
    let mut rows = Vec::new();
    for id in net.layer_ids() {
        let (ki, ko) = (&keep[topo.layer_in[&id]], &keep[topo.layer_out[&id]]);
        let layer = out.layer_mut(id).unwrap();
        match layer {
            Layer::Conv(c) => {
                let (co, ci, k) = (c.out_channels(), c.in_channels(), c.kernel());
                let kk: Vec<usize> = (0..k * k).collect();
                let w = slice3(c.weight.data(), [co, ci, k * k], [ko, ki, &kk]);
                c.weight = Tensor::new(&[ko.len(), ki.len(), k, k], w)?;
                c.bias = c.bias.as_ref().map(|b| gather(b, ko));
                rows.push(WidthRow {
                    layer: id,
                    width_before: co,
                    width_after: ko.len(),
                    d_before: None,
                    d_after: None,
                    nnz: None,
                });
            }
            Layer::DecomposedConv(d) => {
                let (co, ci, dd) = (d.out_channels(), d.in_channels(), d.d());
                let empty = Vec::new();
                let gone = dead_basis.get(&id).copied().unwrap_or(&empty);
                let km: Vec<usize> = (0..dd).filter(|m| !gone.contains(m)).collect();
                let k2 = d.kernel * d.kernel;
                let basis: Vec<f32> = km
                    .iter()
                    .flat_map(|&m| d.basis.data()[m * k2..(m + 1) * k2].to_vec())
                    .collect();
                let coeffs = slice3(d.coeffs.data(), [co, ci, dd], [ko, ki, &km]);
                d.mask = d.mask.as_ref().map(|m| slice3_bool(m, [co, ci, dd], [ko, ki, &km]));
                d.basis = Tensor::new(&[km.len(), k2], basis)?;
                d.coeffs = Tensor::new(&[ko.len(), ki.len(), km.len()], coeffs)?;
                d.bias = d.bias.as_ref().map(|b| gather(b, ko));
                let nnz = d.coeffs.data().iter().filter(|&&v| v != 0.0).count();
                rows.push(WidthRow {
                    layer: id,
                    width_before: co,
                    width_after: ko.len(),
                    d_before: Some(dd),
                    d_after: Some(km.len()),
                    nnz: Some(nnz),
                });
            }
            Layer::Linear(l) => {
                let (o, f) = (l.out_features(), l.in_features());
                let w = slice3(l.weight.data(), [o, f, 1], [ko, ki, &[0]]);
                l.weight = Tensor::new(&[ko.len(), ki.len()], w)?;
                l.bias = l.bias.as_ref().map(|b| gather(b, ko));
            }
            Layer::BatchNorm(bn) => {
                *bn = BatchNorm {
                    scale: gather(&bn.scale, ki),
                    shift: gather(&bn.shift, ki),
                    running_mean: gather(&bn.running_mean, ki),
                    running_var: gather(&bn.running_var, ki),
                    eps: bn.eps,
                    momentum: bn.momentum,
                };
            }
            _ => {}
        }
    }
    let diags = validate(&out);
    if !diags.is_empty() {
        return Err(Error::Invalid(diags));
    }
    Ok((out, rows))
}

/// Fold the constant value that producer-dead `channels` of bundle `b`
/// carry into each consumer's bias as `value * sum(kernel)`, then clear the
/// producer bias. Only bundles with a single main-chain producer are folded.
fn fold_channels(net: &mut Network, topo: &Topology, b: usize, channels: &[usize]) -> Result<()> {
    if topo.producers[b].len() != 1 {
        return Ok(());
    }
    let LayerId::Main(p) = topo.producers[b][0] else {
        return Ok(());
    };
    let bias = match &net.layers[p] {
        Layer::Conv(c) => c.bias.clone(),
        Layer::DecomposedConv(d) => d.bias.clone(),
        Layer::Linear(l) => l.bias.clone(),
        _ => None,
    };
    let Some(bias) = bias else { return Ok(()) };
    // constant per channel at each activation along the pass-through chain
    let mut value: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
    let mut a = p + 1;
    let mut cur = bias;
    loop {
        value.insert(a, cur.clone());
        if a >= net.layers.len() || net.layers[a].mixes_channels() || net.skip_into(a).is_some() {
            break;
        }
        cur = match &net.layers[a] {
            Layer::Relu => cur.iter().map(|v| v.max(0.0)).collect(),
            Layer::BatchNorm(bn) => cur
                .iter()
                .enumerate()
                .map(|(c, &v)| {
                    (v - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt() * bn.scale[c]
                        + bn.shift[c]
                })
                .collect(),
            _ => cur,
        };
        a += 1;
    }
    for &cid in &topo.consumers[b] {
        let src = match cid {
            LayerId::Main(i) => i,
            LayerId::Skip { edge, .. } => net.skips[edge].from,
        };
        let Some(vals) = value.get(&src).cloned() else { continue };
        let (weight, bias) = match net.layer_mut(cid).unwrap() {
            Layer::Conv(c) => (c.weight.clone(), &mut c.bias),
            Layer::DecomposedConv(d) => (d.reconstruct(), &mut d.bias),
            Layer::Linear(l) => {
                let (o, f) = (l.out_features(), l.in_features());
                (l.weight.clone().reshape(&[o, f, 1, 1])?, &mut l.bias)
            }
            _ => continue,
        };
        let (co, ci) = (weight.dim(0), weight.dim(1));
        let k2 = weight.len() / (co * ci).max(1);
        let out_bias = bias.get_or_insert_with(|| vec![0.0; co]);
        for (i, bi) in out_bias.iter_mut().enumerate() {
            for &j in channels {
                let base = (i * ci + j) * k2;
                let ksum: f32 = weight.data()[base..base + k2].iter().sum();
                *bi += vals[j] * ksum;
            }
        }
    }
    let producer_bias = match &mut net.layers[p] {
        Layer::Conv(c) => c.bias.as_mut(),
        Layer::DecomposedConv(d) => d.bias.as_mut(),
        Layer::Linear(l) => l.bias.as_mut(),
        _ => None,
    };
    if let Some(pb) = producer_bias {
        for &c in channels {
            pb[c] = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectors_count_slices() {
        let mut d = DecomposedConv {
            basis: Tensor::full(&[2, 1], 1.0),
            coeffs: Tensor::from_fn(&[2, 3, 2], |i| (i % 5) as f32),
            bias: None,
            kernel: 1,
            stride: 1,
            padding: 0,
            mask: None,
            mean_row: false,
        };
        // entries: 0 1 2 3 4 0 | 1 2 3 4 0 1
        let v = redundancy_vectors(&d);
        assert_eq!(v.p_out, vec![4, 5]);
        assert_eq!(v.p_in, vec![3, 4, 2]);
        assert!(v.dead_basis.is_empty());
        for i in 0..2 {
            for m in 0..2 {
                d.coeffs.data_mut()[(i * 3 + 1) * 2 + m] = 0.0;
            }
        }
        assert_eq!(redundancy_vectors(&d).zero_in(), vec![1]);
    }
}
