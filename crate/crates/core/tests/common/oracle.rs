use std::collections::BTreeSet;

use bknet_core::graph::DecomposedConv;
use bknet_core::{Layer, LayerId, Network};

use bknet_core::shrink::propagate;

use super::{random_sparse_net, rng, SparseNet};

pub fn decomposed(net: &Network, id: LayerId) -> &DecomposedConv {
    match net.layer(id) {
        Some(Layer::DecomposedConv(d)) => d,
        other => panic!("{id} is {other:?}"),
    }
}

struct Edge {
    id: LayerId,
    src: usize,
    dst: usize,
}

/// Dead channels per bundle by iterated dead-node elimination: a channel
/// survives while it has a live incoming connection from some producer and
/// a live outgoing connection into some consumer. The network input and
/// the logits are always live.
pub fn oracle(s: &SparseNet) -> (Vec<BTreeSet<usize>>, Vec<(LayerId, Vec<usize>, Vec<usize>)>) {
    let nb = s.widths.len();
    let mut edges: Vec<Edge> = (0..s.conv_at.len())
        .map(|i| Edge {
            id: LayerId::Main(s.conv_at[i]),
            src: s.conv_in[i],
            dst: s.conv_out[i],
        })
        .collect();
    edges.extend(s.proj.iter().map(|&(edge, a, b)| Edge {
        id: LayerId::Skip { edge, pos: 0 },
        src: a,
        dst: b,
    }));
    let connected = |e: &Edge, i: usize, j: usize| {
        let d = decomposed(&s.net, e.id);
        let dd = d.d();
        (0..dd).any(|m| d.coeffs.data()[(i * d.in_channels() + j) * dd + m] != 0.0)
    };
    let width = |b: usize| {
        edges
            .iter()
            .find_map(|e| {
                let d = decomposed(&s.net, e.id);
                if e.src == b {
                    Some(d.in_channels())
                } else if e.dst == b {
                    Some(d.out_channels())
                } else {
                    None
                }
            })
            .unwrap_or(0)
    };
    let mut alive: Vec<Vec<bool>> = (0..nb).map(|b| vec![true; width(b)]).collect();
    loop {
        let mut changed = false;
        for b in 0..nb {
            if b == 0 {
                continue;
            }
            for c in 0..alive[b].len() {
                if !alive[b][c] {
                    continue;
                }
                let has_in = edges.iter().any(|e| {
                    e.dst == b && (0..alive[e.src].len()).any(|j| alive[e.src][j] && connected(e, c, j))
                });
                let has_out = b == s.last
                    || edges.iter().any(|e| {
                        e.src == b
                            && (0..alive[e.dst].len()).any(|i| alive[e.dst][i] && connected(e, i, c))
                    });
                if !has_in || !has_out {
                    alive[b][c] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let dead: Vec<BTreeSet<usize>> = alive
        .iter()
        .map(|a| (0..a.len()).filter(|&c| !a[c]).collect())
        .collect();
    let zero_sets = edges
        .iter()
        .map(|e| {
            let d = decomposed(&s.net, e.id);
            let live = |i: usize, j: usize| alive[e.dst][i] && alive[e.src][j] && connected(e, i, j);
            let zero_out = (0..d.out_channels())
                .filter(|&i| !(0..d.in_channels()).any(|j| live(i, j)))
                .collect();
            let zero_in = (0..d.in_channels())
                .filter(|&j| !(0..d.out_channels()).any(|i| live(i, j)))
                .collect();
            (e.id, zero_in, zero_out)
        })
        .collect();
    (dead, zero_sets)
}

/// Compare the crate's propagation on `random_sparse_net(seed)` with
/// [`oracle`].
pub fn check_against_oracle(seed: u64) -> Result<(), String> {
    let s = random_sparse_net(&mut rng(seed));
    let (dead, zero_sets) = oracle(&s);
    let mut net = s.net.clone();
    let report = propagate(&mut net).map_err(|e| format!("seed {seed}: {e}"))?;
    for (id, zero_in, zero_out) in zero_sets {
        let row = report.layers.iter().find(|l| l.layer == id).ok_or(format!("seed {seed}: no row for {id}"))?;
        if row.zero_in != zero_in || row.zero_out != zero_out {
            return Err(format!(
                "seed {seed} layer {id}: P_in {:?} vs {zero_in:?}, P_out {:?} vs {zero_out:?}",
                row.zero_in, row.zero_out
            ));
        }
    }
    for (i, &id) in s.conv_at.iter().enumerate() {
        let row = report
            .layers
            .iter()
            .find(|l| l.layer == LayerId::Main(id))
            .ok_or(format!("seed {seed}: no row for conv {i}"))?;
        let got_in: BTreeSet<usize> = report.bundles[row.in_bundle].dead.iter().copied().collect();
        let got_out: BTreeSet<usize> = report.bundles[row.out_bundle].dead.iter().copied().collect();
        if got_in != dead[s.conv_in[i]] || got_out != dead[s.conv_out[i]] {
            return Err(format!("seed {seed} conv {i}: dead channels differ from the oracle"));
        }
    }
    Ok(())
}
