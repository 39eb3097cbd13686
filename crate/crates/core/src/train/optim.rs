use std::collections::BTreeMap;

use super::backward::{basis_coeff_grads, Group, NetGrads, ParamGrads};
use crate::error::{shape_err, Result};
use crate::graph::{Layer, LayerId, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Slot {
    Weight,
    Bias,
    Basis,
    Coeffs,
    Scale,
    Shift,
}

/// SGD with momentum: `v <- mu * v + g + wd * p`, `p <- p - lr * v`.
///
/// Weight decay applies to basis, dense weights, biases and batch-norm
/// scale; coefficients and batch-norm shift are exempt.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<(LayerId, Slot), Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    fn update(
        &mut self,
        key: (LayerId, Slot),
        params: &mut [f32],
        grad: &[f32],
        lr: f32,
        decay: bool,
        frozen: impl Fn(usize) -> bool,
    ) -> Result<()> {
        if params.len() != grad.len() {
            return Err(shape_err(format!(
                "layer {} gradient has {} entries for {} parameters",
                key.0,
                grad.len(),
                params.len()
            )));
        }
        let mu = self.momentum;
        let wd = if decay { self.weight_decay } else { 0.0 };
        let v = self
            .velocity
            .entry(key)
            .or_insert_with(|| vec![0.0; params.len()]);
        for (i, ((p, &g), v)) in params.iter_mut().zip(grad).zip(v.iter_mut()).enumerate() {
            if frozen(i) {
                *v = 0.0;
                continue;
            }
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
        Ok(())
    }

    fn update_bias(
        &mut self,
        id: LayerId,
        bias: &mut Option<Vec<f32>>,
        grad: &[f32],
        lr: f32,
    ) -> Result<()> {
        match bias {
            Some(b) => self.update((id, Slot::Bias), b, grad, lr, true, |_| false),
            None => Ok(()),
        }
    }

    /// Apply one step for every layer gradient in `grads`.
    pub fn step(
        &mut self,
        net: &mut Network,
        grads: &NetGrads,
        lr: f32,
        gamma: f32,
        group: Group,
    ) -> Result<()> {
        for id in net.layer_ids() {
            let pg = match id {
                LayerId::Main(i) => &grads.main[i],
                LayerId::Skip { edge, pos } => match grads.skips[edge].get(pos) {
                    Some(pg) => pg,
                    None => continue,
                },
            };
            let layer = net.layer_mut(id).unwrap();
            match (layer, pg) {
                (_, ParamGrads::None) => {}
                (Layer::Conv(c), ParamGrads::Conv { weight, bias }) => {
                    self.update((id, Slot::Weight), c.weight.data_mut(), weight.data(), lr, true, |_| false)?;
                    self.update_bias(id, &mut c.bias, bias, lr)?;
                }
                (Layer::DecomposedConv(d), ParamGrads::Conv { weight, bias }) => {
                    let (gb, ga) = basis_coeff_grads(
                        &d.basis,
                        &d.coeffs,
                        d.mask.as_deref(),
                        d.mean_row,
                        weight,
                        gamma,
                        group,
                    )?;
                    let k2 = d.kernel * d.kernel;
                    let learned = d.learned_d();
                    let dd = d.d();
                    if group.trains_basis() {
                        self.update((id, Slot::Basis), d.basis.data_mut(), gb.data(), lr, true, |i| {
                            i >= learned * k2
                        })?;
                    }
                    if group.trains_coeffs() {
                        let mask = d.mask.clone();
                        self.update((id, Slot::Coeffs), d.coeffs.data_mut(), ga.data(), lr, false, |i| {
                            i % dd >= learned || mask.as_ref().is_some_and(|m| !m[i])
                        })?;
                        d.apply_mask();
                    }
                    self.update_bias(id, &mut d.bias, bias, lr)?;
                }
                (Layer::Linear(l), ParamGrads::Linear { weight, bias }) => {
                    self.update((id, Slot::Weight), l.weight.data_mut(), weight.data(), lr, true, |_| false)?;
                    self.update_bias(id, &mut l.bias, bias, lr)?;
                }
                (Layer::BatchNorm(bn), ParamGrads::BatchNorm { scale, shift }) => {
                    self.update((id, Slot::Scale), &mut bn.scale, scale, lr, true, |_| false)?;
                    self.update((id, Slot::Shift), &mut bn.shift, shift, lr, false, |_| false)?;
                }
                (layer, _) => {
                    return Err(shape_err(format!(
                        "gradient kind does not match {} layer {id}",
                        layer.kind()
                    )))
                }
            }
        }
        Ok(())
    }
}
