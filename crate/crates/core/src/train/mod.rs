//! SGD training of dense baselines, alternating basis/coefficient retraining
//! with an l1 penalty, and masked fine-tuning.

mod backward;
mod optim;

pub use backward::{basis_coeff_grads, Group, NetGrads, ParamGrads};
pub use optim::Sgd;

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Augment, Dataset};
use crate::error::{arg_err, Error, Result};
use crate::graph::{forward, run, DecomposedConv, Mode, Network};
use crate::tensor::Tensor;

/// Magnitude below which a coefficient counts as sparse in epoch logs.
pub const SPARSITY_TOL: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Learning rate times 0.1 at 50% and again at 75% of the epochs.
    Step,
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// l1 strength on coefficients.
    pub gamma: f32,
    pub base_lr: f32,
    pub schedule: Schedule,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs per frozen phase.
    pub alternation_interval: usize,
    pub start_group: Group,
    pub seed: u64,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-4,
            base_lr: 0.1,
            schedule: Schedule::Step,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 100,
            alternation_interval: 5,
            start_group: Group::Basis,
            seed: 0,
            augment: Augment::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(arg_err("gamma must be non-negative"));
        }
        if self.alternation_interval == 0 {
            return Err(arg_err("alternation_interval must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(arg_err("batch_size must be at least 1"));
        }
        if !(self.base_lr >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(arg_err("learning rate, momentum and weight decay must be non-negative"));
        }
        if self.start_group == Group::Joint {
            return Err(arg_err("start_group must be basis or coefficients"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f32 {
        match self.schedule {
            Schedule::Constant => self.base_lr,
            Schedule::Step => {
                let drops = [self.epochs / 2, self.epochs * 3 / 4]
                    .iter()
                    .filter(|&&m| epoch >= m)
                    .count();
                self.base_lr * 0.1f32.powi(drops as i32)
            }
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                (self.base_lr as f64 * 0.5 * (1.0 + (PI * t).cos())) as f32
            }
        }
    }

    /// Group trained in `epoch` under the alternation schedule.
    pub fn group_at(&self, epoch: usize) -> Group {
        if (epoch / self.alternation_interval) % 2 == 0 {
            self.start_group
        } else {
            self.start_group.other()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data_loss: f64,
    pub l1_term: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub active_group: Group,
    pub data_loss: f64,
    pub l1_term: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// Fraction of learned coefficients with `|a| < 1e-3` after the epoch.
    pub coeff_sparsity: f64,
}

pub const EPOCH_LOG_HEADER: &str =
    "epoch,active_group,data_loss,l1_term,train_acc,test_acc,coeff_sparsity";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.active_group.name(),
            self.data_loss,
            self.l1_term,
            self.train_acc,
            self.test_acc.map(|a| a.to_string()).unwrap_or_default(),
            self.coeff_sparsity
        )
    }
}

pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Mean softmax cross-entropy, its gradient with respect to the logits and
/// the number of correct top-1 predictions.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, usize)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(crate::error::shape_err(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, c) = (logits.dim(0), logits.dim(1));
    let mut grad = vec![0.0f32; n * c];
    let mut loss = 0.0f64;
    let mut correct = 0;
    for (s, (row, &y)) in logits.data().chunks_exact(c).zip(labels).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[y] as f64;
        if argmax(row) == y {
            correct += 1;
        }
        for (j, e) in exps.iter().enumerate() {
            let p = e / z - f64::from(u8::from(j == y));
            grad[s * c + j] = (p / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, Tensor::new(&[n, c], grad)?, correct))
}

/// Index of the first maximum.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `gamma * sum |a|` over learned coefficients of every decomposed layer.
pub fn l1_term(net: &Network, gamma: f32) -> f64 {
    let s: f64 = net
        .decomposed_layers()
        .map(|(_, d)| learned_abs_sum(d))
        .sum();
    gamma as f64 * s
}

fn learned_abs_sum(d: &DecomposedConv) -> f64 {
    d.coeffs
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| d.is_learned_coeff(*i))
        .map(|(_, v)| v.abs() as f64)
        .sum()
}

/// Top-1 accuracy in eval mode.
pub fn evaluate(net: &Network, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for idx in batches(data.len(), batch_size, None) {
        let (x, y) = data.batch(&idx);
        let logits = forward(net, &x)?;
        let c = logits.dim(1);
        correct += logits
            .data()
            .chunks_exact(c)
            .zip(&y)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean cross-entropy of one batch and the gradients of every parameter.
/// Batch-norm running statistics are left untouched.
pub fn loss_gradients(
    net: &Network,
    images: &Tensor,
    labels: &[usize],
    mode: Mode,
) -> Result<(f64, NetGrads)> {
    let trace = run(net, images, mode)?;
    let (loss, grad, _) = cross_entropy(trace.logits(), labels)?;
    Ok((loss, backward::backward(net, &trace, grad)?))
}

/// Optimiser and RNG state carried across epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    pub sgd: Sgd,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.check()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            sgd: Sgd::new(cfg.momentum, cfg.weight_decay),
            cfg,
            log: Vec::new(),
        })
    }
}

/// One pass of SGD with momentum over `train`, updating only `group`
/// (dense layers, biases and batch norm always train). Appends and returns
/// the epoch record.
pub fn train_epoch(
    net: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    state: &mut TrainState,
    epoch: usize,
    group: Group,
) -> Result<EpochRecord> {
    let cfg = state.cfg.clone();
    let lr = cfg.lr_at(epoch);
    let mut seen = 0usize;
    let mut correct = 0usize;
    let mut data_loss = 0.0f64;
    let mut l1 = 0.0f64;
    for (b, idx) in batches(train.len(), cfg.batch_size, Some(&mut state.rng))
        .into_iter()
        .enumerate()
    {
        let (mut x, y) = train.batch(&idx);
        cfg.augment.apply(&mut x, &mut state.rng);
        let trace = run(net, &x, Mode::Train)?;
        let (loss, grad, hits) = cross_entropy(trace.logits(), &y)?;
        let batch_l1 = l1_term(net, cfg.gamma);
        if !loss.is_finite() || !batch_l1.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: b,
                value: (loss + batch_l1) as f32,
            });
        }
        let grads = backward::backward(net, &trace, grad)?;
        trace.update_running_stats(net);
        state.sgd.step(net, &grads, lr, cfg.gamma, group)?;

        let n = idx.len();
        seen += n;
        correct += hits;
        data_loss += loss * n as f64;
        l1 += batch_l1 * n as f64;
    }
    let denom = seen.max(1) as f64;
    let record = EpochRecord {
        epoch,
        active_group: group,
        data_loss: data_loss / denom,
        l1_term: l1 / denom,
        train_acc: correct as f64 / denom,
        test_acc: test.map(|t| evaluate(net, t, cfg.batch_size)).transpose()?,
        coeff_sparsity: net.coefficient_fraction_below(SPARSITY_TOL),
    };
    state.log.push(record.clone());
    Ok(record)
}

/// Train every parameter jointly for `cfg.epochs` epochs.
pub fn pretrain(
    net: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    let mut state = TrainState::new(cfg.clone())?;
    for epoch in 0..cfg.epochs {
        train_epoch(net, train, test, &mut state, epoch, Group::Joint)?;
    }
    Ok(state.log)
}

/// Alternate between basis and coefficient phases every
/// `alternation_interval` epochs, starting with `start_group`.
pub fn retrain(
    net: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    if !net.has_decomposed() {
        return Err(arg_err("retraining needs at least one decomposed layer"));
    }
    let mut state = TrainState::new(cfg.clone())?;
    for epoch in 0..cfg.epochs {
        train_epoch(net, train, test, &mut state, epoch, cfg.group_at(epoch))?;
    }
    Ok(state.log)
}

/// Joint training without l1; masked coefficients stay exactly zero.
pub fn finetune_masked(
    net: &mut Network,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    let missing = net.decomposed_layers().any(|(_, d)| d.mask.is_none());
    if !net.has_decomposed() || missing {
        return Err(arg_err("fine-tuning needs pruned decomposed layers"));
    }
    let cfg = TrainConfig {
        gamma: 0.0,
        ..cfg.clone()
    };
    let mut state = TrainState::new(cfg.clone())?;
    for epoch in 0..cfg.epochs {
        train_epoch(net, train, test, &mut state, epoch, Group::Joint)?;
    }
    Ok(state.log)
}
