//! The compression pipeline: decompose, retrain, prune, shrink, finetune.
//!
//! Every phase writes `NN-<phase>.bknet` and `NN-<phase>.json` (its
//! [`PhaseReport`]) into the run directory; training phases also write an
//! epoch log `NN-<phase>.csv`. A run can resume from any phase whose
//! predecessor checkpoint exists.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bknet_core::arch;
use bknet_core::data::Dataset;
use bknet_core::decompose::decompose_network;
use bknet_core::graph::format::{load_model, save_model};
use bknet_core::graph::validate;
use bknet_core::prune::prune;
use bknet_core::runtime::{benchmark, count_flops};
use bknet_core::shrink::{propagate_with, shrink};
use bknet_core::train::{epoch_log_csv, evaluate, finetune_masked, pretrain, retrain, EpochRecord};
use bknet_core::{Error, Network};

use crate::config::PipelineConfig;
use crate::error::{in_phase, CliError, Result};
use crate::report::{
    timestamp, Artifact, PhaseReport, RedundancySummary, RunReport, RUN_REPORT, WIDTHS_CSV,
};

pub const PRETRAIN_STEM: &str = "00-pretrain";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Decompose,
    Retrain,
    Prune,
    Shrink,
    Finetune,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Phase::Decompose,
        Phase::Retrain,
        Phase::Prune,
        Phase::Shrink,
        Phase::Finetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Decompose => "decompose",
            Phase::Retrain => "retrain",
            Phase::Prune => "prune",
            Phase::Shrink => "shrink",
            Phase::Finetune => "finetune",
        }
    }

    pub fn index(self) -> usize {
        self as usize + 1
    }

    pub fn stem(self) -> String {
        format!("{:02}-{}", self.index(), self.name())
    }

    pub fn checkpoint(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.bknet", self.stem()))
    }

    pub fn report_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.json", self.stem()))
    }

    pub fn log_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.csv", self.stem()))
    }

    pub fn previous(self) -> Option<Phase> {
        Phase::ALL.get(self.index().checked_sub(2)?).copied()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                format!(
                    "unknown phase {s:?} (expected one of {})",
                    Phase::ALL.map(|p| p.name()).join(", ")
                )
            })
    }
}

pub struct Context<'a> {
    pub cfg: &'a PipelineConfig,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub dir: &'a Path,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn save(net: &Network, path: &Path) -> Result<()> {
    save_model(net, path).map_err(|e| match e {
        Error::Io(source) => CliError::io(path, source),
        other => other.into(),
    })
}

/// Load a model file and check it validates.
pub fn load(path: &Path) -> Result<Network> {
    let net = load_model(path).map_err(|e| match e {
        Error::Io(source) => CliError::io(path, source),
        other => other.into(),
    })?;
    let diags = validate(&net);
    if !diags.is_empty() {
        return Err(Error::Invalid(diags).into());
    }
    Ok(net)
}

/// Check the model fits the dataset.
pub fn check_compatible(net: &Network, data: &Dataset) -> Result<()> {
    if net.input_shape != data.sample_shape() || net.num_classes != data.num_classes {
        return Err(CliError::Config(format!(
            "model takes {:?} inputs with {} classes, dataset has {:?} with {}",
            net.input_shape,
            net.num_classes,
            data.sample_shape(),
            data.num_classes
        )));
    }
    Ok(())
}

/// Run one phase on `net`, writing its checkpoint, log and report.
pub fn run_phase(phase: Phase, net: &Network, ctx: &Context) -> Result<(Network, PhaseReport)> {
    let cfg = ctx.cfg;
    let name = phase.name();
    let eval = |n: &Network| in_phase(name, evaluate(n, ctx.test, cfg.eval_batch));
    let accuracy_before = eval(net)?;
    let mut out = net.clone();
    let mut decomposition = None;
    let mut epochs: Option<Vec<EpochRecord>> = None;
    let mut sparsity = None;
    let mut redundancy = None;
    match phase {
        Phase::Decompose => {
            let (n, r) = in_phase(name, decompose_network(net, &cfg.decompose))?;
            if r.is_empty() {
                return Err(CliError::Phase {
                    phase: name,
                    source: Error::InvalidArgument("model has no dense conv layers to decompose".into()),
                });
            }
            out = n;
            decomposition = Some(r);
        }
        Phase::Retrain => {
            epochs = Some(in_phase(name, retrain(&mut out, ctx.train, Some(ctx.test), &cfg.retrain))?);
        }
        Phase::Prune => {
            sparsity = Some(in_phase(name, prune(&mut out, &cfg.prune))?);
        }
        Phase::Shrink => {
            let report = in_phase(name, propagate_with(&mut out, &cfg.shrink))?;
            let (n, widths) = in_phase(name, shrink(&out, &report))?;
            out = n;
            let summary = RedundancySummary::new(&report, widths);
            write(
                &ctx.dir.join(WIDTHS_CSV),
                &bknet_core::shrink::width_table_csv(&summary.widths),
            )?;
            redundancy = Some(summary);
        }
        Phase::Finetune => {
            epochs = Some(in_phase(
                name,
                finetune_masked(&mut out, ctx.train, Some(ctx.test), &cfg.finetune),
            )?);
        }
    }
    if let Some(log) = &epochs {
        write(&phase.log_path(ctx.dir), &epoch_log_csv(log))?;
    }
    let ckpt = phase.checkpoint(ctx.dir);
    save(&out, &ckpt)?;
    let report = PhaseReport {
        phase: name.into(),
        accuracy_before,
        accuracy_after: eval(&out)?,
        flops: in_phase(name, count_flops(&out))?,
        decomposition,
        epochs,
        sparsity,
        redundancy,
        checkpoint: Artifact::of_file(&ckpt, ctx.dir)?,
    };
    write(
        &phase.report_path(ctx.dir),
        &serde_json::to_string_pretty(&report).expect("phase report serialises"),
    )?;
    Ok((out, report))
}

fn load_phase_report(phase: Phase, dir: &Path) -> Result<PhaseReport> {
    let path = phase.report_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Every file the run wrote, hashed.
fn collect_artifacts(dir: &Path, upto: Phase) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    for p in Phase::ALL.into_iter().filter(|&p| p <= upto) {
        files.push(p.checkpoint(dir));
        files.push(p.report_path(dir));
        if matches!(p, Phase::Retrain | Phase::Finetune) {
            files.push(p.log_path(dir));
        }
        if p == Phase::Shrink {
            files.push(dir.join(WIDTHS_CSV));
        }
    }
    files.iter().map(|f| Artifact::of_file(f, dir)).collect()
}

/// Run the pipeline on `model_in`, starting at `from`. Phases before `from`
/// are taken from the run directory.
pub fn compress(
    model_in: &Path,
    from: Phase,
    cfg: &PipelineConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunReport> {
    let started = timestamp();
    let dir = cfg.out_dir.as_path();
    create_dir(dir)?;
    let input = load(model_in)?;
    check_compatible(&input, train)?;
    let ctx = Context {
        cfg,
        train,
        test,
        dir,
    };

    let mut phases = Vec::new();
    for p in Phase::ALL.into_iter().filter(|&p| p < from) {
        phases.push(load_phase_report(p, dir)?);
    }
    let mut net = match from.previous() {
        None => input.clone(),
        Some(prev) => load(&prev.checkpoint(dir))?,
    };
    for phase in Phase::ALL.into_iter().filter(|&p| p >= from) {
        let (n, r) = run_phase(phase, &net, &ctx)?;
        net = n;
        phases.push(r);
    }

    let bench = if cfg.bench.enabled {
        Some(in_phase(
            "bench",
            benchmark(&net, cfg.bench.batch, cfg.bench.repetitions, cfg.bench.warmup, cfg.seed),
        )?)
    } else {
        None
    };
    let report = RunReport {
        tool: format!("bknet {}", env!("CARGO_PKG_VERSION")),
        started,
        finished: timestamp(),
        config: cfg.clone(),
        input_model: Artifact::of_file(model_in, dir)?,
        baseline_accuracy: in_phase("decompose", evaluate(&input, test, cfg.eval_batch))?,
        baseline_flops: in_phase("decompose", count_flops(&input))?,
        phases,
        benchmark: bench,
        artifacts: collect_artifacts(dir, Phase::Finetune)?,
    };
    write(
        &dir.join(RUN_REPORT),
        &serde_json::to_string_pretty(&report).expect("run report serialises"),
    )?;
    Ok(report)
}

/// Train a fresh preset on the dataset and save `00-pretrain.bknet` with its
/// epoch log. Zero epochs saves the initialised model.
pub fn run_pretrain(cfg: &PipelineConfig, train: &Dataset, test: &Dataset) -> Result<(PathBuf, Vec<EpochRecord>)> {
    let dir = cfg.out_dir.as_path();
    create_dir(dir)?;
    let mut net = arch::preset(
        &cfg.model.arch,
        train.sample_shape(),
        train.num_classes,
        cfg.seed,
    )?;
    let log = in_phase("pretrain", pretrain(&mut net, train, Some(test), &cfg.pretrain))?;
    let path = dir.join(format!("{PRETRAIN_STEM}.bknet"));
    save(&net, &path)?;
    write(&dir.join(format!("{PRETRAIN_STEM}.csv")), &epoch_log_csv(&log))?;
    Ok((path, log))
}
