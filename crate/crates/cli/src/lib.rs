//! `bknet` command line: dataset ingestion, the compression pipeline and
//! report emission.

pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use bknet_core::parallel;
use bknet_core::runtime::{benchmark, count_flops};
use bknet_core::train::evaluate;
use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::error::{in_phase, CliError, Result};
use crate::pipeline::{Context, Phase, PRETRAIN_STEM};
use crate::report::{RunReport, RUN_REPORT, TABLE_CSV, WIDTHS_CSV};

#[derive(Debug, Parser)]
#[command(name = "bknet", version, about = "Kernel-basis compression of convolutional networks")]
pub struct Cli {
    /// Pipeline config (TOML); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Run directory, overriding the config's out_dir.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Master seed, overriding the config's seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Worker threads; 0 runs serially and deterministically.
    #[arg(long, global = true, env = "BK_THREADS", default_value_t = 0, value_name = "N")]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured architecture from scratch.
    Pretrain,
    /// Run decompose, retrain, prune, shrink and finetune in order.
    Compress {
        /// Input model; defaults to the run directory's pretrained model.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Resume at this phase using the run directory's checkpoints.
        #[arg(long, value_name = "PHASE", default_value = "decompose")]
        from: Phase,
    },
    /// Replace dense convs by basis kernels and coefficients.
    Decompose(PhaseArgs),
    /// Alternating basis/coefficient retraining with the l1 penalty.
    Retrain(PhaseArgs),
    /// Threshold coefficients at a multiple of each layer's deviation.
    Prune(PhaseArgs),
    /// Propagate redundant channels and physically remove them.
    Shrink(PhaseArgs),
    /// Masked fine-tuning of the pruned model.
    Finetune(PhaseArgs),
    /// Test accuracy and FLOP ledger of a model.
    Eval(PhaseArgs),
    /// Time the dense and two-stage inference paths.
    Bench {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
    /// Summary and width tables of a finished run.
    Report {
        /// Run directory; defaults to --out or the config's out_dir.
        run_dir: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
pub struct PhaseArgs {
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
}

impl Cli {
    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        let seed = self.seed.unwrap_or(cfg.seed);
        cfg = cfg.with_seed(seed);
        cfg.check()?;
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("report serialises")
}

/// Execute `cli`, printing results to stdout and progress to stderr.
pub fn run(cli: &Cli) -> Result<()> {
    parallel::set_threads(cli.threads);
    let cfg = cli.pipeline_config()?;
    match &cli.command {
        Command::Pretrain => {
            let (train, test) = dataset::load(&cfg.dataset)?;
            let (path, log) = pipeline::run_pretrain(&cfg, &train, &test)?;
            let acc = match log.last().and_then(|r| r.test_acc) {
                Some(a) => a,
                None => in_phase(
                    "pretrain",
                    evaluate(&pipeline::load(&path)?, &test, cfg.eval_batch),
                )?,
            };
            println!("{}", pretty(&json!({ "model": path, "epochs": log.len(), "test_accuracy": acc })));
        }
        Command::Compress { model, from } => {
            let model = model
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join(format!("{PRETRAIN_STEM}.bknet")));
            let (train, test) = dataset::load(&cfg.dataset)?;
            let report = pipeline::compress(&model, *from, &cfg, &train, &test)?;
            for p in &report.phases {
                eprintln!(
                    "{:<10} acc {:.4} -> {:.4}  params {}  macs {}",
                    p.phase, p.accuracy_before, p.accuracy_after, p.flops.params_total, p.flops.executed_macs
                );
            }
            print!("{}", report::table_csv(&report));
        }
        Command::Decompose(a) | Command::Retrain(a) | Command::Prune(a) | Command::Shrink(a) | Command::Finetune(a) => {
            let phase = match &cli.command {
                Command::Decompose(_) => Phase::Decompose,
                Command::Retrain(_) => Phase::Retrain,
                Command::Prune(_) => Phase::Prune,
                Command::Shrink(_) => Phase::Shrink,
                _ => Phase::Finetune,
            };
            let net = pipeline::load(&a.model)?;
            let (train, test) = dataset::load(&cfg.dataset)?;
            pipeline::check_compatible(&net, &train)?;
            fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
            let ctx = Context {
                cfg: &cfg,
                train: &train,
                test: &test,
                dir: &cfg.out_dir,
            };
            let (_, report) = pipeline::run_phase(phase, &net, &ctx)?;
            println!("{}", pretty(&report));
        }
        Command::Eval(a) => {
            let net = pipeline::load(&a.model)?;
            let (_, test) = dataset::load(&cfg.dataset)?;
            pipeline::check_compatible(&net, &test)?;
            let accuracy = in_phase("eval", evaluate(&net, &test, cfg.eval_batch))?;
            let flops = in_phase("eval", count_flops(&net))?;
            println!("{}", pretty(&json!({ "accuracy": accuracy, "flops": flops })));
        }
        Command::Bench {
            model,
            batch,
            reps,
            warmup,
        } => {
            let net = pipeline::load(model)?;
            let b = &cfg.bench;
            let report = in_phase(
                "bench",
                benchmark(
                    &net,
                    batch.unwrap_or(b.batch),
                    reps.unwrap_or(b.repetitions),
                    warmup.unwrap_or(b.warmup),
                    cfg.seed,
                ),
            )?;
            write(&cfg.out_dir.join("bench.json"), &pretty(&report))?;
            write(&cfg.out_dir.join("bench.csv"), &report.to_csv())?;
            println!("{}", pretty(&report));
        }
        Command::Report { run_dir } => {
            let dir = run_dir.clone().unwrap_or_else(|| cfg.out_dir.clone());
            let report = RunReport::load(&dir.join(RUN_REPORT))?;
            let table = report::table_csv(&report);
            write(&dir.join(TABLE_CSV), &table)?;
            print!("{table}");
            if let Some(widths) = report::widths_csv(&report) {
                write(&dir.join(WIDTHS_CSV), &widths)?;
                print!("\n{widths}");
            }
        }
    }
    Ok(())
}
