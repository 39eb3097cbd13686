//! Run reports, artifact hashing and the summary tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use bknet_core::decompose::LayerDecomposition;
use bknet_core::prune::SparsityReport;
use bknet_core::runtime::{BenchReport, FlopLedger};
use bknet_core::shrink::{width_table_csv, RedundancyReport, WidthRow};
use bknet_core::train::EpochRecord;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

pub const RUN_REPORT: &str = "run_report.json";
pub const TABLE_CSV: &str = "table.csv";
pub const WIDTHS_CSV: &str = "widths.csv";

/// Git blob id of `bytes`: SHA-1 over `"blob <len>\0"` and the content.
pub fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Seconds since the epoch, pinned by `SOURCE_DATE_EPOCH` when set.
pub fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse().ok())
    {
        return t;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory when inside it.
    pub path: String,
    pub sha1: String,
    pub bytes: u64,
}

impl Artifact {
    pub fn of_file(path: &Path, base: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let shown = path.strip_prefix(base).unwrap_or(path);
        Ok(Self {
            path: shown.to_string_lossy().replace('\\', "/"),
            sha1: git_blob_sha1(&data),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancySummary {
    pub iterations_to_fixpoint: usize,
    pub removed_channels: usize,
    pub removed_basis: usize,
    pub widths: Vec<WidthRow>,
}

impl RedundancySummary {
    pub fn new(r: &RedundancyReport, widths: Vec<WidthRow>) -> Self {
        Self {
            iterations_to_fixpoint: r.iterations_to_fixpoint,
            removed_channels: r.removed_channels(),
            removed_basis: r.removed_basis(),
            widths,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: String,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub flops: FlopLedger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<Vec<LayerDecomposition>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<Vec<EpochRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redundancy: Option<RedundancySummary>,
    pub checkpoint: Artifact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool: String,
    pub started: u64,
    pub finished: u64,
    pub config: PipelineConfig,
    pub input_model: Artifact,
    /// Accuracy and ledger of the input model.
    pub baseline_accuracy: f64,
    pub baseline_flops: FlopLedger,
    pub phases: Vec<PhaseReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchReport>,
    pub artifacts: Vec<Artifact>,
}

impl RunReport {
    pub fn phase(&self, name: &str) -> Option<&PhaseReport> {
        self.phases.iter().find(|p| p.phase == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

pub const TABLE_HEADER: &str = "Model,Base Acc.,Pruned Acc.,ΔAcc,Param.,R_Param,FLOPs,R_FLOPs";

/// One table line: accuracies in percent, reductions relative to the
/// baseline in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub base_acc: f64,
    pub acc: Option<f64>,
    pub params: u64,
    pub flops: u64,
}

impl TableRow {
    fn csv(&self, base: &TableRow) -> String {
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let red = |x: u64, b: u64| {
            if b == 0 {
                String::new()
            } else {
                format!("{:.2}", 100.0 * (1.0 - x as f64 / b as f64))
            }
        };
        let same = self.model == base.model;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.model,
            pct(self.base_acc),
            self.acc.map(pct).unwrap_or_default(),
            self.acc
                .map(|a| format!("{:+.2}", 100.0 * (a - self.base_acc)))
                .unwrap_or_default(),
            self.params,
            if same { String::new() } else { red(self.params, base.params) },
            self.flops,
            if same { String::new() } else { red(self.flops, base.flops) },
        )
    }
}

/// Baseline, decomposed (after retraining) and final rows.
pub fn table_rows(report: &RunReport) -> Vec<TableRow> {
    let base_acc = report.baseline_accuracy;
    let mut rows = vec![TableRow {
        model: "baseline".into(),
        base_acc,
        acc: None,
        params: report.baseline_flops.params_total,
        flops: report.baseline_flops.executed_macs,
    }];
    let row = |name: &str, p: &PhaseReport| TableRow {
        model: name.into(),
        base_acc,
        acc: Some(p.accuracy_after),
        params: p.flops.params_total,
        flops: p.flops.executed_macs,
    };
    if let Some(p) = report.phase("retrain") {
        rows.push(row("decomposed", p));
    }
    if let Some(p) = report.phases.last().filter(|p| p.phase != "retrain") {
        rows.push(row("pruned", p));
    }
    rows
}

pub fn table_csv(report: &RunReport) -> String {
    let rows = table_rows(report);
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in &rows {
        writeln!(out, "{}", r.csv(&rows[0])).unwrap();
    }
    out
}

/// Width table of the shrink phase, if the run got that far.
pub fn widths_csv(report: &RunReport) -> Option<String> {
    report
        .phase("shrink")
        .and_then(|p| p.redundancy.as_ref())
        .map(|r| width_table_csv(&r.widths))
}
