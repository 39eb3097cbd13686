use std::fmt::Write as _;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{compile_as, Variant};
use crate::error::{arg_err, Result};
use crate::graph::Network;
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: String,
    pub batch: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub stage1_ms: f64,
    pub stage2_ms: f64,
    pub peak_mb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub machine: String,
    pub threads: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub rows: Vec<BenchRow>,
}

pub const BENCH_CSV_HEADER: &str = "variant,batch,median_ms,p95_ms,stage1_ms,stage2_ms,peak_mb";

impl BenchReport {
    pub fn row(&self, variant: Variant) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.variant == variant.name())
    }

    /// Dense median over two-stage median.
    pub fn speedup(&self) -> Option<f64> {
        Some(self.row(Variant::Dense)?.median_ms / self.row(Variant::TwoStage)?.median_ms)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(BENCH_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.variant, r.batch, r.median_ms, r.p95_ms, r.stage1_ms, r.stage2_ms, r.peak_mb
            );
        }
        out
    }
}

/// Middle sample; mean of the two middle samples for even counts.
pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => s[n / 2],
        _ => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

/// Nearest-rank 95th percentile.
pub fn p95(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return f64::NAN;
    }
    let rank = ((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

fn machine() -> String {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} ({cores} cores)", std::env::consts::ARCH, std::env::consts::OS)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Time the dense and two-stage forms of `net` on one random batch.
pub fn benchmark(
    net: &Network,
    batch: usize,
    repetitions: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    if repetitions < 5 {
        return Err(arg_err("benchmark needs at least 5 repetitions"));
    }
    if batch == 0 {
        return Err(arg_err("benchmark batch must be positive"));
    }
    let [c, h, w] = net.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::from_fn(&[batch, c, h, w], |_| StandardNormal.sample(&mut rng));

    let mut rows = Vec::new();
    for variant in [Variant::Dense, Variant::TwoStage] {
        let model = compile_as(net, variant)?;
        for _ in 0..warmup {
            model.infer(&input)?;
        }
        let mut total = Vec::with_capacity(repetitions);
        let mut s1 = Vec::with_capacity(repetitions);
        let mut s2 = Vec::with_capacity(repetitions);
        let mut peak = 0;
        for _ in 0..repetitions {
            let (_, p) = model.infer_profiled(&input)?;
            total.push(ms(p.total));
            s1.push(ms(p.stage1));
            s2.push(ms(p.stage2));
            peak = peak.max(p.peak_bytes);
        }
        rows.push(BenchRow {
            variant: variant.name().to_string(),
            batch,
            median_ms: median(&total),
            p95_ms: p95(&total),
            stage1_ms: median(&s1),
            stage2_ms: median(&s2),
            peak_mb: peak as f64 / (1024.0 * 1024.0),
        });
    }
    Ok(BenchReport {
        machine: machine(),
        threads: parallel::thread_count(),
        repetitions,
        warmup,
        rows,
    })
}
