//! TOML pipeline configuration.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/toy"
//! eval_batch = 256
//!
//! [dataset]
//! kind = "synthetic"          # synthetic | cifar10-binary | idx-images
//! train = []                  # cifar: batch files; idx: [images, labels]
//! test = []
//! # classes, limit_train, limit_test, mean, std are optional
//! # augment = { flip = true, crop_pad = 4 }   # default for cifar
//!
//! [dataset.synthetic]         # generator settings for kind = "synthetic"
//! train = 3000
//!
//! [model]
//! arch = "toy-cnn"
//!
//! [pretrain]                  # also [retrain] and [finetune]
//! epochs = 20
//! base_lr = 0.05
//!
//! [decompose]
//! default_d = 5
//! per_layer = { "2" = 3 }
//!
//! [prune]
//! sensitivity = 1.0
//!
//! [shrink]
//! fold_bias = false
//!
//! [bench]
//! enabled = false
//! batch = 8
//! repetitions = 20
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use bknet_core::arch::PRESETS;
use bknet_core::data::{Augment, SyntheticSpec};
use bknet_core::decompose::DecomposePlan;
use bknet_core::prune::PruneConfig;
use bknet_core::shrink::ShrinkConfig;
use bknet_core::train::{Schedule, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synthetic,
    #[serde(rename = "cifar10-binary")]
    Cifar10Binary,
    IdxImages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Class count for idx data; cifar is always 10.
    pub classes: Option<usize>,
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
    /// Per-channel normalisation; cifar defaults to the usual constants,
    /// other kinds to none.
    pub mean: Option<Vec<f32>>,
    pub std: Option<Vec<f32>>,
    /// Training-time augmentation for phases that set none themselves;
    /// cifar defaults to flip plus 4-pixel crop, other kinds to none.
    pub augment: Option<Augment>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            train: Vec::new(),
            test: Vec::new(),
            synthetic: SyntheticSpec::default(),
            classes: None,
            limit_train: None,
            limit_test: None,
            mean: None,
            std: None,
            augment: None,
        }
    }
}

impl DatasetConfig {
    pub fn normalization(&self) -> Option<(Vec<f32>, Vec<f32>)> {
        match (&self.mean, &self.std, self.kind) {
            (Some(m), Some(s), _) => Some((m.clone(), s.clone())),
            (None, None, DatasetKind::Cifar10Binary) => Some((CIFAR_MEAN.to_vec(), CIFAR_STD.to_vec())),
            _ => None,
        }
    }

    pub fn augmentation(&self) -> Augment {
        match (self.augment, self.kind) {
            (Some(a), _) => a,
            (None, DatasetKind::Cifar10Binary) => Augment::CIFAR,
            _ => Augment::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: "toy-cnn".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Benchmark the final model as part of `compress`.
    pub enabled: bool,
    pub batch: usize,
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            batch: 8,
            repetitions: 20,
            warmup: 2,
        }
    }
}

fn default_finetune() -> TrainConfig {
    TrainConfig {
        base_lr: 0.01,
        epochs: 20,
        gamma: 0.0,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub eval_batch: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub decompose: DecomposePlan,
    pub retrain: TrainConfig,
    pub prune: PruneConfig,
    pub shrink: ShrinkConfig,
    #[serde(default = "default_finetune")]
    pub finetune: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            eval_batch: 256,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            decompose: DecomposePlan::default(),
            retrain: TrainConfig::default(),
            prune: PruneConfig::default(),
            shrink: ShrinkConfig::default(),
            finetune: default_finetune(),
            bench: BenchConfig::default(),
        }
    }
}

/// Phase offsets mixed into the master seed.
const PRETRAIN_SEED: u64 = 1;
const RETRAIN_SEED: u64 = 2;
const FINETUNE_SEED: u64 = 3;

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Read, parse and check a config file. Relative dataset paths resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            for p in cfg.dataset.train.iter_mut().chain(cfg.dataset.test.iter_mut()) {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        cfg.finalize();
        cfg.check()?;
        Ok(cfg)
    }

    /// Derive the per-phase training seeds from the master seed and give
    /// phases without augmentation the dataset's.
    pub fn finalize(&mut self) {
        self.pretrain.seed = mix(self.seed, PRETRAIN_SEED);
        self.retrain.seed = mix(self.seed, RETRAIN_SEED);
        self.finetune.seed = mix(self.seed, FINETUNE_SEED);
        let aug = self.dataset.augmentation();
        for t in [&mut self.pretrain, &mut self.retrain, &mut self.finetune] {
            if t.augment.is_noop() {
                t.augment = aug;
            }
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.finalize();
        self
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if !PRESETS.contains(&self.model.arch.as_str()) {
            return bad(format!(
                "unknown architecture {:?} (expected one of {})",
                self.model.arch,
                PRESETS.join(", ")
            ));
        }
        let ds = &self.dataset;
        match ds.kind {
            DatasetKind::Synthetic => {
                if ds.synthetic.classes == 0 || ds.synthetic.channels == 0 || ds.synthetic.size < 2 {
                    return bad("synthetic dataset needs classes, channels and size >= 2".into());
                }
                if ds.synthetic.train == 0 || ds.synthetic.test == 0 {
                    return bad("synthetic dataset needs train and test samples".into());
                }
            }
            DatasetKind::Cifar10Binary => {
                if ds.train.is_empty() || ds.test.is_empty() {
                    return bad("cifar10-binary needs train and test batch files".into());
                }
            }
            DatasetKind::IdxImages => {
                if ds.train.len() != 2 || ds.test.len() != 2 {
                    return bad("idx-images takes [images, labels] for train and test".into());
                }
            }
        }
        for p in ds.train.iter().chain(&ds.test) {
            if !p.is_file() {
                return Err(CliError::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
                ));
            }
        }
        if ds.mean.is_some() != ds.std.is_some() {
            return bad("dataset mean and std must be given together".into());
        }
        if let Some(s) = &ds.std {
            if s.iter().any(|&v| !(v > 0.0)) {
                return bad("dataset std entries must be positive".into());
            }
        }
        if ds.limit_train == Some(0) || ds.limit_test == Some(0) {
            return bad("dataset limits must be positive".into());
        }
        if self.eval_batch == 0 {
            return bad("eval_batch must be at least 1".into());
        }
        for (name, t) in [
            ("pretrain", &self.pretrain),
            ("retrain", &self.retrain),
            ("finetune", &self.finetune),
        ] {
            t.check().map_err(|e| CliError::Config(format!("[{name}] {e}")))?;
        }
        if self.decompose.default_d == 0 {
            return bad("decompose.default_d must be at least 1".into());
        }
        if !(self.prune.sensitivity >= 0.0) {
            return bad("prune.sensitivity must be non-negative".into());
        }
        if self.bench.repetitions < 5 || self.bench.batch == 0 {
            return bad("bench needs batch >= 1 and repetitions >= 5".into());
        }
        Ok(())
    }

    /// Settings for the desk-scale toy run on the synthetic task.
    pub fn toy() -> Self {
        let train = |epochs, base_lr, schedule| TrainConfig {
            epochs,
            base_lr,
            schedule,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let mut cfg = Self {
            seed: 7,
            out_dir: PathBuf::from("runs/toy"),
            pretrain: train(20, 0.05, Schedule::Step),
            retrain: train(40, 0.1, Schedule::Constant),
            finetune: TrainConfig {
                gamma: 0.0,
                ..train(10, 0.01, Schedule::Step)
            },
            ..Self::default()
        };
        cfg.finalize();
        cfg
    }
}

fn mix(seed: u64, phase: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ phase
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let mut want = PipelineConfig::default();
        want.finalize();
        let mut got = PipelineConfig::from_toml("").unwrap();
        got.finalize();
        assert_eq!(got, want);
        assert_eq!(got.decompose.default_d, 5);
        assert_eq!(got.retrain.gamma, 1e-4);
        assert_eq!(got.retrain.alternation_interval, 5);
    }

    #[test]
    fn sections_parse() {
        let cfg = PipelineConfig::from_toml(
            r#"
            seed = 3
            [dataset]
            kind = "cifar10-binary"
            [decompose]
            default_d = 4
            per_layer = { "0" = 2, "skip1.0" = 1 }
            [retrain]
            schedule = "cosine"
            start_group = "coefficients"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.dataset.kind, DatasetKind::Cifar10Binary);
        assert_eq!(cfg.decompose.per_layer.len(), 2);
        assert_eq!(cfg.retrain.schedule, Schedule::Cosine);
        assert!(cfg.dataset.normalization().is_some());
        assert_eq!(cfg.dataset.augmentation(), Augment::CIFAR);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("sed = 3").is_err());
        assert!(PipelineConfig::from_toml("[retrain]\nlr = 3").is_err());
    }

    #[test]
    fn check_catches_bad_values() {
        let mut cfg = PipelineConfig::toy();
        assert!(cfg.check().is_ok());
        cfg.model.arch = "alexnet".into();
        assert!(cfg.check().is_err());
        let mut cfg = PipelineConfig::toy();
        cfg.retrain.alternation_interval = 0;
        assert!(cfg.check().is_err());
        let mut cfg = PipelineConfig::toy();
        cfg.dataset.kind = DatasetKind::Cifar10Binary;
        cfg.dataset.train = vec!["/nonexistent/data_batch_1.bin".into()];
        cfg.dataset.test = vec!["/nonexistent/test_batch.bin".into()];
        assert!(matches!(cfg.check(), Err(CliError::Io { .. })));
    }

    #[test]
    fn phase_seeds_follow_master_seed() {
        let a = PipelineConfig::toy().with_seed(1);
        let b = PipelineConfig::toy().with_seed(2);
        assert_ne!(a.retrain.seed, b.retrain.seed);
        assert_ne!(a.retrain.seed, a.finetune.seed);
        assert_eq!(a, PipelineConfig::toy().with_seed(1));
    }

    fn shipped(name: &str) -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
    }

    #[test]
    fn shipped_toy_config_matches_builtin() {
        assert_eq!(PipelineConfig::load(&shipped("toy.toml")).unwrap(), PipelineConfig::toy());
    }

    #[test]
    fn shipped_cifar_config_parses() {
        let text = fs::read_to_string(shipped("cifar10-vgg16.toml")).unwrap();
        let cfg = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.dataset.kind, DatasetKind::Cifar10Binary);
        assert_eq!(cfg.dataset.train.len(), 5);
        assert!(PRESETS.contains(&cfg.model.arch.as_str()));
        let mut cfg = cfg;
        cfg.finalize();
        assert_eq!(cfg.retrain.augment, Augment::CIFAR);
        assert!(PipelineConfig::toy().retrain.augment.is_noop());
    }
}
