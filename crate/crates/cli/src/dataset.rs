//! Dataset ingestion: the synthetic generator, CIFAR-10 binary batches and
//! IDX image/label files.

use std::fs;
use std::path::{Path, PathBuf};

use bknet_core::data::{synthetic, Dataset};
use bknet_core::Tensor;

use crate::config::{DatasetConfig, DatasetKind};
use crate::error::{CliError, Result};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;
pub const CIFAR_CLASSES: usize = 10;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Split one CIFAR-10 record into its label and `3 x 32 x 32` pixel bytes.
pub fn cifar_record(record: &[u8]) -> (u8, &[u8]) {
    (record[0], &record[1..CIFAR_RECORD])
}

/// Decode concatenated CIFAR-10 records; pixels scaled to `[0, 1]`.
pub fn parse_cifar(bytes: &[u8]) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(CliError::Data(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let (label, px) = cifar_record(rec);
        if label as usize >= CIFAR_CLASSES {
            return Err(CliError::Data(format!("cifar label {label} out of range")));
        }
        labels.push(label as usize);
        pixels.extend(px.iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

pub fn load_cifar(paths: &[PathBuf]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (px, lb) = parse_cifar(&read(p)?).map_err(|e| match e {
            CliError::Data(m) => CliError::Data(format!("{}: {m}", p.display())),
            other => other,
        })?;
        pixels.extend(px);
        labels.extend(lb);
    }
    let n = labels.len();
    let images = Tensor::new(&[n, 3, 32, 32], pixels)?;
    Ok(Dataset::new(images, labels, CIFAR_CLASSES)?)
}

/// Parsed IDX header: element type code and dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub dtype: u8,
    pub dims: Vec<usize>,
}

impl IdxHeader {
    pub fn len(&self) -> usize {
        4 + 4 * self.dims.len()
    }
}

pub fn parse_idx_header(bytes: &[u8]) -> Result<IdxHeader> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(CliError::Data("missing IDX magic".into()));
    }
    let (dtype, rank) = (bytes[2], bytes[3] as usize);
    if bytes.len() < 4 + 4 * rank {
        return Err(CliError::Data("truncated IDX header".into()));
    }
    let dims = (0..rank)
        .map(|i| {
            let b = &bytes[4 + 4 * i..8 + 4 * i];
            u32::from_be_bytes(b.try_into().unwrap()) as usize
        })
        .collect();
    Ok(IdxHeader { dtype, dims })
}

/// Unsigned-byte IDX payload and its dimensions.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    let h = parse_idx_header(bytes)?;
    if h.dtype != 0x08 {
        return Err(CliError::Data(format!(
            "IDX element type {:#04x} unsupported (only unsigned bytes)",
            h.dtype
        )));
    }
    let n: usize = h.dims.iter().product();
    let body = &bytes[h.len()..];
    if body.len() != n {
        return Err(CliError::Data(format!(
            "IDX payload holds {} bytes, dims {:?} need {n}",
            body.len(),
            h.dims
        )));
    }
    Ok((h.dims, body))
}

/// Images `n x h x w` (one channel) or `n x c x h x w`, with a rank-1 label
/// file. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let img_bytes = read(images)?;
    let lab_bytes = read(labels)?;
    let (dims, px) = parse_idx(&img_bytes)?;
    let shape = match dims[..] {
        [n, h, w] => [n, 1, h, w],
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(CliError::Data(format!("IDX images of rank {}", dims.len()))),
    };
    let (ldims, lb) = parse_idx(&lab_bytes)?;
    if ldims.len() != 1 || ldims[0] != shape[0] {
        return Err(CliError::Data(format!(
            "{} labels for {} images",
            ldims.iter().product::<usize>(),
            shape[0]
        )));
    }
    let labels: Vec<usize> = lb.iter().map(|&b| b as usize).collect();
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let data = px.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Dataset::new(Tensor::new(&shape, data)?, labels, classes)?)
}

/// `(train, test)` per the config, limited and normalised.
pub fn load(cfg: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match cfg.kind {
        DatasetKind::Synthetic => synthetic(&cfg.synthetic)?,
        DatasetKind::Cifar10Binary => (load_cifar(&cfg.train)?, load_cifar(&cfg.test)?),
        DatasetKind::IdxImages => (
            load_idx(&cfg.train[0], &cfg.train[1], cfg.classes)?,
            load_idx(&cfg.test[0], &cfg.test[1], cfg.classes)?,
        ),
    };
    if train.sample_shape() != test.sample_shape() {
        return Err(CliError::Data("train and test image shapes differ".into()));
    }
    if train.num_classes != test.num_classes {
        let k = train.num_classes.max(test.num_classes);
        train.num_classes = k;
        test.num_classes = k;
    }
    if let Some(n) = cfg.limit_train {
        train = train.head(n);
    }
    if let Some(n) = cfg.limit_test {
        test = test.head(n);
    }
    if let Some((mean, std)) = cfg.normalization() {
        train.normalize(&mean, &std)?;
        test.normalize(&mean, &std)?;
    }
    Ok((train, test))
}
