//! BKNET v1 model files.
//!
//! Layout: the 8-byte magic `BKNETv01`, a little-endian `u32` header length,
//! a UTF-8 JSON header, raw payloads in the order of the header's tensor
//! table, then a little-endian CRC32 of every preceding byte. `f32` payloads
//! are little-endian; masks are bit-packed, least significant bit first.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BatchNorm, Conv, DecomposedConv, Layer, LayerId, Linear, Network, SkipEdge};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC_PREFIX: &[u8; 6] = b"BKNETv";
pub const VERSION: &[u8; 2] = b"01";

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerHeader {
    Conv {
        c_out: usize,
        c_in: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    DecomposedConv {
        c_out: usize,
        c_in: usize,
        kernel: usize,
        d: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        mask: bool,
        mean_row: bool,
    },
    Linear {
        out_features: usize,
        in_features: usize,
        bias: bool,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    BatchNorm {
        channels: usize,
    },
    GlobalAvgPool,
}

#[derive(Serialize, Deserialize)]
struct SkipHeader {
    from: usize,
    to: usize,
    projection: Vec<LayerHeader>,
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum DType {
    F32,
    Bits,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: [usize; 3],
    num_classes: usize,
    layers: Vec<LayerHeader>,
    skips: Vec<SkipHeader>,
    tensors: Vec<TensorEntry>,
}

enum Payload<'a> {
    F32(Cow<'a, [f32]>),
    Bits(&'a [bool]),
}

#[derive(Default)]
struct Writer<'a> {
    entries: Vec<TensorEntry>,
    payloads: Vec<Payload<'a>>,
}

impl<'a> Writer<'a> {
    fn f32(&mut self, name: String, shape: &[usize], data: Cow<'a, [f32]>) {
        self.entries.push(TensorEntry {
            name,
            dtype: DType::F32,
            shape: shape.to_vec(),
        });
        self.payloads.push(Payload::F32(data));
    }

    fn tensor(&mut self, name: String, t: &'a Tensor) {
        self.f32(name, t.shape(), Cow::Borrowed(t.data()));
    }

    fn vec(&mut self, name: String, v: &'a [f32]) {
        self.f32(name, &[v.len()], Cow::Borrowed(v));
    }

    fn bits(&mut self, name: String, data: &'a [bool]) {
        self.entries.push(TensorEntry {
            name,
            dtype: DType::Bits,
            shape: vec![data.len()],
        });
        self.payloads.push(Payload::Bits(data));
    }

    fn layer(&mut self, id: LayerId, layer: &'a Layer) -> LayerHeader {
        match layer {
            Layer::Conv(c) => {
                self.tensor(format!("{id}.weight"), &c.weight);
                if let Some(b) = &c.bias {
                    self.vec(format!("{id}.bias"), b);
                }
                LayerHeader::Conv {
                    c_out: c.out_channels(),
                    c_in: c.in_channels(),
                    kernel: c.kernel(),
                    stride: c.stride,
                    padding: c.padding,
                    bias: c.bias.is_some(),
                }
            }
            Layer::DecomposedConv(d) => {
                self.tensor(format!("{id}.basis"), &d.basis);
                self.tensor(format!("{id}.coeffs"), &d.coeffs);
                if let Some(b) = &d.bias {
                    self.vec(format!("{id}.bias"), b);
                }
                if let Some(m) = &d.mask {
                    self.bits(format!("{id}.mask"), m);
                }
                LayerHeader::DecomposedConv {
                    c_out: d.out_channels(),
                    c_in: d.in_channels(),
                    kernel: d.kernel,
                    d: d.d(),
                    stride: d.stride,
                    padding: d.padding,
                    bias: d.bias.is_some(),
                    mask: d.mask.is_some(),
                    mean_row: d.mean_row,
                }
            }
            Layer::Linear(l) => {
                self.tensor(format!("{id}.weight"), &l.weight);
                if let Some(b) = &l.bias {
                    self.vec(format!("{id}.bias"), b);
                }
                LayerHeader::Linear {
                    out_features: l.out_features(),
                    in_features: l.in_features(),
                    bias: l.bias.is_some(),
                }
            }
            Layer::BatchNorm(bn) => {
                self.vec(format!("{id}.scale"), &bn.scale);
                self.vec(format!("{id}.shift"), &bn.shift);
                self.vec(format!("{id}.running_mean"), &bn.running_mean);
                self.vec(format!("{id}.running_var"), &bn.running_var);
                self.f32(
                    format!("{id}.hyper"),
                    &[2],
                    Cow::Owned(vec![bn.eps, bn.momentum]),
                );
                LayerHeader::BatchNorm {
                    channels: bn.channels(),
                }
            }
            Layer::Relu => LayerHeader::Relu,
            Layer::MaxPool { window, stride } => LayerHeader::MaxPool {
                window: *window,
                stride: *stride,
            },
            Layer::AvgPool { window, stride } => LayerHeader::AvgPool {
                window: *window,
                stride: *stride,
            },
            Layer::GlobalAvgPool => LayerHeader::GlobalAvgPool,
        }
    }
}

/// Encode `net` as a BKNET v1 byte stream.
pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| w.layer(LayerId::Main(i), l))
        .collect();
    let skips = net
        .skips
        .iter()
        .enumerate()
        .map(|(edge, s)| SkipHeader {
            from: s.from,
            to: s.to,
            projection: s
                .projection
                .iter()
                .enumerate()
                .map(|(pos, l)| w.layer(LayerId::Skip { edge, pos }, l))
                .collect(),
        })
        .collect();
    let header = Header {
        input_shape: net.input_shape,
        num_classes: net.num_classes,
        layers,
        skips,
        tensors: w.entries,
    };
    let json = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::Format("header exceeds 4 GiB".into()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC_PREFIX);
    out.extend_from_slice(VERSION);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for p in &w.payloads {
        match p {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Bits(bits) => out.extend(pack_bits(bits)),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(net)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    from_bytes(&fs::read(path)?)
}

/// Decode a BKNET v1 byte stream. Version is checked before the checksum.
pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 8 || &bytes[..6] != MAGIC_PREFIX {
        return Err(Error::Format("missing BKNET magic".into()));
    }
    if &bytes[6..8] != VERSION {
        return Err(Error::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[6..8]).into_owned(),
            expected: String::from_utf8_lossy(VERSION).into_owned(),
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Format("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let json = body
        .get(12..12 + header_len)
        .ok_or_else(|| Error::Format("header overruns file".into()))?;
    let header: Header = serde_json::from_slice(json)?;

    let mut cursor = 12 + header_len;
    let mut f32s: HashMap<String, Tensor> = HashMap::new();
    let mut bits: HashMap<String, Vec<bool>> = HashMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let len = match entry.dtype {
            DType::F32 => n * 4,
            DType::Bits => n.div_ceil(8),
        };
        let raw = body
            .get(cursor..cursor + len)
            .ok_or_else(|| Error::Format(format!("payload {} overruns file", entry.name)))?;
        cursor += len;
        match entry.dtype {
            DType::F32 => {
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                f32s.insert(entry.name.clone(), Tensor::new(&entry.shape, data)?);
            }
            DType::Bits => {
                bits.insert(entry.name.clone(), unpack_bits(raw, n));
            }
        }
    }
    if cursor != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payloads",
            body.len() - cursor
        )));
    }

    let mut reader = Reader { f32s, bits };
    let mut net = Network::new(header.input_shape, header.num_classes);
    for (i, lh) in header.layers.iter().enumerate() {
        net.layers.push(reader.layer(LayerId::Main(i), lh)?);
    }
    for (edge, sh) in header.skips.iter().enumerate() {
        let projection = sh
            .projection
            .iter()
            .enumerate()
            .map(|(pos, lh)| reader.layer(LayerId::Skip { edge, pos }, lh))
            .collect::<Result<_>>()?;
        net.skips.push(SkipEdge {
            from: sh.from,
            to: sh.to,
            projection,
        });
    }
    Ok(net)
}

struct Reader {
    f32s: HashMap<String, Tensor>,
    bits: HashMap<String, Vec<bool>>,
}

impl Reader {
    fn tensor(&mut self, name: String, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .f32s
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, header implies {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    fn vec(&mut self, name: String, n: usize) -> Result<Vec<f32>> {
        Ok(self.tensor(name, &[n])?.into_data())
    }

    fn bias(&mut self, id: LayerId, present: bool, n: usize) -> Result<Option<Vec<f32>>> {
        present.then(|| self.vec(format!("{id}.bias"), n)).transpose()
    }

    fn layer(&mut self, id: LayerId, h: &LayerHeader) -> Result<Layer> {
        Ok(match *h {
            LayerHeader::Conv {
                c_out,
                c_in,
                kernel,
                stride,
                padding,
                bias,
            } => Layer::Conv(Conv {
                weight: self.tensor(format!("{id}.weight"), &[c_out, c_in, kernel, kernel])?,
                bias: self.bias(id, bias, c_out)?,
                stride,
                padding,
            }),
            LayerHeader::DecomposedConv {
                c_out,
                c_in,
                kernel,
                d,
                stride,
                padding,
                bias,
                mask,
                mean_row,
            } => {
                let basis = self.tensor(format!("{id}.basis"), &[d, kernel * kernel])?;
                let coeffs = self.tensor(format!("{id}.coeffs"), &[c_out, c_in, d])?;
                let bias = self.bias(id, bias, c_out)?;
                let mask = if mask {
                    let name = format!("{id}.mask");
                    let m = self
                        .bits
                        .remove(&name)
                        .ok_or_else(|| Error::Format(format!("missing mask {name}")))?;
                    if m.len() != coeffs.len() {
                        return Err(Error::Format(format!("mask {name} has wrong length")));
                    }
                    Some(m)
                } else {
                    None
                };
                Layer::DecomposedConv(DecomposedConv {
                    basis,
                    coeffs,
                    bias,
                    kernel,
                    stride,
                    padding,
                    mask,
                    mean_row,
                })
            }
            LayerHeader::Linear {
                out_features,
                in_features,
                bias,
            } => Layer::Linear(Linear {
                weight: self.tensor(format!("{id}.weight"), &[out_features, in_features])?,
                bias: self.bias(id, bias, out_features)?,
            }),
            LayerHeader::BatchNorm { channels } => {
                let hyper = self.vec(format!("{id}.hyper"), 2)?;
                Layer::BatchNorm(BatchNorm {
                    scale: self.vec(format!("{id}.scale"), channels)?,
                    shift: self.vec(format!("{id}.shift"), channels)?,
                    running_mean: self.vec(format!("{id}.running_mean"), channels)?,
                    running_var: self.vec(format!("{id}.running_var"), channels)?,
                    eps: hyper[0],
                    momentum: hyper[1],
                })
            }
            LayerHeader::Relu => Layer::Relu,
            LayerHeader::MaxPool { window, stride } => Layer::MaxPool { window, stride },
            LayerHeader::AvgPool { window, stride } => Layer::AvgPool { window, stride },
            LayerHeader::GlobalAvgPool => Layer::GlobalAvgPool,
        })
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(raw: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_are_lsb_first() {
        let bits = [true, false, false, false, false, false, false, false, false, true];
        assert_eq!(pack_bits(&bits), vec![0b0000_0001, 0b0000_0010]);
        assert_eq!(unpack_bits(&pack_bits(&bits), bits.len()), bits);
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(from_bytes(b"PK\x03\x04...."), Err(Error::Format(_))));
        assert!(matches!(from_bytes(b"BKNETv"), Err(Error::Format(_))));
    }
}
