//! Self-describing checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"MDAPTCKP"
//! u32     format version
//! u64     header length, then header JSON {format_version, kind, config, trainable, meta}
//! u32     tensor count
//! per tensor:
//!   u32 name length, name (UTF-8)
//!   u8  group (0 base, 1 adapter, 2 head)
//!   u32 rank, u64 × rank dims
//!   f32 × product(dims), row-major
//! ```
//!
//! An adapter-only checkpoint carries just the adapter and head groups and is
//! applied on top of a base encoder with the same architecture.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::weights::{Group, Params, TrainableSet};
use super::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"MDAPTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Full,
    Adapters,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: CheckpointKind,
    config: EncoderConfig,
    trainable: TrainableSet,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub group: Group,
    pub data: ArrayD<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: EncoderConfig,
    pub trainable: TrainableSet,
    /// Free-form metadata (task heads' label sets, run provenance, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    /// Snapshot of an encoder; `Adapters` keeps only adapter and head groups.
    pub fn from_encoder<T: Scalar>(enc: &Encoder<T>, kind: CheckpointKind) -> Self {
        let mut ck = Self {
            kind,
            config: enc.config.clone(),
            trainable: enc.trainable,
            meta: serde_json::Value::Null,
            tensors: Vec::new(),
        };
        ck.extend_from(&enc.weights);
        ck
    }

    /// Appends tensors of any parameter set (e.g. a task head), honoring the kind.
    pub fn extend_from<T: Scalar, P: Params<T>>(&mut self, params: &P) {
        for t in params.tensors() {
            if self.kind == CheckpointKind::Adapters && t.group == Group::Base {
                continue;
            }
            self.tensors.push(StoredTensor {
                name: t.name,
                group: t.group,
                data: t.view.mapv(|v| v.as_f64() as f32),
            });
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies every stored tensor whose name matches into `params`.
    /// Returns the number of tensors assigned.
    pub fn load_into<T: Scalar, P: Params<T>>(&self, params: &mut P) -> Result<usize> {
        let mut n = 0;
        for mut t in params.tensors_mut() {
            if let Some(s) = self.tensor(&t.name) {
                if s.data.shape() != t.view.shape() {
                    return Err(Error::Shape {
                        what: t.name.clone(),
                        expected: t.view.shape().to_vec(),
                        actual: s.data.shape().to_vec(),
                    });
                }
                t.view.zip_mut_with(&s.data, |d, &v| *d = T::of(v as f64));
                n += 1;
            }
        }
        Ok(n)
    }

    /// Rebuilds an encoder from a full checkpoint.
    pub fn to_encoder<T: Scalar>(&self) -> Result<Encoder<T>> {
        if self.kind != CheckpointKind::Full {
            return Err(Error::Checkpoint("adapter-only checkpoint needs a base encoder".into()));
        }
        self.config.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut enc = Encoder::new(self.config.clone(), &mut rng)?;
        enc.trainable = self.trainable;
        self.require_all(&mut enc)?;
        Ok(enc)
    }

    /// Installs adapters and heads from an adapter checkpoint onto `base`.
    pub fn apply_adapters<T: Scalar>(&self, base: &mut Encoder<T>) -> Result<()> {
        let mut arch = self.config.clone();
        arch.adapter_dim = base.config.adapter_dim;
        arch.dropout_rate = base.config.dropout_rate;
        arch.init_std = base.config.init_std;
        if arch != base.config {
            return Err(Error::Checkpoint("adapter checkpoint architecture differs from base".into()));
        }
        let dim = self
            .config
            .adapter_dim
            .ok_or_else(|| Error::Checkpoint("checkpoint has no adapters".into()))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        base.add_adapters(dim, &mut rng)?;
        self.load_into(&mut base.weights)?;
        Ok(())
    }

    fn require_all<T: Scalar>(&self, enc: &mut Encoder<T>) -> Result<()> {
        let expected = enc.weights.tensors().len();
        let loaded = self.load_into(&mut enc.weights)?;
        if loaded != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint provides {loaded} of {expected} encoder tensors"
            )));
        }
        Ok(())
    }
}

fn group_code(g: Group) -> u8 {
    match g {
        Group::Base => 0,
        Group::Adapter => 1,
        Group::Head => 2,
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: ck.kind,
        config: ck.config.clone(),
        trainable: ck.trainable,
        meta: ck.meta.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    w.write_all(&(ck.tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for t in &ck.tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(t.name.as_bytes()).map_err(io)?;
        w.write_all(&[group_code(t.group)]).map_err(io)?;
        w.write_all(&(t.data.ndim() as u32).to_le_bytes()).map_err(io)?;
        for &d in t.data.shape() {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in t.data.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("{}: truncated file ({e})", self.path.display())))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };
    if r.bytes(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(&r.bytes(len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let group = match r.bytes(1)?[0] {
            0 => Group::Base,
            1 => Group::Adapter,
            2 => Group::Head,
            g => return Err(Error::Checkpoint(format!("unknown group code {g} for {name}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = ArrayD::from_shape_vec(shape, values).map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensors.push(StoredTensor { name, group, data });
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        trainable: header.trainable,
        meta: header.meta,
        tensors,
    })
}
