//! EMCK checkpoint blobs.
//!
//! ```text
//! 0..4   magic "EMCK"
//! 4      version (0x01)
//! 5      endian flag (0x01 = little-endian)
//! 6..8   zero
//! 8..12  u32 tensor_count
//! per tensor:
//!   u16 name_len, name bytes, u8 dtype code (EVSH codes), u8 ndim,
//!   u32 x ndim dims, row-major little-endian payload
//! ```
//!
//! Tensors, in order: `meta/config` (u8 JSON), `meta/config_sha256` (u8),
//! `rng/global` (u8: seed and step as little-endian u64), `rng/workers`
//! (u8: worker count as little-endian u64), `rng/worker/<w>` (u8: each
//! worker's stream key at the stored step), then `param/<name>`,
//! `adam_m/<name>`, `adam_v/<name>` (f32) in layout order, then
//! `stats/<source>/mean` and `stats/<source>/std` (f32).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::model::{MaeModel, SourceSpec};
use crate::region::Dtype;
use crate::rng::derive_key;
use crate::tokenizer::{BandStats, DEFAULT_EPSILON};
use crate::{key, Error, Result};

pub const MAGIC: &[u8; 4] = b"EMCK";
pub const VERSION: u8 = 0x01;
pub const LITTLE_ENDIAN: u8 = 0x01;

/// Everything stored in the `meta/config` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub sources: Vec<SourceSpec>,
}

impl CheckpointMeta {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_json()).into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub seed: u64,
    /// Number of optimizer steps taken.
    pub step: u64,
    pub params: Vec<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    pub stats: BTreeMap<String, BandStats>,
}

/// Stream key of worker `w` at `step`.
pub fn worker_stream_key(seed: u64, worker: usize, step: u64) -> u64 {
    derive_key(key![seed, "worker", worker, step])
}

enum Payload<'a> {
    Bytes(&'a [u8]),
    F32(&'a [f32]),
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], payload: Payload<'_>) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
    buf.extend_from_slice(&name_len.to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    let dtype = match payload {
        Payload::Bytes(_) => Dtype::U8,
        Payload::F32(_) => Dtype::F32,
    };
    buf.push(dtype.code());
    buf.push(u8::try_from(dims.len()).map_err(|_| Error::Checkpoint(format!("{name}: too many dims")))?);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("{name}: dim {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    match payload {
        Payload::Bytes(b) => buf.extend_from_slice(b),
        Payload::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(())
}

struct RawTensor<'a> {
    name: String,
    dtype: Dtype,
    dims: Vec<usize>,
    payload: &'a [u8],
}

impl RawTensor<'_> {
    fn bytes(&self, want: &[usize]) -> Result<&[u8]> {
        if self.dtype != Dtype::U8 || (!want.is_empty() && self.dims != want) {
            return Err(Error::Checkpoint(format!("{}: expected u8 {want:?}, found {:?} {:?}", self.name, self.dtype, self.dims)));
        }
        Ok(self.payload)
    }

    fn f32s(&self, want: &[usize]) -> Result<Vec<f32>> {
        if self.dtype != Dtype::F32 || self.dims != want {
            return Err(Error::Checkpoint(format!("{}: expected f32 {want:?}, found {:?} {:?}", self.name, self.dtype, self.dims)));
        }
        Ok(self.payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::TruncatedPayload)?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<RawTensor<'a>> {
        let name_len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = Dtype::from_code(self.u8()?)?;
        let ndim = self.u8()? as usize;
        let dims = (0..ndim).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
        let payload = self.take(len)?;
        Ok(RawTensor { name, dtype, dims, payload })
    }
}

fn u64_pair(a: u64, b: u64) -> [u8; 16] {
    let mut out = [0u8; 16];
    out[..8].copy_from_slice(&a.to_le_bytes());
    out[8..].copy_from_slice(&b.to_le_bytes());
    out
}

impl Checkpoint {
    /// The model this checkpoint's parameters belong to.
    pub fn model(&self) -> Result<MaeModel> {
        MaeModel::new(self.meta.train.model.clone(), self.meta.sources.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = self.model()?;
        let layout = model.layout();
        for (name, v) in [("params", &self.params), ("adam_m", &self.adam_m), ("adam_v", &self.adam_v)] {
            if v.len() != layout.len() {
                return Err(Error::Checkpoint(format!("{name} has {} values, layout {}", v.len(), layout.len())));
            }
        }
        let workers = self.meta.train.workers;
        let count = 4 + workers + 3 * layout.entries().len() + 2 * self.meta.sources.len();
        let mut buf = Vec::with_capacity(16 + 12 * self.params.len());
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.push(LITTLE_ENDIAN);
        buf.extend_from_slice(&[0, 0]);
        buf.extend_from_slice(&(count as u32).to_le_bytes());

        let json = self.meta.to_json();
        push_tensor(&mut buf, "meta/config", &[json.len()], Payload::Bytes(&json))?;
        push_tensor(&mut buf, "meta/config_sha256", &[32], Payload::Bytes(&self.meta.hash()))?;
        push_tensor(&mut buf, "rng/global", &[16], Payload::Bytes(&u64_pair(self.seed, self.step)))?;
        push_tensor(&mut buf, "rng/workers", &[8], Payload::Bytes(&(workers as u64).to_le_bytes()))?;
        for w in 0..workers {
            let k = worker_stream_key(self.seed, w, self.step);
            push_tensor(&mut buf, &format!("rng/worker/{w}"), &[8], Payload::Bytes(&k.to_le_bytes()))?;
        }
        for (prefix, values) in [("param", &self.params), ("adam_m", &self.adam_m), ("adam_v", &self.adam_v)] {
            for e in layout.entries() {
                push_tensor(&mut buf, &format!("{prefix}/{}", e.name), &e.shape, Payload::F32(&values[e.range()]))?;
            }
        }
        for spec in &self.meta.sources {
            let src = &spec.name;
            let st = self
                .stats
                .get(src)
                .ok_or_else(|| Error::Checkpoint(format!("no band statistics for {src}")))?;
            let mean: Vec<f32> = st.mean.iter().map(|&v| v as f32).collect();
            let std: Vec<f32> = st.std.iter().map(|&v| v as f32).collect();
            push_tensor(&mut buf, &format!("stats/{src}/mean"), &[mean.len()], Payload::F32(&mean))?;
            push_tensor(&mut buf, &format!("stats/{src}/std"), &[std.len()], Payload::F32(&std))?;
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let endian = r.u8()?;
        if endian != LITTLE_ENDIAN {
            return Err(Error::UnsupportedEndian(endian));
        }
        r.take(2)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            tensors.push(r.tensor()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut it = tensors.into_iter();
        let mut next = |want: &str| -> Result<RawTensor<'_>> {
            let t = it.next().ok_or_else(|| Error::Checkpoint(format!("missing tensor {want}")))?;
            if t.name != want {
                return Err(Error::Checkpoint(format!("expected tensor {want}, found {}", t.name)));
            }
            Ok(t)
        };

        let json = next("meta/config")?;
        let meta: CheckpointMeta =
            serde_json::from_slice(json.bytes(&[])?).map_err(|e| Error::Checkpoint(format!("meta/config: {e}")))?;
        let hash = next("meta/config_sha256")?;
        if hash.bytes(&[32])? != meta.hash() {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let global = next("rng/global")?;
        let g = global.bytes(&[16])?;
        let seed = u64::from_le_bytes(g[..8].try_into().unwrap());
        let step = u64::from_le_bytes(g[8..].try_into().unwrap());
        let workers = u64::from_le_bytes(next("rng/workers")?.bytes(&[8])?.try_into().unwrap()) as usize;
        if workers != meta.train.workers {
            return Err(Error::Checkpoint(format!("{workers} worker streams for {} workers", meta.train.workers)));
        }
        for w in 0..workers {
            let k = next(&format!("rng/worker/{w}"))?;
            if k.bytes(&[8])? != worker_stream_key(seed, w, step).to_le_bytes() {
                return Err(Error::Checkpoint(format!("worker {w} stream key does not match step {step}")));
            }
        }

        let model = MaeModel::new(meta.train.model.clone(), meta.sources.clone())?;
        let layout = model.layout();
        let mut buffers = Vec::with_capacity(3);
        for prefix in ["param", "adam_m", "adam_v"] {
            let mut values = Vec::with_capacity(layout.len());
            for e in layout.entries() {
                values.extend(next(&format!("{prefix}/{}", e.name))?.f32s(&e.shape)?);
            }
            buffers.push(values);
        }
        let adam_v = buffers.pop().unwrap();
        let adam_m = buffers.pop().unwrap();
        let params = buffers.pop().unwrap();

        let mut stats = BTreeMap::new();
        for spec in &meta.sources {
            let mean = next(&format!("stats/{}/mean", spec.name))?.f32s(&[spec.bands])?;
            let std = next(&format!("stats/{}/std", spec.name))?.f32s(&[spec.bands])?;
            stats.insert(
                spec.name.clone(),
                BandStats {
                    mean: mean.into_iter().map(f64::from).collect(),
                    std: std.into_iter().map(f64::from).collect(),
                    epsilon: DEFAULT_EPSILON,
                },
            );
        }
        if let Some(extra) = it.next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {}", extra.name)));
        }
        Ok(Self { meta, seed, step, params, adam_m, adam_v, stats })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
