//! Model checkpoints.
//!
//! Layout (integers little-endian `u32`): magic `SCNP`, version, metadata
//! length, metadata as UTF-8 JSON, tensor count, then per tensor its name
//! length, name, rows, cols and `rows·cols` little-endian `f64` values.
//! Tensors appear in [`ModelParams::names`] order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::Scorer;
use crate::dataio::{write_atomic, Vocab};
use crate::encoders::{ModelDims, ModelParams, SentenceEncoder};
use crate::error::{Result, ScanError};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCNP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub scorer: Scorer,
    pub encoder: SentenceEncoder,
    pub dims: ModelDims,
    pub vocab: Vocab,
    /// Epoch (1-based) the weights come from; 0 means initialization.
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: ModelParams) -> Result<Self> {
        let ck = Checkpoint { meta, params };
        ck.validate()?;
        Ok(ck)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.scorer.validate()?;
        self.meta.dims.validate()?;
        if self.params.dims() != self.meta.dims {
            return Err(ScanError::Config(format!(
                "metadata dims {:?} disagree with tensors {:?}",
                self.meta.dims,
                self.params.dims()
            )));
        }
        if self.meta.vocab.len() != self.meta.dims.vocab_size {
            return Err(ScanError::Config(format!(
                "vocabulary has {} tokens but the embedding table has {} rows",
                self.meta.vocab.len(),
                self.meta.dims.vocab_size
            )));
        }
        Ok(())
    }

    /// True when both models read the same inputs the same way.
    pub fn compatible_with(&self, other: &Checkpoint) -> bool {
        self.meta.vocab == other.meta.vocab && self.meta.dims.raw_dim == other.meta.dims.raw_dim
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| ScanError::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + meta.len() + 8 * self.params.total_len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        let names = ModelParams::names();
        let tensors = self.params.tensors();
        put_u32(&mut out, tensors.len() as u32);
        for (name, t) in names.iter().zip(tensors) {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rows() as u32);
            put_u32(&mut out, t.cols() as u32);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(ScanError::format(0, "bad magic, expected \"SCNP\""));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(ScanError::format(4, format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.pos as u64;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| ScanError::format(meta_at, format!("metadata: {e}")))?;
        let count_at = r.pos as u64;
        let count = r.u32("tensor count")? as usize;
        let names = ModelParams::names();
        if count != names.len() {
            return Err(ScanError::format(
                count_at,
                format!("expected {} tensors, found {count}", names.len()),
            ));
        }
        let mut tensors = Vec::with_capacity(count);
        for expected in &names {
            let at = r.pos as u64;
            let len = r.u32("tensor name length")? as usize;
            let name = r.take(len, "tensor name")?;
            if name != expected.as_bytes() {
                return Err(ScanError::format(
                    at,
                    format!("expected tensor {expected}, found {}", String::from_utf8_lossy(name)),
                ));
            }
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let raw = r.take(8 * rows * cols, &format!("values of {expected}"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Matrix::from_vec(rows, cols, data).map_err(|e| ScanError::format(at, e.to_string()))?;
            tensors.push(m);
        }
        if r.pos != bytes.len() {
            return Err(ScanError::format(r.pos as u64, "trailing bytes after last tensor"));
        }
        let params = ModelParams::from_tensors(tensors)
            .map_err(|e| ScanError::format(count_at, e.to_string()))?;
        Checkpoint::new(meta, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::decode(&std::fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if left < n {
            return Err(ScanError::format(
                self.pos as u64,
                format!("truncated {what}: expected {n} bytes, found {left}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
