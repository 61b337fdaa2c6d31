//! Versioned little-endian checkpoint files.
//!
//! Layout: magic, version, three length-prefixed text blobs (network spec as
//! JSON, run spec as JSON, training config as `key=value`), the iteration
//! counter, the generator state, then length-prefixed named tensors.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::NetworkSpec;
use crate::optim::TrainConfig;
use crate::tensor::Tensor;
use crate::train::RunSpec;

pub const MAGIC: &[u8; 8] = b"ACTCONV\0";
pub const VERSION: u32 = 1;

/// Position of a ChaCha stream: seed, stream id and word offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run: RunSpec,
    pub spec: NetworkSpec,
    pub config: TrainConfig,
    pub iter: usize,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidConfig(format!("checkpoint lacks tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for blob in [
            to_json(&self.spec)?,
            to_json(&self.run)?,
            self.config.to_kv_string(),
        ] {
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(blob.as_bytes());
        }
        out.extend_from_slice(&(self.iter as u64).to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let spec: NetworkSpec = serde_json::from_str(&r.text()?)
            .map_err(|e| Error::format(path, format!("network spec: {e}")))?;
        let run: RunSpec = serde_json::from_str(&r.text()?)
            .map_err(|e| Error::format(path, format!("run spec: {e}")))?;
        let config = TrainConfig::from_kv_str(&r.text()?)?;
        let iter = r.u64()? as usize;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let shape = [r.u64()? as usize, r.u64()? as usize, r.u64()? as usize, r.u64()? as usize];
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(path, format!("tensor {name} is too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Self {
            run,
            spec,
            config,
            iter,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::InvalidConfig(e.to_string()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "checkpoint is truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(self.path, "text blob is not UTF-8"))
    }
}
