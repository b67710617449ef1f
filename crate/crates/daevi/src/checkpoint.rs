//! `DVCK` training checkpoint.
//!
//! ```text
//! magic "DVCK", u32 version (1)
//! 32 bytes   SHA-256 of the canonical config JSON
//! u32 n, n   canonical config JSON (UTF-8)
//! u64 ×4     iteration, sampler RNG state, generator steps, discriminator steps
//! u32        tensor count, then per tensor:
//!            u32 name length, name (UTF-8), u32 rank, u32 × rank dims,
//!            f32 × prod(dims) values
//! ```
//!
//! All integers and reals are little-endian.

use std::fs;
use std::path::Path;

use daevi_core::config::RunConfig;
use daevi_core::numerics::Array;
use daevi_core::training::TrainerState;

use crate::config::{canonical_json, config_hash};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainerState<f32>,
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    let u32_ = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    out.extend_from_slice(MAGIC);
    u32_(&mut out, VERSION);
    let json = canonical_json(&ck.config);
    out.extend_from_slice(&config_hash(&ck.config));
    u32_(&mut out, json.len() as u32);
    out.extend_from_slice(json.as_bytes());
    for v in [ck.state.iteration, ck.state.rng_state, ck.state.generator_steps, ck.state.discriminator_steps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    u32_(&mut out, ck.state.tensors.len() as u32);
    for (name, a) in &ck.state.tensors {
        u32_(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        u32_(&mut out, a.shape().len() as u32);
        for &d in a.shape() {
            u32_(&mut out, d as u32);
        }
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), offset: offset as u64, detail: detail.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(self.bytes.len(), format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let at = self.pos;
        let b = self.take(n, what)?;
        std::str::from_utf8(b).map_err(|e| self.err(at + e.valid_up_to(), format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic").ok() != Some(&MAGIC[..]) {
        return Err(r.err(0, "bad magic, expected \"DVCK\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(4, format!("unsupported version {version}")));
    }
    let hash_at = r.pos;
    let hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");
    let n = r.u32("config length")? as usize;
    let json_at = r.pos;
    let json = r.utf8(n, "config")?;
    let config: RunConfig = serde_json::from_str(json).map_err(|e| r.err(json_at, format!("config does not parse: {e}")))?;
    if config_hash(&config) != hash {
        return Err(r.err(hash_at, "config hash does not match the stored config"));
    }
    let iteration = r.u64("iteration")?;
    let rng_state = r.u64("rng state")?;
    let generator_steps = r.u64("generator steps")?;
    let discriminator_steps = r.u64("discriminator steps")?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = r.utf8(len, "tensor name")?.to_string();
        let rank = r.u32("rank")? as usize;
        let dims_at = r.pos;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let elems = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&e| e.checked_mul(4).is_some())
            .ok_or_else(|| r.err(dims_at, format!("tensor {name} extent overflows")))?;
        let data = r.take(elems * 4, &format!("tensor {name}"))?;
        let values = data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        tensors.push((name, Array::new(&shape, values)?));
    }
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, state: TrainerState { iteration, rng_state, generator_steps, discriminator_steps, tensors } })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode(ck)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
