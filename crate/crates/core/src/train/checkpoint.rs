//! Binary checkpoints.
//!
//! Layout (little-endian): magic `SEGF`, `u32` version, `u64`-length-prefixed
//! config text, counters (step, epoch, optimizer step, PRNG state), `u32`
//! tensor count, then per tensor its name, shape, values and both optimizer
//! moments as `f32`, and finally a CRC-64 of everything before it.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};

use super::optim::OptimState;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"SEGF";
pub const FORMAT_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Effective run configuration as TOML.
    pub config: String,
    pub params: ParamSet<f32>,
    pub optim: OptimState<f32>,
    pub step: u64,
    pub epoch: u64,
    pub rng_state: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u64(&mut out, self.config.len() as u64);
        out.extend_from_slice(self.config.as_bytes());
        for v in [self.step, self.epoch, self.optim.t, self.rng_state] {
            put_u64(&mut out, v);
        }
        put_u32(&mut out, self.params.len() as u32);
        for p in self.params.iter() {
            let missing = || Error::Checkpoint(format!("no optimizer state for `{}`", p.name));
            let m = self.optim.m.get(&p.name).ok_or_else(missing)?;
            let v = self.optim.v.get(&p.name).ok_or_else(missing)?;
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state shape mismatch for `{}`",
                    p.name
                )));
            }
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.ndim() as u32);
            for &d in p.value.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f32s(&mut out, &p.value);
            put_f32s(&mut out, m);
            put_f32s(&mut out, v);
        }
        let crc = CRC64.checksum(&out);
        put_u64(&mut out, crc);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version} is not supported (expected version {FORMAT_VERSION})"
            )));
        }
        let len = r.u64()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let (step, epoch, t, rng_state) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let count = r.u32()?;
        let mut params = ParamSet::new();
        let mut optim = OptimState {
            m: Default::default(),
            v: Default::default(),
            t,
        };
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has an absurd shape")))?;
            let value = r.tensor(&shape, numel)?;
            optim.m.insert(name.clone(), r.tensor(&shape, numel)?);
            optim.v.insert(name.clone(), r.tensor(&shape, numel)?);
            params
                .insert(name, value)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let body = r.pos;
        let stored = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} unexpected trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let actual = CRC64.checksum(&bytes[..body]);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch (stored {stored:016x}, computed {actual:016x})"
            )));
        }
        Ok(Self {
            config,
            params,
            optim,
            step,
            epoch,
            rng_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        // Write-then-rename so a crash never leaves a half-written checkpoint.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored tensors into `params`, which must hold exactly the
    /// same names and shapes.
    pub fn restore_into(&self, params: &mut ParamSet<f32>) -> Result<()> {
        for p in self.params.iter() {
            let target = params.get_mut(&p.name).map_err(|_| {
                Error::Checkpoint(format!("checkpoint tensor `{}` does not exist in the model", p.name))
            })?;
            if target.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    p.value.shape(),
                    target.value.shape()
                )));
            }
        }
        if let Some(missing) = params.names().find(|n| !self.params.contains(n)) {
            return Err(Error::Checkpoint(format!("checkpoint lacks tensor `{missing}`")));
        }
        for p in self.params.iter() {
            params.get_mut(&p.name)?.value = p.value.clone();
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated file: needed {n} bytes at offset {}, only {} remain",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
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

    fn tensor(&mut self, shape: &[usize], numel: usize) -> Result<Tensor<f32>> {
        let bytes = self.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(shape, data)
    }
}
