//! `SSFL1` checkpoint files.
//!
//! Layout (integers little-endian): magic `SSFL1`, dtype tag `u8`, config
//! text (`u32` length + UTF-8), completed epochs `u64`, parameter count
//! `u32`, then per tensor: name (`u32` length + UTF-8), dtype tag `u8`,
//! trainable flag `u8`, rank `u32`, dims `u64` each, payload; finally the
//! velocity count `u32` and per buffer: name, element count `u64`, payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Velocity};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SSFL1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    /// Text form of the run configuration.
    pub config: String,
    pub epoch: usize,
    pub params: ParamStore<T>,
    pub velocity: Velocity<T>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .map_err(|_| Error::Checkpoint(format!("{what} overflows")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }

    fn values<T: Scalar>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let w = T::DTYPE.size_bytes();
        let bytes = self.take(n.checked_mul(w).ok_or_else(|| Error::Checkpoint(format!("{what} too large")))?, what)?;
        Ok(bytes.chunks_exact(w).map(T::read_le).collect())
    }
}

fn check_magic(bytes: &[u8]) -> Result<()> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(CHECKPOINT_MAGIC.len())]).into_owned();
        return Err(Error::Checkpoint(format!(
            "bad magic `{found}`, expected `{}`",
            String::from_utf8_lossy(CHECKPOINT_MAGIC)
        )));
    }
    Ok(())
}

/// Reads only the dtype and config text of a checkpoint.
pub fn peek(path: impl AsRef<Path>) -> Result<(DType, String)> {
    let bytes = read_file(path.as_ref())?;
    check_magic(&bytes)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let tag = r.u8("dtype")?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
    Ok((dtype, r.string("config")?))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(T::DTYPE.tag());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        put_u32(&mut out, self.params.len());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.push(T::DTYPE.tag());
            out.push(u8::from(t.requires_grad()));
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            t.data().iter().for_each(|v| v.write_le(&mut out));
        }
        put_u32(&mut out, self.velocity.len());
        for (name, buf) in self.velocity.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(buf.len() as u64).to_le_bytes());
            buf.iter().for_each(|v| v.write_le(&mut out));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        check_magic(bytes)?;
        let mut r = Reader {
            bytes,
            pos: CHECKPOINT_MAGIC.len(),
        };
        let tag = r.u8("dtype")?;
        if tag != T::DTYPE.tag() {
            return Err(Error::Checkpoint(format!(
                "checkpoint dtype tag {tag} does not match {}",
                T::DTYPE.name()
            )));
        }
        let config = r.string("config")?;
        let epoch = r.u64("epoch")?;
        let count = r.u32("parameter count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let tag = r.u8("parameter dtype")?;
            if tag != T::DTYPE.tag() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has dtype tag {tag}")));
            }
            let trainable = r.u8("trainable flag")? != 0;
            let rank = r.u32("rank")?;
            let shape = (0..rank).map(|_| r.u64("dimension")).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` is too large")))?;
            let data = r.values(n, &name)?;
            params.insert(name, Tensor::new(&shape, data)?.with_requires_grad(trainable))?;
        }
        let count = r.u32("velocity count")?;
        let mut velocity = Velocity::new();
        for _ in 0..count {
            let name = r.string("velocity name")?;
            let n = r.u64("velocity length")?;
            velocity.insert(name.clone(), r.values(n, &name)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            epoch,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}
