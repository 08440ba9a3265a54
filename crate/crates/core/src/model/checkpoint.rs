//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "TGCK"
//! version    u32      1
//! in_ch      u32
//! features   u32
//! classes    u32
//! blocks     u32      number of parameter blocks
//! per block: u64 length, then `length` f64 values
//! ```

use std::fs;
use std::path::Path;

use super::{Architecture, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TGCK";
pub const VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + params.len() * 8 + params.blocks.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [params.arch.in_channels, params.arch.features, params.arch.classes, params.blocks.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for block in &params.blocks {
        out.extend_from_slice(&(block.len() as u64).to_le_bytes());
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let arch = Architecture::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let expected = arch.block_lens();
    let nblocks = r.u32()? as usize;
    if nblocks != expected.len() {
        return Err(Error::Format(format!("expected {} blocks, found {nblocks}", expected.len())));
    }
    let mut blocks = Vec::with_capacity(nblocks);
    for want in expected {
        let len = r.u64()? as usize;
        if len != want {
            return Err(Error::Format(format!("block length {len}, architecture needs {want}")));
        }
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Format("block too large".into()))?)?;
        blocks.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(ModelParams { arch, blocks })
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    from_bytes(&fs::read(path)?)
}
