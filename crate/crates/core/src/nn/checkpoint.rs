//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NSPM" | version u16 | arch-id len u32 | arch-id UTF-8 | tensor count u32
//! per tensor: name len u32 | name UTF-8 | rank u8 | dims u32 × rank | values f32 × Π dims
//! ```

use std::path::Path;

use super::model::{build, Architecture, Model};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NSPM";
pub const VERSION: u16 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(model: &Model) -> Vec<u8> {
    let params = model.params();
    let mut out = Vec::with_capacity(64 + model.num_parameters() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &model.architecture().to_string());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        put_str(&mut out, &p.name);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::CheckpointFormat(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CheckpointFormat("string is not valid UTF-8".into()))
    }
}

/// Reads the architecture id without decoding any weights.
pub fn peek_architecture(bytes: &[u8]) -> Result<Architecture> {
    let mut r = Reader { bytes, pos: 0 };
    read_header(&mut r)
}

fn read_header(r: &mut Reader) -> Result<Architecture> {
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::CheckpointFormat("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    Architecture::parse(&r.string()?)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let arch = read_header(&mut r)?;
    let mut model = build(&arch, 0)?;
    let count = r.u32()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(Error::CheckpointFormat(format!(
            "{arch} has {} parameter tensors, checkpoint has {count}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let name = r.string()?;
        if name != p.name {
            return Err(Error::CheckpointFormat(format!(
                "expected parameter {}, found {name}",
                p.name
            )));
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        if dims != p.value.shape() {
            return Err(Error::CheckpointFormat(format!(
                "{name}: shape {dims:?} does not match {:?}",
                p.value.shape()
            )));
        }
        let raw = r.take(4 * p.value.len())?;
        for (v, b) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap()) as f64;
        }
    }
    drop(params);
    if r.pos != bytes.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    model.zero_grad();
    Ok(model)
}

pub fn write_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, save_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    load_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
