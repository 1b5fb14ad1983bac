//! The `NSDS` sample archive exchanged between pipeline stages.
//!
//! ```text
//! "NSDS" | version u16 | class count u32 | (name len u32, name UTF-8)*
//! sample count u32 | per sample: class u16 | synthetic u8 | height u32 | width u32 | f32 × h·w
//! ```
//!
//! Integers and floats are little-endian. Images are single-channel.

use std::path::Path;

use crate::dataset::{LabeledSet, Sample};
use crate::error::{Error, Result};
use crate::imaging::Image;

pub const MAGIC: &[u8; 4] = b"NSDS";
pub const VERSION: u16 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::ArchiveFormat(msg.into())
}

pub fn encode(set: &LabeledSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.num_classes() as u32).to_le_bytes());
    for name in set.class_names() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for s in set.samples() {
        let img = &s.image;
        if img.channels() != 1 {
            return Err(bad(format!(
                "archives hold single-channel images, got {} channels",
                img.channels()
            )));
        }
        let label = u16::try_from(s.label).map_err(|_| bad("class index exceeds u16"))?;
        out.extend_from_slice(&label.to_le_bytes());
        out.push(u8::from(s.synthetic));
        out.extend_from_slice(&(img.height() as u32).to_le_bytes());
        out.extend_from_slice(&(img.width() as u32).to_le_bytes());
        for &v in img.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(format!("archive truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<LabeledSet> {
    let mut r = Cursor { bytes, pos: 0 };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(bad("not a sample archive (bad magic)"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported archive version {version}")));
    }
    let classes = r.u32()? as usize;
    let mut names = Vec::with_capacity(classes.min(1024));
    for _ in 0..classes {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| bad("class name is not UTF-8"))?;
        names.push(name.to_owned());
    }
    let count = r.u32()? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let label = r.u16()? as usize;
        let synthetic = match r.take(1)?[0] {
            0 => false,
            1 => true,
            f => return Err(bad(format!("invalid synthetic flag {f}"))),
        };
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let len = h.checked_mul(w).ok_or_else(|| bad("image dimensions overflow"))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| bad("image dimensions overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let image = Image::new(h, w, 1, data).map_err(|e| bad(e.to_string()))?;
        samples.push(Sample {
            image,
            label,
            synthetic,
        });
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    LabeledSet::new(names, samples).map_err(|e| bad(e.to_string()))
}

pub fn write(set: &LabeledSet, path: &Path) -> Result<Vec<u8>> {
    let bytes = encode(set)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub fn read(path: &Path) -> Result<LabeledSet> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
