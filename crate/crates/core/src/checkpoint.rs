//! Named-tensor checkpoint container.
//!
//! Layout (little-endian): magic `TPFC`, version `u32`, entry count `u32`,
//! then per entry: name length `u32`, UTF-8 name, rank `u32`, each dim as
//! `u64`, and the row-major values as `f64`. Encoding is a pure function of
//! the entries, so a read/write round trip reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TPFC";
const VERSION: u32 = 1;

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode(bytes: &[u8], record: &str) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::parse(
                record,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::parse(record, "not a checkpoint (bad magic)"));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_of(take(4, "version")?);
    if version != VERSION {
        return Err(Error::parse(
            record,
            format!("unsupported version {version}"),
        ));
    }
    let count = u32_of(take(4, "entry count")?) as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = u32_of(take(4, "name length")?) as usize;
        let name = String::from_utf8(take(len, "name")?.to_vec())
            .map_err(|_| Error::parse(record, format!("entry {i}: name is not utf-8")))?;
        let rank = u32_of(take(4, "rank")?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8, "dim")?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel * 8, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::parse(record, "trailing bytes"));
    }
    Ok(out)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(entries))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path)?, &path.display().to_string())
}
