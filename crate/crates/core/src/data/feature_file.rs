//! Binary feature-file codec.
//!
//! Layout (all integers little-endian):
//! `"DAMSFEAT"` | version `u16` | rank `u8` | rank × extent `u32` |
//! payload `f64` × product(extents) | CRC32 of the payload bytes `u32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DAMSFEAT";
pub const FORMAT_VERSION: u16 = 1;
pub const MAX_RANK: usize = 3;

/// Serializes a row-major array. Rank must be 1..=3 and every extent non-zero.
pub fn encode(shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::dim(format!("feature files hold rank 1..=3, got rank {}", shape.len())));
    }
    if let Some(d) = shape.iter().position(|&e| e == 0) {
        return Err(Error::dim(format!("extent {d} of {shape:?} is zero")));
    }
    if shape.iter().any(|&e| e > u32::MAX as usize) {
        return Err(Error::dim(format!("extent of {shape:?} exceeds u32")));
    }
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::dim(format!("shape {shape:?} needs {n} values, got {}", data.len())));
    }
    let mut out = Vec::with_capacity(MAGIC.len() + 3 + 4 * shape.len() + 8 * n + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    let start = out.len();
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &'static str) -> std::result::Result<&'a [u8], FormatError> {
    if buf.len() < n {
        return Err(FormatError::Truncated(what));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

/// Parses and verifies a feature file image.
pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, FormatError> {
    let mut buf = bytes;
    if take(&mut buf, MAGIC.len(), "magic")? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = u16::from_le_bytes(take(&mut buf, 2, "version")?.try_into().expect("2 bytes"));
    if version != FORMAT_VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let rank = take(&mut buf, 1, "rank")?[0] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(FormatError::InvalidHeader(format!("rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = u32::from_le_bytes(take(&mut buf, 4, "extents")?.try_into().expect("4 bytes"));
        if e == 0 {
            return Err(FormatError::InvalidHeader("zero extent".into()));
        }
        shape.push(e as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| FormatError::InvalidHeader(format!("extents {shape:?} overflow")))?;
    let payload = take(&mut buf, n, "payload")?;
    let stored = u32::from_le_bytes(take(&mut buf, 4, "crc")?.try_into().expect("4 bytes"));
    if !buf.is_empty() {
        return Err(FormatError::InvalidHeader(format!("{} trailing bytes", buf.len())));
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed });
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Tensor::new(&shape, data).map_err(|e| FormatError::InvalidHeader(e.to_string()))
}

pub fn write_feature_file(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor.shape(), tensor.data())?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|source| Error::Format { path: path.to_path_buf(), source })
}
