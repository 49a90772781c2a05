//! `.mmt` tensor files: magic `MMT1`, little-endian u32 rank, rank × u32
//! dims, then the row-major payload as little-endian f32. Values are
//! narrowed to f32 on write and widened back to f64 on read.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMT1";

pub fn encode(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    encode(t, &mut out);
    out
}

/// Reads one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut r = bytes;
    let t = read(&mut r)?;
    Ok((t, bytes.len() - r.len()))
}

pub fn read(r: &mut impl Read) -> Result<Tensor> {
    let bad = |e: std::io::Error| Error::BadFormat(format!("truncated tensor: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(Error::BadFormat(format!("bad tensor magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(bad)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::BadFormat(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut word).map_err(bad)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 28)
        .ok_or_else(|| Error::BadFormat(format!("tensor too large: {shape:?}")))?;
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload).map_err(bad)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::BadFormat(format!("{} trailing bytes in {}", bytes.len() - used, path.display())));
    }
    Ok(t)
}
