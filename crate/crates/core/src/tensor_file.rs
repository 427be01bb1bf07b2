//! Flat binary tensor files: `MVQT` magic, u32 LE rank, rank × u32 LE dims, f32 LE payload.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MVQT";

pub fn encode(dims: &[usize], data: &[f32]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ArrayD<f32>> {
    let bad = |msg: &str| Error::TensorFile { path: path.into(), msg: msg.to_string() };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing MVQT magic"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    let rank = u32_at(4);
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank).map(|i| u32_at(8 + 4 * i)).collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + 4 * count {
        return Err(bad(&format!("payload is {} bytes, dims {:?} need {}", bytes.len() - header, dims, 4 * count)));
    }
    let data = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| bad(&e.to_string()))
}

pub fn write(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    fs::write(path, encode(dims, data)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<ArrayD<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_matrix(path: &Path, m: &Array2<f32>) -> Result<()> {
    let data: Vec<f32> = m.iter().copied().collect();
    write(path, &[m.nrows(), m.ncols()], &data)
}

pub fn read_matrix(path: &Path) -> Result<Array2<f32>> {
    let t = read(path)?;
    if t.ndim() != 2 {
        return Err(Error::TensorFile { path: path.into(), msg: format!("expected rank 2, found rank {}", t.ndim()) });
    }
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Ok(Array2::from_shape_vec((r, c), t.into_raw_vec_and_offset().0).expect("shape from header"))
}
