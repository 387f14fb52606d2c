//! `AFF1` feature matrices: magic, `u32` rows, `u32` cols, then `f32` values,
//! all little-endian and row-major.

use std::fs;
use std::path::Path;

use super::{DataError, Matrix};

pub const FEATURE_MAGIC: &[u8; 4] = b"AFF1";

const HEADER: usize = 12;

/// Values are narrowed to `f32` on disk.
pub fn write_feature_file(path: impl AsRef<Path>, m: &Matrix) -> Result<(), DataError> {
    let path = path.as_ref();
    let overflow = || DataError::DimOverflow(path.to_path_buf());
    let rows = u32::try_from(m.rows).map_err(|_| overflow())?;
    let cols = u32::try_from(m.cols).map_err(|_| overflow())?;
    let mut out = Vec::with_capacity(HEADER + m.data.len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for &v in &m.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(DataError::io(path))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Matrix, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(DataError::io(path))?;
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(DataError::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER {
        return Err(DataError::TruncatedFile(path.to_path_buf()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (u32_at(4), u32_at(8));
    let len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| DataError::DimOverflow(path.to_path_buf()))?;
    let body = &bytes[HEADER..];
    if body.len() < len {
        return Err(DataError::TruncatedFile(path.to_path_buf()));
    }
    let data = body[..len]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::new(rows, cols, data)
}
