//! Bounds-checked little-endian readers/writers shared by the binary file
//! formats. All readers take the whole buffer plus a cursor so every failure
//! can report the exact byte offset.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use std::path::Path;

pub(crate) fn take<'a>(
    buf: &'a [u8],
    offset: &mut usize,
    n: usize,
    path: &Path,
) -> Result<&'a [u8]> {
    match offset.checked_add(n).filter(|&e| e <= buf.len()) {
        Some(end) => {
            let slice = &buf[*offset..end];
            *offset = end;
            Ok(slice)
        }
        None => Err(Error::format(
            path,
            format!("truncated at byte {offset} (needed {n} more)"),
        )),
    }
}

pub(crate) fn read_u8(buf: &[u8], offset: &mut usize, path: &Path) -> Result<u8> {
    Ok(take(buf, offset, 1, path)?[0])
}

pub(crate) fn read_u32(buf: &[u8], offset: &mut usize, path: &Path) -> Result<u32> {
    let bytes = take(buf, offset, 4, path)?;
    Ok(u32::from_le_bytes(bytes.try_into().unwrap()))
}

/// Reads a `rows x cols` matrix stored as 8-byte floats, rejecting non-finite
/// entries.
pub(crate) fn read_f64_matrix(
    buf: &[u8],
    offset: &mut usize,
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<Matrix> {
    let n = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::format(path, "matrix dimensions overflow"))?;
    let start = *offset;
    let bytes = take(buf, offset, n, path)?;
    let mut data = Vec::with_capacity(rows * cols);
    for (i, chunk) in bytes.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(
                path,
                format!("non-finite value at byte {}", start + i * 8),
            ));
        }
        data.push(v as Real);
    }
    Matrix::from_vec(rows, cols, data)
}

/// Appends a matrix as 8-byte little-endian floats, row-major.
pub(crate) fn push_f64_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    for &v in m.data() {
        buf.extend_from_slice(&(v as f64).to_le_bytes());
    }
}

pub(crate) fn expect_eof(buf: &[u8], offset: usize, path: &Path) -> Result<()> {
    if offset != buf.len() {
        return Err(Error::format(
            path,
            format!(
                "{} unexpected trailing bytes at byte {offset}",
                buf.len() - offset
            ),
        ));
    }
    Ok(())
}

pub(crate) fn check_magic(
    buf: &[u8],
    offset: &mut usize,
    magic: &[u8; 4],
    path: &Path,
) -> Result<()> {
    let got = take(buf, offset, 4, path)?;
    if got != magic {
        return Err(Error::format(
            path,
            format!("bad magic at byte 0: expected {magic:?}, got {got:?}"),
        ));
    }
    Ok(())
}

pub(crate) fn check_version(
    buf: &[u8],
    offset: &mut usize,
    expected: u32,
    path: &Path,
) -> Result<()> {
    let version = read_u32(buf, offset, path)?;
    if version != expected {
        return Err(Error::format(
            path,
            format!("unsupported version {version} at byte 4 (expected {expected})"),
        ));
    }
    Ok(())
}
