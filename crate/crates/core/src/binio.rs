//! Little-endian payload helpers for the bundle, checkpoint and trace files.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// 8-byte dims header: rows then cols, both u32.
pub(crate) fn push_header(out: &mut Vec<u8>, rows: usize, cols: usize) {
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
}

pub(crate) fn split_header<'a>(bytes: &'a [u8], what: &str) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 8 {
        return Err(Error::dims(format!("{what}: missing 8-byte dims header")));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    Ok((rows, cols, &bytes[8..]))
}

pub(crate) fn push_f32_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for x in m.iter() {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

pub(crate) fn f32_matrix(payload: &[u8], rows: usize, cols: usize, what: &str) -> Result<Matrix> {
    if payload.len() != rows * cols * 4 {
        return Err(Error::dims(format!(
            "{what}: expected {} bytes for {rows}x{cols} f32, found {}",
            rows * cols * 4,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

/// Writes matrices as `u32 count` followed by header-prefixed f32 payloads.
pub fn write_matrix_list(path: &Path, mats: &[&Matrix]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&(mats.len() as u32).to_le_bytes());
    for m in mats {
        push_header(&mut out, m.nrows(), m.ncols());
        push_f32_matrix(&mut out, m);
    }
    write_file(path, &out)
}

pub fn read_matrix_list(path: &Path) -> Result<Vec<Matrix>> {
    let bytes = read_file(path)?;
    if bytes.len() < 4 {
        return Err(Error::dims("matrix list: missing count"));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let mut rest = &bytes[4..];
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let (rows, cols, payload) = split_header(rest, "matrix list")?;
        let len = rows * cols * 4;
        if payload.len() < len {
            return Err(Error::dims(format!("matrix list entry {k} truncated")));
        }
        out.push(f32_matrix(&payload[..len], rows, cols, "matrix list")?);
        rest = &payload[len..];
    }
    Ok(out)
}
