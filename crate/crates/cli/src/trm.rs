//! TRM: a flat little-endian matrix container.
//!
//! Layout: magic `TRM1`, `rows: u32`, `cols: u32`, then `rows * cols` IEEE-754 doubles in
//! row-major order. The payload must fill the file exactly.

use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"TRM1";
const HEADER_LEN: usize = 12;

pub fn encode(m: ArrayView2<f64>) -> CliResult<Vec<u8>> {
    let (rows, cols) = m.dim();
    let to_u32 = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| CliError::format("<matrix>", format!("{what} = {n} exceeds the u32 range")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * rows * cols);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&to_u32(rows, "rows")?.to_le_bytes());
    out.extend_from_slice(&to_u32(cols, "cols")?.to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], source: &str) -> CliResult<Array2<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(CliError::format(
            source,
            format!("{} bytes is shorter than the TRM header", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(CliError::format(source, "missing TRM1 magic"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let want = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| CliError::format(source, format!("{rows}x{cols} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != want {
        return Err(CliError::format(
            source,
            format!("{rows}x{cols} needs {want} payload bytes, found {}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked above"))
}

pub fn write(path: &Path, m: ArrayView2<f64>) -> CliResult<()> {
    let bytes = encode(m)?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> CliResult<Array2<f64>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
