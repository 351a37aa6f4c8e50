//! Binary (P5) portable graymaps: 8/16-bit previews and 8-bit region masks.

use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    Eight,
    Sixteen,
}

impl Depth {
    pub fn max_level(self) -> u16 {
        match self {
            Depth::Eight => u8::MAX as u16,
            Depth::Sixteen => u16::MAX,
        }
    }
}

pub fn encode(levels: ArrayView2<u16>, depth: Depth) -> CliResult<Vec<u8>> {
    let max = depth.max_level();
    if let Some(v) = levels.iter().find(|&&v| v > max) {
        return Err(CliError::format("<image>", format!("level {v} exceeds maxval {max}")));
    }
    let (rows, cols) = levels.dim();
    let mut out = format!("P5\n{cols} {rows}\n{max}\n").into_bytes();
    for &v in levels.iter() {
        match depth {
            Depth::Eight => out.push(v as u8),
            // PGM stores 16-bit samples most significant byte first
            Depth::Sixteen => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], source: &str) -> CliResult<Array2<u16>> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    let magic = next_token(bytes, &mut pos).ok_or_else(|| CliError::format(source, "empty file"))?;
    if magic != b"P5" {
        return Err(CliError::format(source, "not a binary PGM (expected P5 magic)"));
    }
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| CliError::format(source, format!("missing {name}")))?;
        fields[k] = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| CliError::format(source, format!("bad {name}")))?;
    }
    let [cols, rows, maxval] = fields;
    if maxval == 0 || maxval > u16::MAX as usize {
        return Err(CliError::format(source, format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let width = if maxval > 255 { 2 } else { 1 };
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != rows * cols * width {
        return Err(CliError::format(
            source,
            format!(
                "{cols}x{rows} raster needs {} bytes, found {}",
                rows * cols * width,
                raster.len()
            ),
        ));
    }
    let data = if width == 1 {
        raster.iter().map(|&b| b as u16).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked above"))
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

pub fn write(path: &Path, levels: ArrayView2<u16>, depth: Depth) -> CliResult<()> {
    let bytes = encode(levels, depth)?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> CliResult<Array2<u16>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

/// Row-major indices of the nonzero pixels of a mask image of the given shape.
pub fn read_mask(path: &Path, image_shape: (usize, usize)) -> CliResult<Vec<usize>> {
    let img = read(path)?;
    if img.dim() != image_shape {
        return Err(CliError::config(
            path.display().to_string(),
            format!(
                "mask is {}x{}, the image is {}x{}",
                img.nrows(),
                img.ncols(),
                image_shape.0,
                image_shape.1
            ),
        ));
    }
    Ok(img
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(i, _)| i)
        .collect())
}

/// Linear map of `values` onto `0..=max_level` over `[lo, hi]`, clipping outside it.
pub fn quantize(values: ArrayView2<f64>, lo: f64, hi: f64, depth: Depth) -> Array2<u16> {
    let max = depth.max_level() as f64;
    let span = hi - lo;
    values.mapv(|v| {
        if !(span > 0.0) || !v.is_finite() {
            return 0;
        }
        (((v - lo) / span).clamp(0.0, 1.0) * max).round() as u16
    })
}
