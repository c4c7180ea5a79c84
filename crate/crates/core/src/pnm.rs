//! Minimal binary PGM (`P5`) and PPM (`P6`) codecs, 8 bits per sample.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

pub fn write_pgm(path: &Path, pixels: &Array2<u8>) -> Result<()> {
    let (h, w) = pixels.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if c != 3 {
        return Err(Error::Shape(format!("ppm needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Array2<u8>> {
    let (magic, w, h, data) = read_raw(path)?;
    if magic != "P5" {
        return Err(Error::parse(path, format!("expected P5, found {magic}")));
    }
    Array2::from_shape_vec((h, w), data).map_err(|e| Error::parse(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Array3<u8>> {
    let (magic, w, h, data) = read_raw(path)?;
    if magic != "P6" {
        return Err(Error::parse(path, format!("expected P6, found {magic}")));
    }
    Array3::from_shape_vec((h, w, 3), data).map_err(|e| Error::parse(path, e))
}

/// Converts an 8-bit RGB image to `[0, 1]` floats.
pub fn to_unit(pixels: &Array3<u8>) -> Array3<f32> {
    pixels.mapv(|v| v as f32 / 255.0)
}

/// Converts `[0, 1]` floats to 8-bit, clamping out-of-range values.
pub fn from_unit(pixels: &Array3<f32>) -> Array3<u8> {
    pixels.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

fn read_raw(path: &Path) -> Result<(String, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(path, format!("bad header field `{s}`")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::parse(path, format!("unsupported maxval {maxval}")));
    }
    let channels = if fields[0] == "P6" { 3 } else { 1 };
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::parse(path, "truncated raster"));
    }
    Ok((fields[0].clone(), w, h, bytes[pos..pos + need].to_vec()))
}
