//! Binary PPM (P6) images and PGM (P5) masks, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{io_err, DataError, Result};

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a (3,H,W) unit-range image as binary PPM.
pub fn write_ppm(path: &Path, image: &[f32], h: usize, w: usize) -> Result<()> {
    debug_assert_eq!(image.len(), 3 * h * w);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            bytes.push(quantize(image[c * h * w + i]));
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Write a binary (H,W) mask as PGM with values {0, 255}; 255 = manipulated.
pub fn write_pgm(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    debug_assert_eq!(mask.len(), h * w);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.iter().map(|&m| if m != 0 { 255u8 } else { 0 }));
    fs::write(path, bytes).map_err(io_err(path))
}

/// Write an (H,W) unit-range heat map as 8-bit PGM, rescaled so the maximum
/// maps to 255.
pub fn write_pgm_heatmap(path: &Path, map: &[f32], h: usize, w: usize) -> Result<()> {
    let max = map.iter().cloned().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.iter().map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8));
    fs::write(path, bytes).map_err(io_err(path))
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Parser<'a> {
    fn fail<T>(&self, what: impl Into<String>) -> Result<T> {
        Err(DataError::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            what: what.into(),
        })
    }

    /// Skip whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail("expected a decimal number");
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| self.fail("number out of range"), Ok)
    }

    fn header(&mut self, magic: &[u8; 2]) -> Result<(usize, usize)> {
        if self.bytes.len() < 2 || &self.bytes[..2] != magic {
            return self.fail(format!(
                "bad magic, expected {}",
                std::str::from_utf8(magic).unwrap()
            ));
        }
        self.pos = 2;
        let w = self.number()?;
        let h = self.number()?;
        let maxval = self.number()?;
        if maxval != 255 {
            return self.fail(format!("unsupported maxval {maxval}, expected 255"));
        }
        // Exactly one whitespace byte separates the header from raster data.
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return self.fail("missing separator before raster data");
        }
        self.pos += 1;
        Ok((w, h))
    }

    fn raster(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + len {
            let have = self.bytes.len() - self.pos;
            return self.fail(format!("raster truncated: expected {len} bytes, found {have}"));
        }
        let data = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(data)
    }
}

/// Read a binary PPM into a (3,H,W) unit-range buffer.
pub fn read_ppm(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut p = Parser { bytes: &bytes, pos: 0, path };
    let (w, h) = p.header(b"P6")?;
    let raster = p.raster(3 * w * h)?;
    let mut image = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            image[c * h * w + i] = raster[3 * i + c] as f32 / 255.0;
        }
    }
    Ok((image, h, w))
}

/// Read a binary mask PGM; pixels must be exactly 0 or 255.
pub fn read_pgm_mask(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut p = Parser { bytes: &bytes, pos: 0, path };
    let (w, h) = p.header(b"P5")?;
    let start = p.pos;
    let raster = p.raster(w * h)?;
    let mut mask = Vec::with_capacity(w * h);
    for (i, &b) in raster.iter().enumerate() {
        match b {
            0 => mask.push(0u8),
            255 => mask.push(1u8),
            other => {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    offset: start + i,
                    what: format!("mask value {other} is neither 0 nor 255"),
                })
            }
        }
    }
    Ok((mask, h, w))
}

/// Read a PGM as unit-range grayscale (any 8-bit values).
pub fn read_pgm_gray(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut p = Parser { bytes: &bytes, pos: 0, path };
    let (w, h) = p.header(b"P5")?;
    let raster = p.raster(w * h)?;
    Ok((raster.iter().map(|&b| b as f32 / 255.0).collect(), h, w))
}
