//! Binary portable graymap (P5) files.

use std::path::Path;

use crate::error::{Error, Result};

/// Raw samples of a graymap, row-major from the top row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("cannot read {what}"))
    }
}

pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<Graymap, String> {
    if !bytes.starts_with(b"P5") {
        return Err("missing P5 magic number".into());
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err("header must end with a single whitespace byte".into()),
    }
    let wide = maxval > 255;
    let count = width * height;
    let need = count * if wide { 2 } else { 1 };
    let data = &bytes[h.pos..];
    if data.len() < need {
        return Err(format!("expected {need} bytes of pixel data, found {}", data.len()));
    }
    let samples: Vec<u16> = if wide {
        data[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data[..need].iter().map(|&b| b as u16).collect()
    };
    if let Some(s) = samples.iter().find(|&&s| s as usize > maxval) {
        return Err(format!("sample {s} exceeds maxval {maxval}"));
    }
    Ok(Graymap {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode_pgm(map: &Graymap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", map.width, map.height, map.maxval).into_bytes();
    if map.maxval > 255 {
        for s in &map.samples {
            out.extend_from_slice(&s.to_be_bytes());
        }
    } else {
        out.extend(map.samples.iter().map(|&s| s as u8));
    }
    out
}

pub fn read_pgm(path: &Path) -> Result<Graymap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|reason| Error::malformed(path, reason))
}

pub fn write_pgm(path: &Path, map: &Graymap) -> Result<()> {
    std::fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path, e))
}

/// Maps model intensities in `[0, 2]` to 8-bit samples, clamping outside values.
pub fn quantize(values: &[f64]) -> Vec<u16> {
    values
        .iter()
        .map(|v| {
            let s = (v * 127.5).round();
            if s.is_nan() {
                0
            } else {
                s.clamp(0.0, 255.0) as u16
            }
        })
        .collect()
}

/// An 8-bit graymap of a `width x height` image in model intensities.
pub fn to_graymap(values: &[f64], width: usize, height: usize) -> Graymap {
    Graymap {
        width,
        height,
        maxval: 255,
        samples: quantize(values),
    }
}
