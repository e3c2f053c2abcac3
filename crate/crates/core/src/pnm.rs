//! Binary 8-bit portable anymaps: P6 (RGB) and P5 (grey).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded image: `channels` interleaved bytes per pixel, row major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn encode(img: &Pnm) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Pnm> {
    let bad = |reason: &str| Error::format(path, reason.to_string());
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(bad("not a binary PPM/PGM (magic must be P6 or P5)")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number().ok_or_else(|| bad("missing width"))?;
    let height = h.number().ok_or_else(|| bad("missing height"))?;
    let maxval = h.number().ok_or_else(|| bad("missing maxval"))?;
    if maxval != 255 {
        return Err(bad(&format!("only 8-bit maps are supported, maxval {maxval}")));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(bad("header must end with one whitespace byte")),
    }
    let need = width * height * channels;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(bad(&format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    Ok(Pnm {
        width,
        height,
        channels,
        data: payload[..need].to_vec(),
    })
}

pub fn write(path: &Path, img: &Pnm) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
