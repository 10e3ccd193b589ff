//! Binary portable graymap/pixmap (P5/P6) codec, 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Decoded 8-bit image, row-major, `channels` samples per pixel (1 or 3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u8>,
}

impl Pixmap {
    /// `[H, W, 3]` tensor scaled to `[0, 1]`; graymaps are replicated
    /// across channels.
    pub fn to_rgb_tensor(&self) -> Tensor {
        let max = f64::from(self.maxval);
        let mut data = Vec::with_capacity(self.width * self.height * 3);
        for px in self.samples.chunks_exact(self.channels) {
            if self.channels == 1 {
                data.extend([f64::from(px[0]) / max; 3]);
            } else {
                data.extend(px.iter().map(|&v| f64::from(v) / max));
            }
        }
        Tensor::new(vec![self.height, self.width, 3], data).expect("pixmap size")
    }
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> std::result::Result<usize, String> {
    *pos = skip_space_and_comments(bytes, *pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format!("missing {what} in header"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse()
        .map_err(|_| format!("{what} out of range"))
}

/// Parses a P5 or P6 file held in memory.
pub fn decode(bytes: &[u8]) -> std::result::Result<Pixmap, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary P5/P6 file".into()),
    };
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(format!("maxval {maxval} unsupported (8-bit only)"));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err("header not terminated by whitespace".into()),
    }
    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(format!("payload is {} bytes, header implies {expected}", payload.len()));
    }
    Ok(Pixmap {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples: payload.to_vec(),
    })
}

pub fn encode(p: &Pixmap) -> Vec<u8> {
    let magic = if p.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n{}\n", p.width, p.height, p.maxval).into_bytes();
    out.extend_from_slice(&p.samples);
    out
}

pub fn read(path: &Path) -> Result<Pixmap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|m| Error::format(path, m))
}

pub fn write(path: &Path, p: &Pixmap) -> Result<()> {
    std::fs::write(path, encode(p)).map_err(|e| Error::io(path, e))
}

/// Rounds `[0, 1]` values to 8 bits, clamping out-of-range input.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit P6 pixmap from an `[H, W, 3]` tensor.
pub fn rgb_from_tensor(t: &Tensor) -> Result<Pixmap> {
    let [h, w, 3] = *t.shape() else {
        return Err(crate::error::invalid!("expected [H, W, 3] image, got {:?}", t.shape()));
    };
    Ok(Pixmap {
        width: w,
        height: h,
        channels: 3,
        maxval: 255,
        samples: t.data().iter().map(|&v| quantize(v)).collect(),
    })
}

/// 8-bit P5 graymap from a `[H, W]` map, min-max normalised. A constant map
/// becomes all zeros.
pub fn gray_from_map(t: &Tensor) -> Result<Pixmap> {
    let [h, w] = *t.shape() else {
        return Err(crate::error::invalid!("expected [H, W] map, got {:?}", t.shape()));
    };
    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let samples = t
        .data()
        .iter()
        .map(|&v| if range > 0.0 { quantize((v - lo) / range) } else { 0 })
        .collect();
    Ok(Pixmap {
        width: w,
        height: h,
        channels: 1,
        maxval: 255,
        samples,
    })
}
