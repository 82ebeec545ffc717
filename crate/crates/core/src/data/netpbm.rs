//! Binary PGM (P5) and PPM (P6), 8-bit.

use std::fs;
use std::path::Path;

use crate::error::{GcnError, Result};
use crate::tensor::Tensor;

/// `[0, 1]` to a byte: clamp, scale by 255, round half away from zero.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode `[1, H, W]` as P5 or `[3, H, W]` as P6.
pub fn encode(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [c @ (1 | 3), h, w] => (c, h, w),
        _ => {
            return Err(GcnError::shape(format!(
                "netpbm needs [1|3, H, W], got {:?}",
                image.shape()
            )))
        }
    };
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    let plane = h * w;
    let d = image.data();
    for p in 0..plane {
        for ch in 0..c {
            out.push(to_byte(d[ch * plane + p]));
        }
    }
    Ok(out)
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: usize,
    data_at: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(GcnError::format(0, "expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| GcnError::format(start as u64, "expected a decimal header field"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(GcnError::format(pos as u64, "header must end with one whitespace byte"));
    }
    let [width, height, maxval] = fields;
    Ok(Header {
        channels,
        width,
        height,
        maxval,
        data_at: pos + 1,
    })
}

/// Decode to `[C, H, W]` with pixels divided by 255.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = parse_header(bytes)?;
    if h.maxval != 255 {
        return Err(GcnError::format(0, format!("only maxval 255 is supported, got {}", h.maxval)));
    }
    let n = h.channels * h.width * h.height;
    let payload = &bytes[h.data_at..];
    if payload.len() < n {
        return Err(GcnError::format(
            bytes.len() as u64,
            format!("truncated raster: need {n} bytes, found {}", payload.len()),
        ));
    }
    let plane = h.width * h.height;
    let mut data = vec![0f32; n];
    for p in 0..plane {
        for ch in 0..h.channels {
            data[ch * plane + p] = payload[p * h.channels + ch] as f32 / 255.0;
        }
    }
    Tensor::new([h.channels, h.height, h.width], data)
}

pub fn save(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(image)?).map_err(|e| GcnError::io(path, e))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| GcnError::io(path, e))?)
}
