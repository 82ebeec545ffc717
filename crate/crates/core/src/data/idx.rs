//! IDX files (big-endian header, unsigned-byte payload).
//!
//! Images: magic `0x00000803`, dims `(N, rows, cols)`.
//! Labels: magic `0x00000801`, dims `(N)`.

use std::fs;
use std::path::Path;

use crate::error::{GcnError, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| GcnError::format(at as u64, "truncated header"))
}

fn parse(bytes: &[u8], magic: u32, rank: usize) -> Result<(Vec<usize>, &[u8])> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(GcnError::format(
            0,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| GcnError::format(4, "dimension product overflows"))?;
    let payload = &bytes[start..];
    if payload.len() < n {
        return Err(GcnError::format(
            bytes.len() as u64,
            format!("truncated payload: need {n} bytes after header, found {}", payload.len()),
        ));
    }
    if payload.len() > n {
        return Err(GcnError::format(
            (start + n) as u64,
            "trailing bytes after payload",
        ));
    }
    Ok((dims, payload))
}

/// Decode an image file into `[N, 1, rows, cols]` with pixels scaled by 1/255.
pub fn decode_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (dims, payload) = parse(bytes, IMAGES_MAGIC, 3)?;
    let data = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new([dims[0], 1, dims[1], dims[2]], data)
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let (_, payload) = parse(bytes, LABELS_MAGIC, 1)?;
    Ok(payload.to_vec())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode `[N, 1, rows, cols]` (or `[N, rows, cols]`) pixels in `[0, 1]`.
pub fn encode_images(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, r, c) = match *images.shape() {
        [n, 1, r, c] | [n, r, c] => (n, r, c),
        _ => {
            return Err(GcnError::shape(format!(
                "IDX images must be [N, 1, H, W], got {:?}",
                images.shape()
            )))
        }
    };
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, n as u32, r as u32, c as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Load an image/label file pair. Counts must agree.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<(Tensor<f32>, Vec<u8>)> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let imgs = decode_images(&fs::read(images).map_err(|e| GcnError::io(images, e))?)?;
    let labs = decode_labels(&fs::read(labels).map_err(|e| GcnError::io(labels, e))?)?;
    if imgs.shape()[0] != labs.len() {
        return Err(GcnError::Schema(format!(
            "{} images but {} labels",
            imgs.shape()[0],
            labs.len()
        )));
    }
    Ok((imgs, labs))
}
