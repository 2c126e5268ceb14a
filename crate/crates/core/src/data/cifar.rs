//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! 1024 red, 1024 green and 1024 blue bytes, each plane row-major.

use crate::error::{format_err, Result};
use crate::tensor::Tensor;

use super::LabeledImage;

pub const RECORD_BYTES: usize = 1 + 3 * 32 * 32;

pub fn read_cifar10_binary(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(format_err(format!(
            "CIFAR-10 file length {} is not a multiple of {RECORD_BYTES}; record {} is truncated",
            bytes.len(),
            bytes.len() / RECORD_BYTES
        )));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0];
            if label > 9 {
                return Err(format_err(format!("record {i}: label byte {label} exceeds 9")));
            }
            let data = rec[1..].iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok(LabeledImage { image: Tensor::new(vec![3, 32, 32], data)?, label: label as usize })
        })
        .collect()
}

/// Inverse of [`read_cifar10_binary`]; pixels are rounded to the nearest
/// 1/255 step.
pub fn write_cifar10_binary(images: &[LabeledImage]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(images.len() * RECORD_BYTES);
    for (i, item) in images.iter().enumerate() {
        if item.image.shape() != [3, 32, 32] || item.label > 9 {
            return Err(format_err(format!("record {i}: not a CIFAR-10 sized image with label <= 9")));
        }
        out.push(item.label as u8);
        out.extend(item.image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}
