//! On-disk dataset directory: `header.json` plus `images.bin`.
//!
//! `images.bin` is a sequence of fixed-size little-endian records:
//!
//! | bytes   | field                                              |
//! |---------|----------------------------------------------------|
//! | 4       | class label (u32)                                  |
//! | 4       | corruption index into `header.registry` (u32)      |
//! | 4       | severity level, 0 when not applicable (u32)        |
//! | 4·C·H·W | pixels as f32, channel-major then row-major        |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corruption::{CorruptionKind, Severity};
use crate::error::{format_err, PanError, Result};
use crate::tensor::Tensor;

use super::{CorruptedSample, LabeledImage, IMAGE_SHAPE};

pub const FORMAT_TAG: &str = "pan-dataset-v1";
pub const HEADER_FILE: &str = "header.json";
pub const BLOB_FILE: &str = "images.bin";
const MAX_PIXELS: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub registry: Vec<CorruptionKind>,
    pub severities: Vec<Severity>,
    pub count: usize,
    pub seed: u64,
    pub record_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub image: Tensor,
    pub label: usize,
    pub corruption: CorruptionKind,
    pub severity: Option<Severity>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiskDataset {
    pub header: DatasetHeader,
    pub samples: Vec<StoredSample>,
}

impl DiskDataset {
    pub fn from_samples(samples: Vec<StoredSample>, num_classes: usize, seed: u64) -> Result<Self> {
        let mut registry: Vec<CorruptionKind> = Vec::new();
        let mut severities: Vec<Severity> = Vec::new();
        for s in &samples {
            if s.image.shape() != IMAGE_SHAPE {
                return Err(PanError::Config(format!("dataset images must be {IMAGE_SHAPE:?}, got {:?}", s.image.shape())));
            }
            if s.label >= num_classes {
                return Err(PanError::Config(format!("label {} out of range for {num_classes} classes", s.label)));
            }
            if !registry.contains(&s.corruption) {
                registry.push(s.corruption);
            }
            if let Some(sev) = s.severity {
                if !severities.contains(&sev) {
                    severities.push(sev);
                }
            }
        }
        registry.sort_unstable();
        severities.sort_unstable();
        let [channels, height, width] = IMAGE_SHAPE;
        Ok(Self {
            header: DatasetHeader {
                format: FORMAT_TAG.into(),
                channels,
                height,
                width,
                num_classes,
                registry,
                severities,
                count: samples.len(),
                seed,
                record_bytes: 12 + 4 * channels * height * width,
            },
            samples,
        })
    }

    pub fn from_clean(images: &[LabeledImage], num_classes: usize, seed: u64) -> Result<Self> {
        let samples = images
            .iter()
            .map(|s| StoredSample { image: s.image.clone(), label: s.label, corruption: CorruptionKind::Clean, severity: None })
            .collect();
        Self::from_samples(samples, num_classes, seed)
    }

    pub fn from_corrupted(samples: &[CorruptedSample], num_classes: usize, seed: u64) -> Result<Self> {
        let samples = samples
            .iter()
            .map(|s| StoredSample {
                image: s.image.clone(),
                label: s.label,
                corruption: s.corruption,
                severity: Some(s.severity),
            })
            .collect();
        Self::from_samples(samples, num_classes, seed)
    }

    pub fn labeled(&self) -> Vec<LabeledImage> {
        self.samples.iter().map(|s| LabeledImage { image: s.image.clone(), label: s.label }).collect()
    }

    /// Samples with corruption metadata; fails on records without severity.
    pub fn corrupted(&self) -> Result<Vec<CorruptedSample>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(CorruptedSample {
                    image: s.image.clone(),
                    label: s.label,
                    corruption: s.corruption,
                    severity: s
                        .severity
                        .ok_or_else(|| PanError::Config(format!("record {i} carries no corruption severity")))?,
                })
            })
            .collect()
    }

    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut header = serde_json::to_vec(&self.header).map_err(|e| format_err(e.to_string()))?;
        header.push(b'\n');
        let mut blob = Vec::with_capacity(self.samples.len() * self.header.record_bytes);
        for s in &self.samples {
            let cid = self.header.registry.iter().position(|&k| k == s.corruption).expect("registry built from samples");
            blob.extend_from_slice(&(s.label as u32).to_le_bytes());
            blob.extend_from_slice(&(cid as u32).to_le_bytes());
            blob.extend_from_slice(&u32::from(s.severity.map_or(0, u8::from)).to_le_bytes());
            for &v in s.image.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok((header, blob))
    }
}

/// Parse a dataset from its header and blob bytes.
pub fn decode_dataset(header_bytes: &[u8], blob: &[u8]) -> Result<DiskDataset> {
    let header: DatasetHeader =
        serde_json::from_slice(header_bytes).map_err(|e| format_err(format!("dataset header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(format_err(format!("unsupported dataset format '{}'", header.format)));
    }
    if header.channels == 0 || header.height == 0 || header.width == 0 {
        return Err(format_err("dataset header has a zero image dimension"));
    }
    let pixels = header
        .channels
        .checked_mul(header.height)
        .and_then(|v| v.checked_mul(header.width))
        .filter(|&p| p <= MAX_PIXELS)
        .ok_or_else(|| format_err("dataset image dimensions are implausibly large"))?;
    if header.record_bytes != 12 + 4 * pixels {
        return Err(format_err(format!(
            "record_bytes {} does not match {}x{}x{} images",
            header.record_bytes, header.channels, header.height, header.width
        )));
    }
    if header.num_classes == 0 {
        return Err(format_err("dataset header declares zero classes"));
    }
    let expected = header
        .count
        .checked_mul(header.record_bytes)
        .ok_or_else(|| format_err("dataset record count overflows"))?;
    if blob.len() != expected {
        return Err(format_err(format!(
            "images.bin has {} bytes, header promises {} records of {} bytes",
            blob.len(),
            header.count,
            header.record_bytes
        )));
    }
    let shape = vec![header.channels, header.height, header.width];
    let mut samples = Vec::with_capacity(header.count);
    for (i, rec) in blob.chunks_exact(header.record_bytes).enumerate() {
        let word = |k: usize| u32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        let label = word(0) as usize;
        if label >= header.num_classes {
            return Err(format_err(format!("record {i}: label {label} >= {} classes", header.num_classes)));
        }
        let corruption = *header
            .registry
            .get(word(1) as usize)
            .ok_or_else(|| format_err(format!("record {i}: corruption index {} not in registry", word(1))))?;
        let severity = match word(2) {
            0 => None,
            lvl => Some(
                u8::try_from(lvl)
                    .map_err(|_| ())
                    .and_then(|l| Severity::new(l).map_err(|_| ()))
                    .map_err(|_| format_err(format!("record {i}: bad severity {lvl}")))?,
            ),
        };
        let mut data = Vec::with_capacity(pixels);
        for chunk in rec[12..].chunks_exact(4) {
            let v = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
            if !(0.0..=1.0).contains(&v) {
                return Err(format_err(format!("record {i}: pixel value {v} outside [0, 1]")));
            }
            data.push(v);
        }
        samples.push(StoredSample { image: Tensor::new(shape.clone(), data)?, label, corruption, severity });
    }
    Ok(DiskDataset { header, samples })
}

pub fn save_dataset(dir: &Path, dataset: &DiskDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (header, blob) = dataset.encode()?;
    fs::write(dir.join(HEADER_FILE), header)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DiskDataset> {
    let header = fs::read(dir.join(HEADER_FILE))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    decode_dataset(&header, &blob)
}
