//! Exogenous corruption operators C_{k,s}.
//!
//! Every operator maps a 3×H×W image in [0,1] to another one in [0,1] and is
//! deterministic given its [`Rng`]. Severity parameters follow the
//! five-level layout of the common corruption benchmarks, scaled for 32×32
//! inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{CorruptedSample, LabeledImage};
use crate::error::{shape_err, PanError, Result};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    Contrast,
    Brightness,
    Fog,
    Pixelate,
    Clean,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 10] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Fog,
        CorruptionKind::Pixelate,
        CorruptionKind::Clean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Clean => "clean",
        }
    }

    /// Operators that draw random numbers.
    pub fn is_stochastic(self) -> bool {
        matches!(self, CorruptionKind::GaussianNoise | CorruptionKind::ShotNoise | CorruptionKind::ImpulseNoise)
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = PanError;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| PanError::Parameter(format!("unknown corruption type '{s}'")))
    }
}

/// Severity level 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Severity(u8);

impl Severity {
    pub const ALL: [Severity; 5] = [Severity(1), Severity(2), Severity(3), Severity(4), Severity(5)];

    pub fn new(level: u8) -> Result<Self> {
        if (1..=5).contains(&level) {
            Ok(Self(level))
        } else {
            Err(PanError::Parameter(format!("severity must be in 1..=5, got {level}")))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl TryFrom<u8> for Severity {
    type Error = PanError;

    fn try_from(v: u8) -> Result<Self> {
        Severity::new(v)
    }
}

impl From<Severity> for u8 {
    fn from(s: Severity) -> u8 {
        s.0
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Parse `3`, `1..5` (inclusive) or `1,3,5`.
pub fn parse_severities(s: &str) -> Result<Vec<Severity>> {
    let s = s.trim();
    let levels: Vec<u8> = if let Some((a, b)) = s.split_once("..") {
        let lo: u8 = a.trim().parse().map_err(|_| PanError::Parameter(format!("bad severity range '{s}'")))?;
        let hi: u8 = b.trim().trim_start_matches('=').parse().map_err(|_| PanError::Parameter(format!("bad severity range '{s}'")))?;
        if lo > hi {
            return Err(PanError::Parameter(format!("empty severity range '{s}'")));
        }
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<u8>().map_err(|_| PanError::Parameter(format!("bad severity '{p}'"))))
            .collect::<Result<_>>()?
    };
    let mut out = levels.into_iter().map(Severity::new).collect::<Result<Vec<_>>>()?;
    out.dedup();
    if out.is_empty() {
        return Err(PanError::Parameter("no severities given".into()));
    }
    Ok(out)
}

pub fn parse_kinds(s: &str) -> Result<Vec<CorruptionKind>> {
    let kinds = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(PanError::Parameter("no corruption types given".into()));
    }
    Ok(kinds)
}

/// Dense id assignment for the corruption types of one run. `clean` is
/// always present and always last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionRegistry {
    kinds: Vec<CorruptionKind>,
}

impl CorruptionRegistry {
    pub fn new(kinds: &[CorruptionKind]) -> Self {
        let mut out: Vec<CorruptionKind> = Vec::with_capacity(kinds.len() + 1);
        for &k in kinds {
            if k != CorruptionKind::Clean && !out.contains(&k) {
                out.push(k);
            }
        }
        out.push(CorruptionKind::Clean);
        Self { kinds: out }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn kinds(&self) -> &[CorruptionKind] {
        &self.kinds
    }

    pub fn kind(&self, id: usize) -> Result<CorruptionKind> {
        self.kinds
            .get(id)
            .copied()
            .ok_or_else(|| PanError::Parameter(format!("corruption id {id} out of range for K = {}", self.kinds.len())))
    }

    pub fn id(&self, kind: CorruptionKind) -> Result<usize> {
        self.kinds
            .iter()
            .position(|&k| k == kind)
            .ok_or_else(|| PanError::Parameter(format!("corruption '{kind}' is not registered in this run")))
    }

    pub fn clean_id(&self) -> usize {
        self.kinds.len() - 1
    }

    pub fn names(&self) -> Vec<String> {
        self.kinds.iter().map(|k| k.name().to_string()).collect()
    }
}

const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.18, 0.26, 0.38];
const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const IMPULSE_FRACTION: [f64; 5] = [0.01, 0.02, 0.05, 0.10, 0.17];
const DEFOCUS_RADIUS: [i32; 5] = [1, 2, 3, 4, 6];
const MOTION_LENGTH: [i32; 5] = [3, 5, 7, 9, 13];
const MOTION_ANGLE_DEG: f64 = 20.0;
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];
const BRIGHTNESS_SHIFT: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const FOG_DENSITY: [f64; 5] = [0.15, 0.25, 0.35, 0.45, 0.6];
const FOG_GRAY: f64 = 0.8;
const PIXELATE_SCALE: [f64; 5] = [0.8, 0.65, 0.5, 0.4, 0.25];

fn image_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err(format!("corruptions expect a C×H×W image, got {:?}", x.shape()))),
    }
}

/// Apply corruption `kind` at severity `sev`.
pub fn corrupt(x: &Tensor, kind: CorruptionKind, sev: Severity, rng: &mut Rng) -> Result<Tensor> {
    let (c, h, w) = image_dims(x)?;
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(PanError::Parameter(format!("image values must lie in [0, 1], found {v}")));
    }
    let s = sev.index();
    let src = x.data();
    let data: Vec<f64> = match kind {
        CorruptionKind::Clean => return Ok(x.clone()),
        CorruptionKind::GaussianNoise => src.iter().map(|&v| v + GAUSSIAN_SIGMA[s] * rng.normal()).collect(),
        CorruptionKind::ShotNoise => {
            let lam = SHOT_PHOTONS[s];
            src.iter().map(|&v| rng.poisson(v * lam) / lam).collect()
        }
        CorruptionKind::ImpulseNoise => {
            let p = IMPULSE_FRACTION[s];
            src.iter()
                .map(|&v| {
                    if rng.uniform() < p {
                        if rng.uniform() < 0.5 {
                            0.0
                        } else {
                            1.0
                        }
                    } else {
                        v
                    }
                })
                .collect()
        }
        CorruptionKind::DefocusBlur => {
            let r = DEFOCUS_RADIUS[s];
            let taps: Vec<(i32, i32)> =
                (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).filter(|(dy, dx)| dy * dy + dx * dx <= r * r).collect();
            filter(src, c, h, w, &taps)
        }
        CorruptionKind::MotionBlur => {
            let len = MOTION_LENGTH[s];
            let (sin, cos) = MOTION_ANGLE_DEG.to_radians().sin_cos();
            let half = (len - 1) / 2;
            let taps: Vec<(i32, i32)> =
                (-half..=half).map(|t| ((-(t as f64) * sin).round() as i32, ((t as f64) * cos).round() as i32)).collect();
            filter(src, c, h, w, &taps)
        }
        CorruptionKind::Contrast => {
            let mean = src.iter().sum::<f64>() / src.len() as f64;
            let f = CONTRAST_FACTOR[s];
            src.iter().map(|&v| (v - mean) * f + mean).collect()
        }
        CorruptionKind::Brightness => src.iter().map(|&v| v + BRIGHTNESS_SHIFT[s]).collect(),
        CorruptionKind::Fog => {
            let t = FOG_DENSITY[s];
            src.iter().map(|&v| (1.0 - t) * v + t * FOG_GRAY).collect()
        }
        CorruptionKind::Pixelate => pixelate(src, c, h, w, PIXELATE_SCALE[s]),
    };
    Tensor::new(vec![c, h, w], data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Uniform-weight filter over integer offsets with clamp-to-edge borders.
fn filter(src: &[f64], c: usize, h: usize, w: usize, taps: &[(i32, i32)]) -> Vec<f64> {
    let norm = 1.0 / taps.len() as f64;
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for &(dy, dx) in taps {
                    let yy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                    let xx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                    acc += plane[yy * w + xx];
                }
                out[ch * h * w + y * w + x] = acc * norm;
            }
        }
    }
    out
}

/// Nearest-neighbour downscale by `scale` followed by nearest upscale.
fn pixelate(src: &[f64], c: usize, h: usize, w: usize, scale: f64) -> Vec<f64> {
    let sh = ((h as f64 * scale).floor() as usize).max(1);
    let sw = ((w as f64 * scale).floor() as usize).max(1);
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            // small-image row/col, then back to the source pixel it sampled
            let sy = ((y as f64 + 0.5) * sh as f64 / h as f64).floor() as usize;
            let py = (((sy as f64 + 0.5) * h as f64 / sh as f64).floor() as usize).min(h - 1);
            for x in 0..w {
                let sx = ((x as f64 + 0.5) * sw as f64 / w as f64).floor() as usize;
                let px = (((sx as f64 + 0.5) * w as f64 / sw as f64).floor() as usize).min(w - 1);
                out[ch * h * w + y * w + x] = src[ch * h * w + py * w + px];
            }
        }
    }
    out
}

/// Corrupt every clean image with every requested (type, severity) pair.
///
/// Samples are emitted grouped by type, then severity, then source index.
/// Sample `i` of the output uses its own derived random stream, so the
/// result does not depend on evaluation order.
pub fn build_corrupted_dataset(
    clean: &[LabeledImage],
    kinds: &[CorruptionKind],
    severities: &[Severity],
    seed: u64,
) -> Result<Vec<CorruptedSample>> {
    if clean.is_empty() {
        return Err(PanError::Config("cannot corrupt an empty clean dataset".into()));
    }
    if kinds.is_empty() || severities.is_empty() {
        return Err(PanError::Config("at least one corruption type and severity are required".into()));
    }
    let mut out = Vec::with_capacity(clean.len() * kinds.len() * severities.len());
    for &kind in kinds {
        for &sev in severities {
            for item in clean {
                let mut rng = Rng::derive(seed, streams::CORRUPT, out.len() as u64);
                out.push(CorruptedSample {
                    image: corrupt(&item.image, kind, sev, &mut rng)?,
                    label: item.label,
                    corruption: kind,
                    severity: sev,
                });
            }
        }
    }
    Ok(out)
}
