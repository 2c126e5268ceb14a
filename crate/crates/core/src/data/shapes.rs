//! A procedural image-classification corpus: one geometric shape per class,
//! drawn at a random position, scale and colour over a shaded background.

use crate::error::{PanError, Result};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

use super::LabeledImage;

pub const SHAPE_CLASSES: [&str; 10] =
    ["disk", "square", "triangle", "plus", "ring", "diamond", "cross", "frame", "hbars", "vbars"];

const SIZE: usize = 32;
const SUPERSAMPLE: usize = 3;

/// Membership test in shape-local coordinates (unit radius).
fn inside(class: usize, u: f64, v: f64) -> bool {
    let box_ = |a: f64| u.abs() <= a && v.abs() <= a;
    match class {
        0 => u * u + v * v <= 1.0,
        1 => box_(0.8),
        2 => v <= 0.8 && v >= -0.9 && u.abs() <= 0.95 * (v + 0.9) / 1.7,
        3 => (u.abs() <= 0.28 && v.abs() <= 0.95) || (v.abs() <= 0.28 && u.abs() <= 0.95),
        4 => {
            let r = (u * u + v * v).sqrt();
            (0.55..=1.0).contains(&r)
        }
        5 => u.abs() + v.abs() <= 1.0,
        6 => ((u - v).abs() <= 0.32 || (u + v).abs() <= 0.32) && box_(0.85),
        7 => box_(0.9) && !box_(0.52),
        8 => box_(0.9) && ((v + 0.9) / 0.36).floor() as i64 % 2 == 0,
        9 => box_(0.9) && ((u + 0.9) / 0.36).floor() as i64 % 2 == 0,
        _ => false,
    }
}

fn luma(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn render(class: usize, rng: &mut Rng) -> Tensor {
    let bg = [rng.uniform(), rng.uniform(), rng.uniform()];
    let mut fg = [rng.uniform(), rng.uniform(), rng.uniform()];
    for _ in 0..16 {
        if (luma(&fg) - luma(&bg)).abs() >= 0.3 {
            break;
        }
        fg = [rng.uniform(), rng.uniform(), rng.uniform()];
    }
    if (luma(&fg) - luma(&bg)).abs() < 0.3 {
        let target = if luma(&bg) > 0.5 { 0.0 } else { 1.0 };
        fg = [target; 3];
    }
    let radius = rng.uniform_range(7.0, 12.0);
    let margin = radius * 0.9;
    let cx = rng.uniform_range(margin, SIZE as f64 - margin);
    let cy = rng.uniform_range(margin, SIZE as f64 - margin);
    // background shading: linear ramp in a random direction
    let (gs, gc) = rng.uniform_range(0.0, std::f64::consts::TAU).sin_cos();
    let ramp = rng.uniform_range(0.0, 0.25);

    let mut data = vec![0.0; 3 * SIZE * SIZE];
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..SIZE {
        for x in 0..SIZE {
            let mut cover = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    if inside(class, (px - cx) / radius, (py - cy) / radius) {
                        cover += 1.0;
                    }
                }
            }
            cover /= (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let t = ((x as f64 / SIZE as f64 - 0.5) * gc + (y as f64 / SIZE as f64 - 0.5) * gs) * ramp;
            for c in 0..3 {
                let back = (bg[c] + t).clamp(0.0, 1.0);
                data[c * SIZE * SIZE + y * SIZE + x] = cover * fg[c] + (1.0 - cover) * back;
            }
        }
    }
    Tensor::new(vec![3, SIZE, SIZE], data).expect("fixed geometry")
}

/// `n` images with labels `i mod num_classes`, so classes are balanced
/// within one. Deterministic per seed.
pub fn procedural_shapes(n: usize, num_classes: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if num_classes == 0 || num_classes > SHAPE_CLASSES.len() {
        return Err(PanError::Config(format!(
            "procedural shapes support 1..={} classes, got {num_classes}",
            SHAPE_CLASSES.len()
        )));
    }
    if n < num_classes {
        return Err(PanError::Config(format!("need at least one image per class: n = {n} < {num_classes}")));
    }
    Ok((0..n)
        .map(|i| {
            let label = i % num_classes;
            let mut rng = Rng::derive(seed, streams::DATASET, i as u64);
            LabeledImage { image: render(label, &mut rng), label }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_per_class() {
        let d = procedural_shapes(4, 4, 0).unwrap();
        let labels: Vec<usize> = d.iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn deterministic() {
        assert_eq!(procedural_shapes(12, 10, 3).unwrap(), procedural_shapes(12, 10, 3).unwrap());
        assert_ne!(procedural_shapes(12, 10, 3).unwrap(), procedural_shapes(12, 10, 4).unwrap());
    }

    #[test]
    fn too_many_classes() {
        assert!(matches!(procedural_shapes(20, 11, 0), Err(PanError::Config(_))));
        assert!(procedural_shapes(3, 4, 0).is_err());
    }

    #[test]
    fn values_in_range() {
        for s in procedural_shapes(20, 10, 1).unwrap() {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn balanced_within_one() {
        let d = procedural_shapes(23, 10, 1).unwrap();
        let mut counts = [0usize; 10];
        d.iter().for_each(|s| counts[s.label] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }
}
