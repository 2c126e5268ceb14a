//! Datasets: sample types, batching, CIFAR-10 ingestion, the procedural
//! shapes corpus and on-disk persistence.

pub mod cifar;
pub mod shapes;
pub mod store;

use serde::{Deserialize, Serialize};

use crate::corruption::{CorruptionKind, Severity};
use crate::error::{PanError, Result};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

pub use cifar::{read_cifar10_binary, write_cifar10_binary};
pub use shapes::{procedural_shapes, SHAPE_CLASSES};
pub use store::{decode_dataset, load_dataset, save_dataset, DatasetHeader, DiskDataset, StoredSample};

/// Canonical image geometry.
pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// 3×32×32, values in [0, 1].
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedSample {
    pub image: Tensor,
    pub label: usize,
    pub corruption: CorruptionKind,
    pub severity: Severity,
}

impl CorruptedSample {
    pub fn labeled(&self) -> LabeledImage {
        LabeledImage { image: self.image.clone(), label: self.label }
    }
}

/// Grouping key for per-(type, severity) accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub corruption: CorruptionKind,
    pub severity: Severity,
}

/// Partition `0..n` into batches of `batch_size` (last one may be short).
/// With a seed the order is a seeded permutation, otherwise sequential.
pub fn batch_iter(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(PanError::Config("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        Rng::stream(seed, streams::SHUFFLE).shuffle(&mut order);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Split off a seeded random subset of `take` indices (returned sorted) and
/// the sorted remainder.
pub fn split_indices(n: usize, take: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::stream(seed, streams::SPLIT).shuffle(&mut order);
    let take = take.min(n);
    let mut a = order[..take].to_vec();
    let mut b = order[take..].to_vec();
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes() {
        let b = batch_iter(10, 3, None).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
    }

    #[test]
    fn shuffled_partition() {
        let a = batch_iter(10, 3, Some(5)).unwrap();
        let b = batch_iter(10, 3, Some(5)).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn oversized_batch_is_single() {
        assert_eq!(batch_iter(4, 9, None).unwrap(), vec![vec![0, 1, 2, 3]]);
        assert!(batch_iter(4, 0, None).is_err());
    }

    #[test]
    fn split_is_disjoint() {
        let (a, b) = split_indices(20, 7, 1);
        assert_eq!(a.len(), 7);
        assert_eq!(b.len(), 13);
        assert!(a.iter().all(|i| !b.contains(i)));
    }
}
