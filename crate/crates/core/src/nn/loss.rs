use crate::error::{shape_err, PanError, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of a B×K tensor, max-shifted.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let k = match logits.shape() {
        &[_, k] => k,
        s => return Err(shape_err(format!("softmax expects B×K, got {s:?}"))),
    };
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Mean loss over the batch.
    pub loss: f64,
    /// dL/dlogits.
    pub grad: Tensor,
    pub correct: usize,
}

/// Mean softmax cross-entropy.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let (b, k) = match logits.shape() {
        &[b, k] => (b, k),
        s => return Err(shape_err(format!("cross-entropy expects B×K logits, got {s:?}"))),
    };
    if labels.len() != b {
        return Err(shape_err(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(PanError::Parameter(format!("label {y} out of range for {k} classes")));
    }
    let probs = softmax(logits)?;
    let mut grad = probs.data().to_vec();
    let mut loss = 0.0;
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &mut grad[i * k..(i + 1) * k];
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        if argmax(&logits.data()[i * k..(i + 1) * k]) == y {
            correct += 1;
        }
        row[y] -= 1.0;
        row.iter_mut().for_each(|g| *g /= b as f64);
    }
    Ok(LossOutput { loss: loss / b as f64, grad: Tensor::new(vec![b, k], grad)?, correct })
}

/// Index of the largest entry; lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
