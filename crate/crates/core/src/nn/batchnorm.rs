//! Batch normalization with injectable statistics.
//!
//! The running statistics of a model are not owned by its layers at
//! inference time: every forward pass is handed a [`BnStatsSet`], which is
//! how per-corruption statistics are swapped in without touching weights.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, PanError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel statistics and affine parameters of one BN layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnLayerStats {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl BnLayerStats {
    /// Source-style initialization: μ=0, σ²=1, γ=1, β=0.
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            mu: vec![0.0; channels],
            var: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mu.len();
        if self.var.len() != d || self.gamma.len() != d || self.beta.len() != d {
            return Err(PanError::Config(format!(
                "BN stats vectors disagree in length: mu {}, var {}, gamma {}, beta {}",
                d,
                self.var.len(),
                self.gamma.len(),
                self.beta.len()
            )));
        }
        if !(self.eps > 0.0) {
            return Err(PanError::Config(format!("BN eps must be positive, got {}", self.eps)));
        }
        if let Some(v) = self.var.iter().find(|v| !(**v >= 0.0)) {
            return Err(PanError::Config(format!("BN variance must be >= 0, got {v}")));
        }
        Ok(())
    }
}

/// Ordered statistics of every BN layer of a model, in forward order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStatsSet {
    pub layers: Vec<BnLayerStats>,
}

impl BnStatsSet {
    pub fn new(layers: Vec<BnLayerStats>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Channel count per layer.
    pub fn layout(&self) -> Vec<usize> {
        self.layers.iter().map(BnLayerStats::channels).collect()
    }

    pub fn check_layout(&self, expected: &[usize]) -> Result<()> {
        let got = self.layout();
        if got != expected {
            return Err(PanError::Config(format!(
                "BN stats layout {got:?} does not match model layout {expected:?}"
            )));
        }
        Ok(())
    }

    /// L2 distance of the concatenated (μ, σ²) of layer `l`.
    pub fn layer_distance(&self, other: &BnStatsSet, l: usize) -> f64 {
        let a = &self.layers[l];
        let b = &other.layers[l];
        let sq: f64 = a.mu.iter().zip(&b.mu).chain(a.var.iter().zip(&b.var)).map(|(x, y)| (x - y) * (x - y)).sum();
        sq.sqrt()
    }
}

/// Which statistics a BN layer normalizes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    UseStored,
    UseBatch,
}

/// Biased per-channel batch statistics of a B×D×L view (mean and variance
/// over the B·L positions of each channel).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Interpret a tensor as (B, D, L): B×D (L=1) or B×D×H×W (L=H·W), or B×D×L.
pub fn bdl(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, d] => Ok((b, d, 1)),
        [b, d, l] => Ok((b, d, l)),
        [b, d, h, w] => Ok((b, d, h * w)),
        _ => Err(shape_err(format!("batch norm expects B×D[×L] input, got {shape:?}"))),
    }
}

pub fn batch_stats(f: &Tensor) -> Result<BatchStats> {
    let (b, d, l) = bdl(f.shape())?;
    if b * l == 0 {
        return Err(PanError::Contract("batch statistics of an empty batch".into()));
    }
    let n = (b * l) as f64;
    let x = f.data();
    let mut mu = vec![0.0; d];
    for bi in 0..b {
        for (c, m) in mu.iter_mut().enumerate() {
            let base = (bi * d + c) * l;
            *m += x[base..base + l].iter().sum::<f64>();
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for bi in 0..b {
        for (c, v) in var.iter_mut().enumerate() {
            let base = (bi * d + c) * l;
            let m = mu[c];
            *v += x[base..base + l].iter().map(|&e| (e - m) * (e - m)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    Ok(BatchStats { mu, var })
}

/// Cached values needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub gamma: Vec<f64>,
    pub mode: BnMode,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BnForward {
    pub output: Tensor,
    /// Present in use-batch mode.
    pub batch: Option<BatchStats>,
    pub cache: BnCache,
}

/// γ·(f−μ)/√(σ²+ε)+β per channel.
pub fn bn_forward(f: &Tensor, stats: &BnLayerStats, mode: BnMode) -> Result<BnForward> {
    let (b, d, l) = bdl(f.shape())?;
    if d != stats.channels() {
        return Err(shape_err(format!(
            "batch norm: input has {d} channels, statistics have {}",
            stats.channels()
        )));
    }
    let batch = match mode {
        BnMode::UseBatch => {
            if b * l < 2 {
                return Err(PanError::Contract(format!(
                    "use-batch normalization needs at least 2 positions per channel, got {}",
                    b * l
                )));
            }
            Some(batch_stats(f)?)
        }
        BnMode::UseStored => None,
    };
    let (mu, var) = match &batch {
        Some(bs) => (&bs.mu, &bs.var),
        None => (&stats.mu, &stats.var),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
    let x = f.data();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for c in 0..d {
            let base = (bi * d + c) * l;
            let (m, s, g, be) = (mu[c], inv_std[c], stats.gamma[c], stats.beta[c]);
            for i in base..base + l {
                let h = (x[i] - m) * s;
                xhat[i] = h;
                out[i] = g * h + be;
            }
        }
    }
    Ok(BnForward {
        output: Tensor::new(f.shape().to_vec(), out)?,
        batch,
        cache: BnCache { xhat, inv_std, gamma: stats.gamma.clone(), mode, shape: f.shape().to_vec() },
    })
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn bn_backward(cache: &BnCache, grad_out: &Tensor) -> Result<BnGrads> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(shape_err(format!(
            "batch norm backward: grad {:?} vs forward {:?}",
            grad_out.shape(),
            cache.shape
        )));
    }
    let (b, d, l) = bdl(&cache.shape)?;
    let dy = grad_out.data();
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    for bi in 0..b {
        for c in 0..d {
            let base = (bi * d + c) * l;
            for i in base..base + l {
                dgamma[c] += dy[i] * cache.xhat[i];
                dbeta[c] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    let n = (b * l) as f64;
    for c in 0..d {
        let scale = cache.gamma[c] * cache.inv_std[c];
        match cache.mode {
            BnMode::UseStored => {
                for bi in 0..b {
                    let base = (bi * d + c) * l;
                    for i in base..base + l {
                        dx[i] = dy[i] * scale;
                    }
                }
            }
            BnMode::UseBatch => {
                // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                let mean_dy = dbeta[c] / n;
                let mean_dy_xhat = dgamma[c] / n;
                for bi in 0..b {
                    let base = (bi * d + c) * l;
                    for i in base..base + l {
                        dx[i] = scale * (dy[i] - mean_dy - cache.xhat[i] * mean_dy_xhat);
                    }
                }
            }
        }
    }
    Ok(BnGrads { input: Tensor::new(cache.shape.clone(), dx)?, gamma: dgamma, beta: dbeta })
}
