//! Mini-batch SGD with momentum.

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, LabeledImage};
use crate::error::{PanError, Result};
use crate::tensor::Tensor;

use super::batchnorm::BnMode;
use super::loss::{softmax_cross_entropy, LossOutput};
use super::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 32, lr: 0.02, momentum: 0.9, seed: 0 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(PanError::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PanError::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(PanError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Sample-weighted mean loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Fraction of correctly classified training samples per epoch.
    pub epoch_accuracy: Vec<f64>,
}

/// v ← μ·v + g;  w ← w − lr·v
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: model.params().iter().map(|p| vec![0.0; p.len()]).collect() }
    }

    pub fn step(&mut self, model: &mut Model) {
        for (p, v) in model.params_mut().into_iter().zip(&mut self.velocity) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
            for ((w, vel), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = self.momentum * *vel + gi;
                *w -= self.lr * *vel;
            }
        }
    }
}

/// Generic training loop. `inputs` assembles the batch tensor for a set of
/// sample indices; `loss` maps the network output to a loss and gradient.
/// BN layers run in use-batch mode and their running statistics are
/// accumulated by EMA.
pub fn fit<I, L>(model: &mut Model, n: usize, cfg: &TrainConfig, mut inputs: I, mut loss: L) -> Result<TrainReport>
where
    I: FnMut(&[usize]) -> Result<Tensor>,
    L: FnMut(&Tensor, &[usize]) -> Result<LossOutput>,
{
    cfg.validate()?;
    if n == 0 && cfg.epochs > 0 {
        return Err(PanError::Config("cannot train on an empty dataset".into()));
    }
    let mut sgd = Sgd::new(model, cfg.lr, cfg.momentum);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let mut correct = 0;
        for (bi, idx) in batch_iter(n, cfg.batch_size, Some(cfg.seed.wrapping_add(epoch as u64)))?.iter().enumerate() {
            let x = inputs(idx)?;
            model.zero_grad();
            let stats = model.source_stats();
            let pass = model.forward_uniform(&x, &stats, BnMode::UseBatch, true)?;
            let out = loss(&pass.output, idx)?;
            if !out.loss.is_finite() || !out.grad.is_finite() {
                return Err(PanError::Numerical(format!(
                    "non-finite loss {} at epoch {epoch}, batch {bi}",
                    out.loss
                )));
            }
            model.backward(&pass, &out.grad)?;
            sgd.step(model);
            model.accumulate_running_stats(&pass.batch_stats);
            total += out.loss * idx.len() as f64;
            correct += out.correct;
        }
        report.epoch_losses.push(total / n as f64);
        report.epoch_accuracy.push(correct as f64 / n as f64);
    }
    Ok(report)
}

pub fn stack_images<'a>(images: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let refs: Vec<&Tensor> = images.collect();
    Tensor::stack(&refs)
}

/// Supervised classification training of the downstream model.
pub fn train_supervised(model: &mut Model, data: &[LabeledImage], cfg: &TrainConfig) -> Result<TrainReport> {
    fit(
        model,
        data.len(),
        cfg,
        |idx| stack_images(idx.iter().map(|&i| &data[i].image)),
        |logits, idx| {
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].label).collect();
            softmax_cross_entropy(logits, &labels)
        },
    )
}
