//! Sequential models built from an [`Architecture`] descriptor.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, PanError, Result};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

use super::batchnorm::{bn_forward, BatchStats, BnLayerStats, BnMode, BnStatsSet, DEFAULT_EPS, DEFAULT_MOMENTUM};
use super::layers::{Layer, LayerCache, LayerSpec};
use super::loss::softmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    /// Per-sample input shape, C×H×W.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Architecture {
    /// Three conv-BN-ReLU-pool blocks (16/32/64 channels) on 3×32×32 input.
    fn trunk() -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        for out_channels in [16, 32, 64] {
            layers.push(LayerSpec::Conv { out_channels, kernel: 3, stride: 1, pad: 1 });
            layers.push(LayerSpec::BatchNorm);
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool { size: 2 });
        }
        layers.push(LayerSpec::Flatten);
        layers
    }

    /// Downstream classifier F: trunk followed by a linear head.
    pub fn source_cnn(num_classes: usize) -> Self {
        let mut layers = Self::trunk();
        layers.push(LayerSpec::Linear { out_features: num_classes });
        Self {
            name: "source-cnn".into(),
            input: vec![3, 32, 32],
            layers,
            bn_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }

    /// CIM network r = l∘g: trunk, linear projection to `q` features (end of
    /// g), then a linear head producing `anchor_dim` outputs.
    pub fn cim_network(q: usize, anchor_dim: usize) -> Self {
        let mut layers = Self::trunk();
        layers.push(LayerSpec::Linear { out_features: q });
        layers.push(LayerSpec::Linear { out_features: anchor_dim });
        Self {
            name: "cim".into(),
            input: vec![3, 32, 32],
            layers,
            bn_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }

    /// Per-sample shape after every layer; validates the chain.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.len() != 3 || self.input.iter().any(|&d| d == 0) {
            return Err(shape_err(format!("input shape must be C×H×W, got {:?}", self.input)));
        }
        let mut cur = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            cur = spec.output_shape(&cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn output_dim(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        Ok(shapes.last().map(|s| s.iter().product()).unwrap_or_else(|| self.input.iter().product()))
    }
}

/// The result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Tensor,
    /// One entry per layer when recorded, empty otherwise.
    pub caches: Vec<Option<LayerCache>>,
    /// Batch statistics of each BN layer that ran in use-batch mode.
    pub batch_stats: Vec<Option<BatchStats>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: Architecture,
    layers: Vec<Layer>,
}

impl Model {
    /// He-normal initialized weights, zero biases, identity BN.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let shapes = arch.shapes()?;
        if !(arch.bn_eps > 0.0) {
            return Err(PanError::Config(format!("bn_eps must be positive, got {}", arch.bn_eps)));
        }
        let mut rng = Rng::stream(seed, streams::INIT);
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut in_shape = arch.input.clone();
        for (spec, out_shape) in arch.layers.iter().zip(&shapes) {
            let layer = match spec {
                LayerSpec::Conv { out_channels, kernel, stride, pad } => {
                    let fan_in = in_shape[0] * kernel * kernel;
                    let std = (2.0 / fan_in as f64).sqrt();
                    Layer::Conv {
                        weight: Tensor::from_fn(&[*out_channels, in_shape[0], *kernel, *kernel], |_| rng.normal() * std),
                        bias: Tensor::zeros(&[*out_channels]),
                        stride: *stride,
                        pad: *pad,
                    }
                }
                LayerSpec::BatchNorm => {
                    let d = in_shape[0];
                    Layer::BatchNorm {
                        gamma: Tensor::full(&[d], 1.0),
                        beta: Tensor::zeros(&[d]),
                        running_mean: vec![0.0; d],
                        running_var: vec![1.0; d],
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size } => Layer::MaxPool { size: *size },
                LayerSpec::AvgPool { size } => Layer::AvgPool { size: *size },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Linear { out_features } => {
                    let fan_in = in_shape[0];
                    let std = (2.0 / fan_in as f64).sqrt();
                    Layer::Linear {
                        weight: Tensor::from_fn(&[*out_features, fan_in], |_| rng.normal() * std),
                        bias: Tensor::zeros(&[*out_features]),
                    }
                }
            };
            layers.push(layer);
            in_shape = out_shape.clone();
        }
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn bn_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_batch_norm()).count()
    }

    /// Channel count of every BN layer, in forward order.
    pub fn bn_layout(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm { gamma, .. } => Some(gamma.len()),
                _ => None,
            })
            .collect()
    }

    /// The statistics accumulated during training (Λ^S) with current γ, β.
    pub fn source_stats(&self) -> BnStatsSet {
        let eps = self.arch.bn_eps;
        BnStatsSet::new(
            self.layers
                .iter()
                .filter_map(|l| match l {
                    Layer::BatchNorm { gamma, beta, running_mean, running_var } => Some(BnLayerStats {
                        mu: running_mean.clone(),
                        var: running_var.clone(),
                        gamma: gamma.data().to_vec(),
                        beta: beta.data().to_vec(),
                        eps,
                    }),
                    _ => None,
                })
                .collect(),
        )
    }

    /// Overwrite running statistics and affine parameters from a stats set.
    pub fn set_source_stats(&mut self, stats: &BnStatsSet) -> Result<()> {
        stats.check_layout(&self.bn_layout())?;
        let mut it = stats.layers.iter();
        for layer in &mut self.layers {
            if let Layer::BatchNorm { gamma, beta, running_mean, running_var } = layer {
                let s = it.next().expect("layout checked");
                gamma.data_mut().copy_from_slice(&s.gamma);
                beta.data_mut().copy_from_slice(&s.beta);
                running_mean.clone_from(&s.mu);
                running_var.clone_from(&s.var);
            }
        }
        Ok(())
    }

    /// EMA update of the running statistics from a training forward pass.
    pub fn accumulate_running_stats(&mut self, batch: &[Option<BatchStats>]) {
        let m = self.arch.bn_momentum;
        let mut it = batch.iter();
        for layer in &mut self.layers {
            if let Layer::BatchNorm { running_mean, running_var, .. } = layer {
                if let Some(Some(bs)) = it.next() {
                    for (r, b) in running_mean.iter_mut().zip(&bs.mu) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                    for (r, b) in running_var.iter_mut().zip(&bs.var) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                }
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4 || x.shape()[1..] != self.arch.input[..] {
            return Err(shape_err(format!(
                "model '{}' expects B×{:?} input, got {:?}",
                self.arch.name,
                self.arch.input,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Run the network. BN layer `i` uses `stats.layers[i]` and `modes[i]`.
    pub fn forward(&self, x: &Tensor, stats: &BnStatsSet, modes: &[BnMode], record: bool) -> Result<ForwardPass> {
        self.check_input(x)?;
        let layout = self.bn_layout();
        stats.check_layout(&layout)?;
        if modes.len() != layout.len() {
            return Err(PanError::Config(format!(
                "{} BN modes given for {} BN layers",
                modes.len(),
                layout.len()
            )));
        }
        let mut caches = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        let mut batch_stats = Vec::with_capacity(layout.len());
        let mut cur = x.clone();
        let mut bn_idx = 0;
        for layer in &self.layers {
            let (next, cache) = if layer.is_batch_norm() {
                let fwd = bn_forward(&cur, &stats.layers[bn_idx], modes[bn_idx])?;
                batch_stats.push(fwd.batch);
                bn_idx += 1;
                (fwd.output, record.then_some(LayerCache::BatchNorm(fwd.cache)))
            } else {
                layer.forward_plain(&cur, record)?
            };
            if record {
                caches.push(cache);
            }
            cur = next;
        }
        Ok(ForwardPass { output: cur, caches, batch_stats })
    }

    /// Forward with the same mode on every BN layer.
    pub fn forward_uniform(&self, x: &Tensor, stats: &BnStatsSet, mode: BnMode, record: bool) -> Result<ForwardPass> {
        self.forward(x, stats, &vec![mode; self.bn_count()], record)
    }

    /// Inference with the model's own source statistics.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_uniform(x, &self.source_stats(), BnMode::UseStored, false)?.output)
    }

    /// Backpropagate through a recorded pass, accumulating parameter
    /// gradients. Returns the gradient w.r.t. the input.
    pub fn backward(&mut self, pass: &ForwardPass, grad_out: &Tensor) -> Result<Tensor> {
        if pass.caches.len() != self.layers.len() {
            return Err(PanError::Contract("backward needs a recorded forward pass".into()));
        }
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter_mut().zip(&pass.caches).rev() {
            let cache = cache.as_ref().ok_or_else(|| PanError::Contract("missing layer cache".into()))?;
            g = layer.backward(cache, &g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.zero_grad();
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Gradients of all parameters in [`Model::params`] order (zeros where
    /// no gradient has been accumulated).
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.params()
            .into_iter()
            .map(|p| p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect()
    }

    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(PanError::Config(format!("{} parameter tensors given, model has {}", values.len(), params.len())));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.shape() != v.shape() {
                return Err(shape_err(format!("parameter shape {:?} vs {:?}", p.shape(), v.shape())));
            }
            p.data_mut().copy_from_slice(v.data());
        }
        Ok(())
    }

    /// Keep only the first `n` layers (e.g. to drop a training head).
    pub fn truncate(mut self, n: usize) -> Result<Model> {
        if n == 0 || n > self.layers.len() {
            return Err(PanError::Config(format!("cannot truncate {} layers to {n}", self.layers.len())));
        }
        self.layers.truncate(n);
        self.arch.layers.truncate(n);
        Ok(self)
    }

    /// Named tensors for checkpointing: parameters and running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in layer.param_names().iter().zip(layer.params()) {
                let mut t = p.clone();
                t.clear_grad();
                out.push((format!("layers.{i}.{name}"), t));
            }
            if let Layer::BatchNorm { running_mean, running_var, .. } = layer {
                let d = running_mean.len();
                out.push((format!("layers.{i}.running_mean"), Tensor::new(vec![d], running_mean.clone()).expect("d > 0")));
                out.push((format!("layers.{i}.running_var"), Tensor::new(vec![d], running_var.clone()).expect("d > 0")));
            }
        }
        out
    }

    /// Rebuild a model from its architecture and named tensors.
    pub fn from_named_tensors(arch: Architecture, tensors: &[(String, Tensor)]) -> Result<Model> {
        let mut model = Model::new(arch, 0)?;
        let lookup = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| PanError::Format(format!("checkpoint is missing tensor '{name}'")))
        };
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let names = layer.param_names();
            for (name, p) in names.iter().zip(layer.params_mut()) {
                let src = lookup(&format!("layers.{i}.{name}"))?;
                if src.shape() != p.shape() {
                    return Err(PanError::Format(format!(
                        "tensor layers.{i}.{name} has shape {:?}, expected {:?}",
                        src.shape(),
                        p.shape()
                    )));
                }
                p.data_mut().copy_from_slice(src.data());
            }
            if let Layer::BatchNorm { running_mean, running_var, .. } = layer {
                for (name, dst) in [("running_mean", running_mean), ("running_var", running_var)] {
                    let src = lookup(&format!("layers.{i}.{name}"))?;
                    if src.len() != dst.len() {
                        return Err(PanError::Format(format!("tensor layers.{i}.{name} has wrong length")));
                    }
                    dst.copy_from_slice(src.data());
                }
            }
        }
        Ok(model)
    }
}

/// Class probabilities (B×classes) for a batch, or a single C×H×W image.
pub fn forward_classify(model: &Model, x: &Tensor, stats: &BnStatsSet, mode: BnMode) -> Result<Tensor> {
    let batched;
    let x = if x.rank() == 3 {
        batched = x.clone().reshape([&[1], x.shape()].concat())?;
        &batched
    } else {
        x
    };
    let logits = model.forward_uniform(x, stats, mode, false)?.output;
    softmax(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> Architecture {
        Architecture {
            name: "tiny".into(),
            input: vec![2, 4, 4],
            layers: vec![
                LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 1, pad: 1 },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { out_features: 3 },
            ],
            bn_eps: DEFAULT_EPS,
            bn_momentum: DEFAULT_MOMENTUM,
        }
    }

    #[test]
    fn source_architecture_chains() {
        let arch = Architecture::source_cnn(10);
        let shapes = arch.shapes().unwrap();
        assert_eq!(shapes.last().unwrap(), &vec![10]);
        assert_eq!(shapes[12], vec![1024]);
        let m = Model::new(arch, 1).unwrap();
        assert_eq!(m.bn_layout(), vec![16, 32, 64]);
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let mut m = Model::new(tiny_arch(), 3).unwrap();
        if let Some(Layer::Linear { weight, .. }) = m.layers_mut().last_mut() {
            weight.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
        let x = Tensor::from_fn(&[2, 2, 4, 4], |i| (i as f64 * 0.3).cos());
        let p = forward_classify(&m, &x, &m.source_stats(), BnMode::UseStored).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn injected_means_change_logits() {
        let m = Model::new(tiny_arch(), 4).unwrap();
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64 * 0.7).sin());
        let a = m.source_stats();
        let mut b = a.clone();
        b.layers[0].mu = vec![0.5, -0.3, 0.2];
        let pa = forward_classify(&m, &x, &a, BnMode::UseStored).unwrap();
        let pb = forward_classify(&m, &x, &b, BnMode::UseStored).unwrap();
        assert_ne!(pa.data(), pb.data());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = Model::new(tiny_arch(), 5).unwrap();
        let x = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 7919) % 13) as f64 - 6.0);
        let p = forward_classify(&m, &x, &m.source_stats(), BnMode::UseBatch).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layout_mismatch_is_config_error() {
        let m = Model::new(tiny_arch(), 5).unwrap();
        let bad = BnStatsSet::new(vec![BnLayerStats::identity(4, DEFAULT_EPS)]);
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(matches!(forward_classify(&m, &x, &bad, BnMode::UseStored), Err(PanError::Config(_))));
    }

    #[test]
    fn wrong_input_shape() {
        let m = Model::new(tiny_arch(), 5).unwrap();
        assert!(m.infer(&Tensor::zeros(&[1, 3, 4, 4])).is_err());
    }

    #[test]
    fn named_tensor_roundtrip() {
        let m = Model::new(tiny_arch(), 6).unwrap();
        let again = Model::from_named_tensors(tiny_arch(), &m.named_tensors()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn truncate_drops_head() {
        let m = Model::new(tiny_arch(), 6).unwrap().truncate(5).unwrap();
        assert_eq!(m.arch().output_dim().unwrap(), 12);
        assert!(m.infer(&Tensor::zeros(&[1, 2, 4, 4])).is_ok());
    }
}
