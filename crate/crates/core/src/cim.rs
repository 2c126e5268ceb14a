//! Corruption identification: anchored-centre training of an encoder, class
//! prototypes in feature space, and nearest-prototype prediction.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corruption::{CorruptionKind, CorruptionRegistry};
use crate::data::LabeledImage;
use crate::error::{format_err, shape_err, PanError, Result};
use crate::nn::loss::LossOutput;
use crate::nn::train::stack_images;
use crate::nn::{fit, Architecture, Model, TrainConfig};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_Q: usize = 32;
const FEATURE_BATCH: usize = 64;

/// Fixed class centres `alpha · e_k` in R^dim.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    centers: Vec<Vec<f64>>,
    alpha: f64,
}

impl AnchorSet {
    pub fn scaled_basis(k: usize, dim: usize, alpha: f64) -> Result<Self> {
        if k < 2 {
            return Err(PanError::Config(format!("need at least 2 anchored classes, got {k}")));
        }
        if dim < k {
            return Err(PanError::Config(format!("anchor dimension {dim} is smaller than the class count {k}")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(PanError::Config(format!("anchor scale must be positive, got {alpha}")));
        }
        let centers = (0..k)
            .map(|i| {
                let mut c = vec![0.0; dim];
                c[i] = alpha;
                c
            })
            .collect();
        Ok(Self { centers, alpha })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Loss value and its gradient with respect to `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct CacLoss {
    pub loss: f64,
    pub tuplet: f64,
    pub anchor: f64,
    pub grad: Vec<f64>,
}

/// `d_y + λ · log(1 + Σ_{j≠y} exp(d_y − d_j))` with `d_j = ‖z − c_j‖`.
pub fn cac_loss(z: &[f64], y: usize, anchors: &AnchorSet, lambda: f64) -> Result<CacLoss> {
    let k = anchors.len();
    if y >= k {
        return Err(PanError::Parameter(format!("class {y} out of range for {k} anchors")));
    }
    if !(lambda >= 0.0) {
        return Err(PanError::Parameter(format!("lambda must be >= 0, got {lambda}")));
    }
    if z.len() != anchors.dim() {
        return Err(shape_err(format!("feature of length {} against anchors of dimension {}", z.len(), anchors.dim())));
    }
    let d: Vec<f64> = anchors.centers.iter().map(|c| euclidean(z, c)).collect();

    // log-sum-exp over {0} ∪ {d_y − d_j : j ≠ y}
    let terms: Vec<(usize, f64)> = (0..k).filter(|&j| j != y).map(|j| (j, d[y] - d[j])).collect();
    let shift = terms.iter().map(|t| t.1).fold(0.0, f64::max);
    let denom = (-shift).exp() + terms.iter().map(|t| (t.1 - shift).exp()).sum::<f64>();
    let anchor = shift + denom.ln();

    // dL/dd_j
    let mut dd = vec![0.0; k];
    dd[y] = 1.0;
    for &(j, a) in &terms {
        let w = (a - shift).exp() / denom;
        dd[y] += lambda * w;
        dd[j] -= lambda * w;
    }
    let mut grad = vec![0.0; z.len()];
    for (j, c) in anchors.centers.iter().enumerate() {
        if d[j] == 0.0 || dd[j] == 0.0 {
            continue;
        }
        let s = dd[j] / d[j];
        for ((g, zi), ci) in grad.iter_mut().zip(z).zip(c) {
            *g += s * (zi - ci);
        }
    }
    Ok(CacLoss { loss: d[y] + lambda * anchor, tuplet: d[y], anchor, grad })
}

/// Batch-mean CAC loss over a B×dim output; `correct` counts samples whose
/// nearest anchor is their own.
pub fn cac_batch(out: &Tensor, labels: &[usize], anchors: &AnchorSet, lambda: f64) -> Result<LossOutput> {
    let (b, dim) = match out.shape() {
        &[b, dim] => (b, dim),
        s => return Err(shape_err(format!("CAC expects B×dim outputs, got {s:?}"))),
    };
    if labels.len() != b {
        return Err(shape_err(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut grad = Vec::with_capacity(b * dim);
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &y) in out.data().chunks(dim).zip(labels) {
        let l = cac_loss(row, y, anchors, lambda)?;
        loss += l.loss;
        let d: Vec<f64> = anchors.centers.iter().map(|c| euclidean(row, c)).collect();
        if argmin(&d) == y {
            correct += 1;
        }
        grad.extend(l.grad.iter().map(|g| g / b as f64));
    }
    Ok(LossOutput { loss: loss / b as f64, grad: Tensor::new(vec![b, dim], grad)?, correct })
}

/// Index of the smallest entry; lowest index wins ties.
pub fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v < xs[best] {
            best = i;
        }
    }
    best
}

/// `exp(−d_k) / Σ exp(−d_j)`, shifted by the minimum distance.
pub fn softmin(d: &[f64]) -> Vec<f64> {
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|&v| (min - v).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionPrediction {
    pub kappa: usize,
    pub distances: Vec<f64>,
    /// `d ⊙ (1 − softmin(d))`
    pub scores: Vec<f64>,
}

pub fn predict_from_distances(d: Vec<f64>) -> CorruptionPrediction {
    let sm = softmin(&d);
    let scores: Vec<f64> = d.iter().zip(&sm).map(|(di, si)| di * (1.0 - si)).collect();
    CorruptionPrediction { kappa: argmin(&scores), distances: d, scores }
}

/// Mean feature vector per corruption class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub rows: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl Prototypes {
    /// Class means of `features`, accumulated in sample order.
    pub fn from_features(features: &[Vec<f64>], labels: &[usize], registry: &CorruptionRegistry) -> Result<Self> {
        let k = registry.len();
        let q = features.first().map_or(0, Vec::len);
        if features.len() != labels.len() {
            return Err(shape_err(format!("{} features for {} labels", features.len(), labels.len())));
        }
        let mut rows = vec![vec![0.0; q]; k];
        let mut counts = vec![0usize; k];
        for (z, &y) in features.iter().zip(labels) {
            if y >= k {
                return Err(PanError::Parameter(format!("corruption id {y} out of range for {k} types")));
            }
            if z.len() != q {
                return Err(shape_err(format!("feature length {} differs from {q}", z.len())));
            }
            rows[y].iter_mut().zip(z).for_each(|(r, v)| *r += v);
            counts[y] += 1;
        }
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(PanError::Coverage(format!(
                "no samples of corruption '{}' to build its prototype",
                registry.kind(missing)?
            )));
        }
        for (row, &c) in rows.iter_mut().zip(&counts) {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
        Ok(Self { rows, counts })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn predict(&self, z: &[f64]) -> Result<CorruptionPrediction> {
        if z.len() != self.dim() {
            return Err(shape_err(format!("feature of length {} against prototypes of dimension {}", z.len(), self.dim())));
        }
        Ok(predict_from_distances(self.rows.iter().map(|r| euclidean(z, r)).collect()))
    }
}

pub fn predict_corruption(z: &[f64], prototypes: &Prototypes) -> Result<CorruptionPrediction> {
    prototypes.predict(z)
}

/// Decides which codebook entry each image of a batch is routed to.
/// `None` means the source statistics, without adaptation.
pub trait Router {
    fn route(&self, batch: &Tensor, indices: &[usize]) -> Result<Vec<Option<usize>>>;
}

/// Routes by known labels, indexed by stream position.
#[derive(Debug, Clone)]
pub struct OracleRouter<'a> {
    pub labels: &'a [usize],
}

impl Router for OracleRouter<'_> {
    fn route(&self, _batch: &Tensor, indices: &[usize]) -> Result<Vec<Option<usize>>> {
        indices
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .map(|&k| Some(k))
                    .ok_or_else(|| PanError::Contract(format!("no ground-truth corruption for stream sample {i}")))
            })
            .collect()
    }
}

/// Routes recorded earlier (for example by a frozen CIM), indexed by
/// stream position.
#[derive(Debug, Clone)]
pub struct FixedRouter<'a> {
    pub routes: &'a [Option<usize>],
}

impl Router for FixedRouter<'_> {
    fn route(&self, _batch: &Tensor, indices: &[usize]) -> Result<Vec<Option<usize>>> {
        indices
            .iter()
            .map(|&i| {
                self.routes
                    .get(i)
                    .copied()
                    .ok_or_else(|| PanError::Contract(format!("no recorded route for stream sample {i}")))
            })
            .collect()
    }
}

/// Routes everything to one entry.
#[derive(Debug, Clone, Copy)]
pub struct ConstantRouter(pub Option<usize>);

impl Router for ConstantRouter {
    fn route(&self, _batch: &Tensor, indices: &[usize]) -> Result<Vec<Option<usize>>> {
        Ok(vec![self.0; indices.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CimConfig {
    pub q: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub train: TrainConfig,
}

impl Default for CimConfig {
    fn default() -> Self {
        Self { q: DEFAULT_Q, alpha: DEFAULT_ALPHA, lambda: DEFAULT_LAMBDA, train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CimTrainReport {
    pub epoch_losses: Vec<f64>,
    /// Fraction of samples nearest to their own anchor, per epoch.
    pub epoch_accuracy: Vec<f64>,
    /// Mean distance of head outputs to their own anchor, per epoch.
    pub epoch_anchor_distance: Vec<f64>,
}

/// The frozen module: encoder g, prototypes and routing options.
#[derive(Debug, Clone, PartialEq)]
pub struct CimSnapshot {
    pub encoder: Model,
    pub prototypes: Prototypes,
    pub registry: CorruptionRegistry,
    pub config: CimConfig,
    /// Route to the source statistics when min(b) exceeds this value.
    pub reject_threshold: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CimMeta {
    kind: String,
    architecture: Architecture,
    registry: Vec<CorruptionKind>,
    config: CimConfig,
    counts: Vec<usize>,
    reject_threshold: Option<f64>,
}

/// Train encoder + head with the CAC loss on samples labelled by corruption
/// id, then drop the head. Returns the encoder and the training curves.
pub fn train_cim(
    samples: &[LabeledImage],
    registry: &CorruptionRegistry,
    cfg: &CimConfig,
    seed: u64,
) -> Result<(Model, CimTrainReport)> {
    let k = registry.len();
    let anchors = AnchorSet::scaled_basis(k, k, cfg.alpha)?;
    if !(cfg.lambda >= 0.0) {
        return Err(PanError::Config(format!("lambda must be >= 0, got {}", cfg.lambda)));
    }
    if cfg.q == 0 {
        return Err(PanError::Config("feature dimension q must be >= 1".into()));
    }
    let mut seen = vec![false; k];
    for s in samples {
        *seen.get_mut(s.label).ok_or_else(|| {
            PanError::Parameter(format!("corruption id {} out of range for {k} types", s.label))
        })? = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(PanError::Coverage(format!("CIM training data has no '{}' samples", registry.kind(missing)?)));
    }

    let arch = Architecture::cim_network(cfg.q, k);
    let mut model = Model::new(arch, seed)?;
    let mut tuplet_sums = Vec::new();
    let mut running = 0.0;
    let mut seen_in_epoch = 0usize;
    let report = fit(
        &mut model,
        samples.len(),
        &cfg.train,
        |idx| stack_images(idx.iter().map(|&i| &samples[i].image)),
        |out, idx| {
            let labels: Vec<usize> = idx.iter().map(|&i| samples[i].label).collect();
            for (row, &y) in out.data().chunks(k).zip(&labels) {
                running += euclidean(row, &anchors.centers()[y]);
            }
            seen_in_epoch += idx.len();
            if seen_in_epoch == samples.len() {
                tuplet_sums.push(running / samples.len() as f64);
                running = 0.0;
                seen_in_epoch = 0;
            }
            cac_batch(out, &labels, &anchors, cfg.lambda)
        },
    )?;
    let encoder = model.truncate(model_encoder_len(&Architecture::cim_network(cfg.q, k)))?;
    Ok((
        encoder,
        CimTrainReport {
            epoch_losses: report.epoch_losses,
            epoch_accuracy: report.epoch_accuracy,
            epoch_anchor_distance: tuplet_sums,
        },
    ))
}

/// Layers in g: everything but the final head.
fn model_encoder_len(arch: &Architecture) -> usize {
    arch.layers.len() - 1
}

/// Encoder features for a list of images, in order.
pub fn extract_features(encoder: &Model, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(FEATURE_BATCH) {
        let x = Tensor::stack(chunk)?;
        out.extend(batch_features(encoder, &x)?);
    }
    Ok(out)
}

fn batch_features(encoder: &Model, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let z = encoder.infer(x)?;
    if !z.is_finite() {
        return Err(PanError::Numerical("encoder produced non-finite features".into()));
    }
    let q = z.shape()[1];
    Ok(z.data().chunks(q).map(<[f64]>::to_vec).collect())
}

pub fn build_prototypes(encoder: &Model, samples: &[LabeledImage], registry: &CorruptionRegistry) -> Result<Prototypes> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Prototypes::from_features(&extract_features(encoder, &images)?, &labels, registry)
}

impl CimSnapshot {
    pub fn features(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        batch_features(&self.encoder, batch)
    }

    pub fn predict_batch(&self, batch: &Tensor) -> Result<Vec<CorruptionPrediction>> {
        self.features(batch)?.iter().map(|z| self.prototypes.predict(z)).collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CimMeta {
            kind: "cim".into(),
            architecture: self.encoder.arch().clone(),
            registry: self.registry.kinds().to_vec(),
            config: self.config.clone(),
            counts: self.prototypes.counts.clone(),
            reject_threshold: self.reject_threshold,
        };
        let mut ckpt = Checkpoint::new(&meta)?;
        ckpt.extend(self.encoder.named_tensors().into_iter().map(|(n, t)| (format!("encoder.{n}"), t)));
        let (k, q) = (self.prototypes.len(), self.prototypes.dim());
        ckpt.push("prototypes", Tensor::new(vec![k, q], self.prototypes.rows.concat())?);
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CimMeta = ckpt.metadata()?;
        if meta.kind != "cim" {
            return Err(format_err(format!("expected a cim checkpoint, found '{}'", meta.kind)));
        }
        let encoder = Model::from_named_tensors(meta.architecture, &ckpt.with_prefix("encoder."))?;
        let registry = CorruptionRegistry::new(&meta.registry);
        let p = ckpt.get("prototypes")?;
        if p.shape() != [registry.len(), p.shape()[1]] || meta.counts.len() != registry.len() {
            return Err(format_err(format!(
                "prototype matrix {:?} does not match {} corruption types",
                p.shape(),
                registry.len()
            )));
        }
        if encoder.arch().output_dim()? != p.shape()[1] {
            return Err(format_err("prototype width differs from the encoder feature dimension"));
        }
        let prototypes = Prototypes { rows: p.data().chunks(p.shape()[1]).map(<[f64]>::to_vec).collect(), counts: meta.counts };
        Ok(Self { encoder, prototypes, registry, config: meta.config, reject_threshold: meta.reject_threshold })
    }
}

impl Router for CimSnapshot {
    fn route(&self, batch: &Tensor, _indices: &[usize]) -> Result<Vec<Option<usize>>> {
        Ok(self
            .predict_batch(batch)?
            .into_iter()
            .map(|p| match self.reject_threshold {
                Some(t) if p.scores[p.kappa] > t => None,
                _ => Some(p.kappa),
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_anchors() -> AnchorSet {
        AnchorSet::scaled_basis(2, 2, 1.0).unwrap()
    }

    #[test]
    fn cac_at_own_anchor() {
        let l = cac_loss(&[1.0, 0.0], 0, &two_anchors(), 0.1).unwrap();
        assert_eq!(l.tuplet, 0.0);
        let expected = (1.0 + (-(2f64).sqrt()).exp()).ln();
        assert!((l.anchor - expected).abs() < 1e-15);
        assert!((l.anchor - 0.2177).abs() < 1e-4);
        assert!((l.loss - 0.02177).abs() < 1e-5);
    }

    #[test]
    fn cac_lambda_zero_and_symmetry() {
        let a = two_anchors();
        let l = cac_loss(&[3.0, 1.0], 1, &a, 0.0).unwrap();
        assert_eq!(l.loss, euclidean(&[3.0, 1.0], &[0.0, 1.0]));
        let sym = cac_loss(&[0.5, 0.5], 0, &a, 1.0).unwrap();
        assert!((sym.anchor - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cac_bad_class() {
        assert!(matches!(cac_loss(&[0.0, 0.0], 2, &two_anchors(), 0.1), Err(PanError::Parameter(_))));
    }

    #[test]
    fn softmin_examples() {
        let s = softmin(&[1.0, 2.0]);
        assert!((s[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((s[1] - 0.2689414213699951).abs() < 1e-12);
        assert_eq!(softmin(&[3.0; 4]), vec![0.25; 4]);
        let e = softmin(&[0.0, 1000.0]);
        assert_eq!(e[0], 1.0);
        assert!(e[1] >= 0.0 && e[1] < 1e-300);
    }

    #[test]
    fn predict_examples() {
        let p = predict_from_distances(vec![1.0, 2.0]);
        assert!((p.scores[0] - 0.2689414213699951).abs() < 1e-12);
        assert!((p.scores[1] - 1.4621171572600098).abs() < 1e-12);
        assert_eq!(p.kappa, 0);
        let protos = Prototypes { rows: vec![vec![0.0, 5.0], vec![5.0, 0.0], vec![1.0, 1.0]], counts: vec![1; 3] };
        assert_eq!(protos.predict(&[1.0, 1.0]).unwrap().kappa, 2);
        assert!(matches!(protos.predict(&[1.0]), Err(PanError::Shape(_))));
    }

    #[test]
    fn prototype_mean_and_coverage() {
        let reg = CorruptionRegistry::new(&[CorruptionKind::GaussianNoise]);
        let p = Prototypes::from_features(&[vec![0.0, 2.0], vec![2.0, 0.0], vec![5.0, 5.0]], &[0, 0, 1], &reg).unwrap();
        assert_eq!(p.rows[0], vec![1.0, 1.0]);
        assert_eq!(p.rows[1], vec![5.0, 5.0]);
        assert_eq!(p.counts, vec![2, 1]);
        let err = Prototypes::from_features(&[vec![0.0]], &[0], &reg).unwrap_err();
        assert!(matches!(err, PanError::Coverage(ref m) if m.contains("clean")), "{err}");
    }

    #[test]
    fn anchors_need_room() {
        assert!(AnchorSet::scaled_basis(3, 2, 1.0).is_err());
        assert!(AnchorSet::scaled_basis(2, 2, 0.0).is_err());
    }
}
