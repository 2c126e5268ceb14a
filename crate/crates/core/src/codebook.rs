//! Per-corruption BN statistics: the codebook, streaming test-time updates
//! and label-routed reference statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cim::{OracleRouter, Router};
use crate::error::{format_err, PanError, Result};
use crate::nn::{argmax, BatchStats, BnLayerStats, BnMode, BnStatsSet, Model};
use crate::tensor::Tensor;

pub const DEFAULT_TTA_MOMENTUM: f64 = 0.1;

/// Which BN layers are adapted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSelection {
    All,
    /// The first `n` BN layers.
    FromFirst(usize),
    /// The last `n` BN layers.
    FromLast(usize),
    /// BN layers `start..end`.
    Range(usize, usize),
}

impl LayerSelection {
    pub fn mask(self, n: usize) -> Vec<bool> {
        (0..n)
            .map(|i| match self {
                LayerSelection::All => true,
                LayerSelection::FromFirst(j) => i < j,
                LayerSelection::FromLast(j) => i + j >= n,
                LayerSelection::Range(a, b) => a <= i && i < b,
            })
            .collect()
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSelection::All => write!(f, "all"),
            LayerSelection::FromFirst(j) => write!(f, "first:{j}"),
            LayerSelection::FromLast(j) => write!(f, "last:{j}"),
            LayerSelection::Range(a, b) => write!(f, "{a}..{b}"),
        }
    }
}

/// `all`, `none`, `first:j`, `last:j`, or a range `a..b`.
impl FromStr for LayerSelection {
    type Err = PanError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || PanError::Config(format!("layer selection '{s}': expected all, none, first:N, last:N or A..B"));
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        let s = s.trim();
        match s {
            "all" => Ok(LayerSelection::All),
            "none" => Ok(LayerSelection::FromFirst(0)),
            _ => {
                if let Some(j) = s.strip_prefix("first:") {
                    Ok(LayerSelection::FromFirst(num(j)?))
                } else if let Some(j) = s.strip_prefix("last:") {
                    Ok(LayerSelection::FromLast(num(j)?))
                } else if let Some((a, b)) = s.split_once("..") {
                    let (a, b) = (num(a)?, num(b)?);
                    if a > b {
                        return Err(bad());
                    }
                    Ok(LayerSelection::Range(a, b))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub layers: LayerSelection,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { batch_size: 64, momentum: DEFAULT_TTA_MOMENTUM, layers: LayerSelection::All }
    }
}

impl AdaptConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PanError::Config("adaptation batch size must be >= 1".into()));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(PanError::Parameter(format!("momentum must be in (0, 1], got {}", self.momentum)));
        }
        Ok(())
    }
}

/// `μ ← (1−m)·μ + m·μ_batch`, `σ² ← (1−m)·σ² + m·σ²_batch` for every layer
/// with batch statistics; layers given `None` are left untouched.
pub fn ema_update(entry: &mut BnStatsSet, batch: &[Option<BatchStats>], m: f64) -> Result<()> {
    if batch.len() != entry.len() {
        return Err(PanError::Config(format!("{} batch statistics for {} BN layers", batch.len(), entry.len())));
    }
    for (l, (layer, bs)) in entry.layers.iter_mut().zip(batch).enumerate() {
        let Some(bs) = bs else { continue };
        if bs.mu.len() != layer.channels() || bs.var.len() != layer.channels() {
            return Err(PanError::Config(format!(
                "BN layer {l}: batch statistics have {} channels, entry has {}",
                bs.mu.len(),
                layer.channels()
            )));
        }
        for (r, b) in layer.mu.iter_mut().zip(&bs.mu) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in layer.var.iter_mut().zip(&bs.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<BnStatsSet>,
    source: BnStatsSet,
    update_counts: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookMeta {
    kind: String,
    entries: usize,
    layout: Vec<usize>,
    eps: Vec<f64>,
    update_counts: Vec<u64>,
}

impl Codebook {
    /// `k` entries, each a copy of `source`.
    pub fn new(source: BnStatsSet, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(PanError::Config("codebook needs at least one entry".into()));
        }
        for l in &source.layers {
            l.validate()?;
        }
        Ok(Self { entries: vec![source.clone(); k], source, update_counts: vec![0; k] })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source(&self) -> &BnStatsSet {
        &self.source
    }

    pub fn entries(&self) -> &[BnStatsSet] {
        &self.entries
    }

    pub fn update_counts(&self) -> &[u64] {
        &self.update_counts
    }

    pub fn lookup(&self, kappa: usize) -> Result<&BnStatsSet> {
        self.entries
            .get(kappa)
            .ok_or_else(|| PanError::Parameter(format!("codebook entry {kappa} out of range for K = {}", self.len())))
    }

    /// EMA update of entry `kappa` from one batch's per-layer statistics.
    pub fn tta_update(&mut self, kappa: usize, batch: &[Option<BatchStats>], m: f64) -> Result<()> {
        if !(m > 0.0 && m <= 1.0) {
            return Err(PanError::Parameter(format!("momentum must be in (0, 1], got {m}")));
        }
        let k = self.len();
        let entry = self
            .entries
            .get_mut(kappa)
            .ok_or_else(|| PanError::Parameter(format!("codebook entry {kappa} out of range for K = {k}")))?;
        ema_update(entry, batch, m)?;
        self.update_counts[kappa] += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CodebookMeta {
            kind: "codebook".into(),
            entries: self.len(),
            layout: self.source.layout(),
            eps: self.source.layers.iter().map(|l| l.eps).collect(),
            update_counts: self.update_counts.clone(),
        };
        let mut ckpt = Checkpoint::new(&meta)?;
        push_stats(&mut ckpt, "source", &self.source)?;
        for (i, e) in self.entries.iter().enumerate() {
            push_stats(&mut ckpt, &format!("entry.{i}"), e)?;
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CodebookMeta = ckpt.metadata()?;
        if meta.kind != "codebook" {
            return Err(format_err(format!("expected a codebook checkpoint, found '{}'", meta.kind)));
        }
        if meta.update_counts.len() != meta.entries || meta.entries == 0 || meta.eps.len() != meta.layout.len() {
            return Err(format_err("codebook metadata is inconsistent"));
        }
        let source = read_stats(ckpt, "source", &meta.layout, &meta.eps)?;
        let entries = (0..meta.entries)
            .map(|i| read_stats(ckpt, &format!("entry.{i}"), &meta.layout, &meta.eps))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries, source, update_counts: meta.update_counts })
    }
}

/// Stored as one 4×C tensor (μ, σ², γ, β) per BN layer.
fn push_stats(ckpt: &mut Checkpoint, prefix: &str, set: &BnStatsSet) -> Result<()> {
    for (l, s) in set.layers.iter().enumerate() {
        let data = [s.mu.as_slice(), &s.var, &s.gamma, &s.beta].concat();
        ckpt.push(format!("{prefix}.bn{l}"), Tensor::new(vec![4, s.channels()], data)?);
    }
    Ok(())
}

fn read_stats(ckpt: &Checkpoint, prefix: &str, layout: &[usize], eps: &[f64]) -> Result<BnStatsSet> {
    let mut layers = Vec::with_capacity(layout.len());
    for (l, (&c, &eps)) in layout.iter().zip(eps).enumerate() {
        let name = format!("{prefix}.bn{l}");
        let t = ckpt.get(&name)?;
        if t.shape() != [4, c] {
            return Err(format_err(format!("{name}: expected shape [4, {c}], got {:?}", t.shape())));
        }
        let row = |r: usize| t.data()[r * c..(r + 1) * c].to_vec();
        let s = BnLayerStats { mu: row(0), var: row(1), gamma: row(2), beta: row(3), eps };
        s.validate().map_err(|e| format_err(format!("{name}: {e}")))?;
        layers.push(s);
    }
    Ok(BnStatsSet::new(layers))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    /// Predicted class per stream sample.
    pub predictions: Vec<usize>,
    /// Codebook entry each sample was routed to.
    pub routes: Vec<Option<usize>>,
}

fn stack_range(images: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
    Tensor::stack(&refs)
}

/// Group positions of a batch by route, ascending by entry id with the
/// unrouted group last.
fn group_routes(routes: &[Option<usize>]) -> Vec<(Option<usize>, Vec<usize>)> {
    let mut groups: BTreeMap<(bool, usize), Vec<usize>> = BTreeMap::new();
    for (pos, r) in routes.iter().enumerate() {
        let key = match r {
            Some(k) => (false, *k),
            None => (true, 0),
        };
        groups.entry(key).or_default().push(pos);
    }
    groups.into_iter().map(|((none, k), v)| (if none { None } else { Some(k) }, v)).collect()
}

/// One use-batch forward pass: BN statistics of the selected layers.
fn batch_statistics(model: &Model, x: &Tensor, entry: &BnStatsSet, mask: &[bool]) -> Result<Vec<Option<BatchStats>>> {
    let modes: Vec<BnMode> = mask.iter().map(|&on| if on { BnMode::UseBatch } else { BnMode::UseStored }).collect();
    Ok(model.forward(x, entry, &modes, false)?.batch_stats)
}

fn classify(model: &Model, x: &Tensor, stats: &BnStatsSet) -> Result<Vec<usize>> {
    let out = model.forward_uniform(x, stats, BnMode::UseStored, false)?.output;
    if !out.is_finite() {
        return Err(PanError::Numerical("downstream model produced non-finite logits".into()));
    }
    let k = out.shape()[1];
    Ok(out.data().chunks(k).map(argmax).collect())
}

/// Stream adaptation: route each image, update the routed entry from its
/// group's batch statistics, then classify the group with the updated entry.
pub fn adapt_stream(
    model: &Model,
    router: &dyn Router,
    codebook: &mut Codebook,
    images: &[Tensor],
    cfg: &AdaptConfig,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    codebook.source.check_layout(&model.bn_layout())?;
    let mask = cfg.layers.mask(model.bn_count());
    let adapt_any = mask.iter().any(|&b| b);
    let mut predictions = vec![0; images.len()];
    let mut routes = vec![None; images.len()];
    let all: Vec<usize> = (0..images.len()).collect();
    for idx in all.chunks(cfg.batch_size) {
        let x = stack_range(images, idx)?;
        let batch_routes = router.route(&x, idx)?;
        if batch_routes.len() != idx.len() {
            return Err(PanError::Contract(format!("router returned {} routes for {} images", batch_routes.len(), idx.len())));
        }
        for (pos_group, members) in group_routes(&batch_routes) {
            let ids: Vec<usize> = members.iter().map(|&p| idx[p]).collect();
            let xg = if members.len() == idx.len() { x.clone() } else { stack_range(images, &ids)? };
            let preds = match pos_group {
                Some(kappa) => {
                    if adapt_any {
                        let stats = batch_statistics(model, &xg, codebook.lookup(kappa)?, &mask)?;
                        codebook.tta_update(kappa, &stats, cfg.momentum)?;
                    }
                    classify(model, &xg, codebook.lookup(kappa)?)?
                }
                None => classify(model, &xg, &codebook.source)?,
            };
            for (&i, p) in ids.iter().zip(preds) {
                predictions[i] = p;
                routes[i] = pos_group;
            }
        }
    }
    Ok(AdaptOutcome { predictions, routes })
}

/// Statistics obtained by routing every sample by its true corruption id.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStats {
    pub entries: Vec<BnStatsSet>,
}

impl ReferenceStats {
    pub fn get(&self, kappa: usize) -> Result<&BnStatsSet> {
        self.entries
            .get(kappa)
            .ok_or_else(|| PanError::Parameter(format!("reference entry {kappa} out of range")))
    }
}

/// Same batching and update rule as [`adapt_stream`], routed by `labels`.
pub fn compute_reference_stats(
    model: &Model,
    source: &BnStatsSet,
    k: usize,
    images: &[Tensor],
    labels: &[Option<usize>],
    cfg: &AdaptConfig,
) -> Result<ReferenceStats> {
    cfg.validate()?;
    source.check_layout(&model.bn_layout())?;
    if labels.len() != images.len() {
        return Err(PanError::Contract(format!("{} corruption labels for {} images", labels.len(), images.len())));
    }
    let labels: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            Some(k) => Ok(*k),
            None => Err(PanError::Contract(format!("stream sample {i} has no ground-truth corruption"))),
        })
        .collect::<Result<_>>()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(PanError::Parameter(format!("corruption id {bad} out of range for K = {k}")));
    }
    let mask = cfg.layers.mask(model.bn_count());
    let mut entries = vec![source.clone(); k];
    let router = OracleRouter { labels: &labels };
    let all: Vec<usize> = (0..images.len()).collect();
    for idx in all.chunks(cfg.batch_size) {
        let x = stack_range(images, idx)?;
        for (kappa, members) in group_routes(&router.route(&x, idx)?) {
            let kappa = kappa.expect("oracle routes every sample");
            let ids: Vec<usize> = members.iter().map(|&p| idx[p]).collect();
            let xg = if members.len() == idx.len() { x.clone() } else { stack_range(images, &ids)? };
            let stats = batch_statistics(model, &xg, &entries[kappa], &mask)?;
            ema_update(&mut entries[kappa], &stats, cfg.momentum)?;
        }
    }
    Ok(ReferenceStats { entries })
}
