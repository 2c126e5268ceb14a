//! Metrics: classification accuracy per (corruption, severity) group, mean
//! corruption error, statistics divergence, CIM confusion and layer
//! ablation curves. CSV writers use fixed column names.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cim::Router;
use crate::codebook::{adapt_stream, AdaptConfig, Codebook, LayerSelection, ReferenceStats};
use crate::corruption::{CorruptionKind, CorruptionRegistry, Severity};
use crate::data::store::StoredSample;
use crate::error::{PanError, Result};
use crate::nn::{argmax, BnMode, BnStatsSet, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCa {
    pub corruption: CorruptionKind,
    /// `None` for clean samples.
    pub severity: Option<Severity>,
    pub n: usize,
    pub correct: usize,
}

impl GroupCa {
    pub fn ca(&self) -> f64 {
        100.0 * self.correct as f64 / self.n as f64
    }

    fn error(&self) -> f64 {
        1.0 - self.correct as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaTable {
    pub groups: Vec<GroupCa>,
    /// Expected groups that had no samples.
    pub omitted: Vec<String>,
}

fn group_label(kind: CorruptionKind, sev: Option<Severity>) -> String {
    match sev {
        Some(s) => format!("{kind}@{s}"),
        None => kind.to_string(),
    }
}

impl CaTable {
    /// Tally predictions against labels. Groups are ordered by corruption
    /// type then severity; `expected` groups without samples are listed in
    /// `omitted`.
    pub fn from_predictions(
        samples: &[StoredSample],
        predictions: &[usize],
        expected: &[(CorruptionKind, Option<Severity>)],
    ) -> Result<Self> {
        if samples.len() != predictions.len() {
            return Err(PanError::Contract(format!(
                "{} predictions for {} samples",
                predictions.len(),
                samples.len()
            )));
        }
        let mut tally: BTreeMap<(CorruptionKind, Option<Severity>), (usize, usize)> = BTreeMap::new();
        for (s, &p) in samples.iter().zip(predictions) {
            let e = tally.entry((s.corruption, s.severity)).or_default();
            e.0 += 1;
            e.1 += usize::from(p == s.label);
        }
        let omitted = expected
            .iter()
            .filter(|g| !tally.contains_key(g))
            .map(|&(k, s)| group_label(k, s))
            .collect();
        let groups = tally
            .into_iter()
            .map(|((corruption, severity), (n, correct))| GroupCa { corruption, severity, n, correct })
            .collect();
        Ok(Self { groups, omitted })
    }

    fn pooled(&self, pick: impl Fn(&GroupCa) -> bool) -> Option<f64> {
        let (n, c) = self
            .groups
            .iter()
            .filter(|g| pick(g))
            .fold((0, 0), |(n, c), g| (n + g.n, c + g.correct));
        (n > 0).then(|| 100.0 * c as f64 / n as f64)
    }

    /// Pooled CA over all corrupted (non-clean) samples.
    pub fn corrupted_ca(&self) -> Option<f64> {
        self.pooled(|g| g.corruption != CorruptionKind::Clean)
    }

    pub fn clean_ca(&self) -> Option<f64> {
        self.pooled(|g| g.corruption == CorruptionKind::Clean)
    }

    pub fn total_ca(&self) -> Option<f64> {
        self.pooled(|_| true)
    }

    pub fn total_n(&self) -> usize {
        self.groups.iter().map(|g| g.n).sum()
    }

    pub fn summary(&self) -> CaSummary {
        CaSummary {
            corrupted_ca: self.corrupted_ca(),
            clean_ca: self.clean_ca(),
            total_ca: self.total_ca(),
            groups: self.groups.clone(),
            omitted: self.omitted.clone(),
        }
    }

    /// `corruption,severity,n,correct,ca`; severity 0 marks clean samples.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("corruption,severity,n,correct,ca\n");
        for g in &self.groups {
            let sev = g.severity.map_or(0, u8::from);
            let _ = writeln!(out, "{},{},{},{},{:.4}", g.corruption, sev, g.n, g.correct, g.ca());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaSummary {
    pub corrupted_ca: Option<f64>,
    pub clean_ca: Option<f64>,
    pub total_ca: Option<f64>,
    pub groups: Vec<GroupCa>,
    pub omitted: Vec<String>,
}

/// Class predictions with one fixed statistics set, in batches.
pub fn predict_fixed(model: &Model, stats: &BnStatsSet, images: &[Tensor], batch_size: usize) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(PanError::Config("batch size must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let logits = model.forward_uniform(&Tensor::stack(&refs)?, stats, BnMode::UseStored, false)?.output;
        if !logits.is_finite() {
            return Err(PanError::Numerical("non-finite logits during evaluation".into()));
        }
        let k = logits.shape()[1];
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

/// Where evaluation takes its BN statistics from.
pub enum StatsSource<'a> {
    Fixed(&'a BnStatsSet),
    /// Adapt a copy of the codebook along the stream.
    Adaptive { codebook: &'a Codebook, router: &'a dyn Router, cfg: AdaptConfig },
}

/// CA per group. Never mutates the caller's codebook.
pub fn eval_ca(
    model: &Model,
    source: StatsSource<'_>,
    samples: &[StoredSample],
    batch_size: usize,
    expected: &[(CorruptionKind, Option<Severity>)],
) -> Result<CaTable> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let preds = match source {
        StatsSource::Fixed(stats) => predict_fixed(model, stats, &images, batch_size)?,
        StatsSource::Adaptive { codebook, router, cfg } => {
            let mut cb = codebook.clone();
            adapt_stream(model, router, &mut cb, &images, &cfg)?.predictions
        }
    };
    CaTable::from_predictions(samples, &preds, expected)
}

/// Mean over corruption types of `Σ_s err / Σ_s baseline_err`, ×100.
/// Clean groups are excluded.
pub fn eval_mce(model: &CaTable, baseline: &CaTable) -> Result<f64> {
    let key = |g: &GroupCa| (g.corruption, g.severity);
    let corrupted = |t: &CaTable| -> Vec<GroupCa> {
        t.groups.iter().filter(|g| g.corruption != CorruptionKind::Clean).cloned().collect()
    };
    let (m, b) = (corrupted(model), corrupted(baseline));
    if m.iter().map(key).ne(b.iter().map(key)) {
        return Err(PanError::Contract("mCE needs both reports to cover identical (type, severity) groups".into()));
    }
    if m.is_empty() {
        return Err(PanError::Contract("mCE needs at least one corrupted group".into()));
    }
    let mut per_type: BTreeMap<CorruptionKind, (f64, f64)> = BTreeMap::new();
    for (gm, gb) in m.iter().zip(&b) {
        let e = per_type.entry(gm.corruption).or_default();
        e.0 += gm.error();
        e.1 += gb.error();
    }
    let mut sum = 0.0;
    for (kind, (err, base)) in &per_type {
        if *base == 0.0 {
            return Err(PanError::Numerical(format!("baseline error is zero for '{kind}'; mCE ratio undefined")));
        }
        sum += err / base;
    }
    Ok(100.0 * sum / per_type.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRow {
    pub corruption: CorruptionKind,
    pub layer: usize,
    pub adapted_to_reference: f64,
    pub source_to_reference: f64,
}

/// L2 distance of (μ, σ²) per entry and BN layer: adapted vs reference and
/// source vs reference.
pub fn stats_divergence(
    codebook: &Codebook,
    reference: &ReferenceStats,
    registry: &CorruptionRegistry,
) -> Result<Vec<DivergenceRow>> {
    let layout = codebook.source().layout();
    if reference.entries.len() != codebook.len() || registry.len() != codebook.len() {
        return Err(PanError::Config(format!(
            "codebook has {} entries, reference {}, registry {}",
            codebook.len(),
            reference.entries.len(),
            registry.len()
        )));
    }
    let mut rows = Vec::new();
    for (k, r) in reference.entries.iter().enumerate() {
        r.check_layout(&layout)?;
        let adapted = codebook.lookup(k)?;
        adapted.check_layout(&layout)?;
        for layer in 0..layout.len() {
            rows.push(DivergenceRow {
                corruption: registry.kind(k)?,
                layer,
                adapted_to_reference: adapted.layer_distance(r, layer),
                source_to_reference: codebook.source().layer_distance(r, layer),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceSummary {
    pub corruption: CorruptionKind,
    pub adapted_to_reference: f64,
    pub source_to_reference: f64,
}

/// Layer-averaged distances per corruption type.
pub fn divergence_summary(rows: &[DivergenceRow]) -> Vec<DivergenceSummary> {
    let mut acc: BTreeMap<CorruptionKind, (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.corruption).or_default();
        e.0 += r.adapted_to_reference;
        e.1 += r.source_to_reference;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(corruption, (a, s, n))| DivergenceSummary {
            corruption,
            adapted_to_reference: a / n as f64,
            source_to_reference: s / n as f64,
        })
        .collect()
}

pub fn divergence_csv(rows: &[DivergenceRow]) -> String {
    let mut out = String::from("corruption,layer,adapted_to_reference,source_to_reference\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.10e},{:.10e}", r.corruption, r.layer, r.adapted_to_reference, r.source_to_reference);
    }
    out
}

/// Rows are true corruption ids, columns predicted ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_pairs(labels: Vec<String>, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        let k = labels.len();
        if truth.len() != predicted.len() {
            return Err(PanError::Contract("confusion matrix needs equal-length label lists".into()));
        }
        let mut counts = vec![vec![0; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(PanError::Parameter(format!("corruption id {} out of range for K = {k}", t.max(p))));
            }
            counts[t][p] += 1;
        }
        Ok(Self { labels, counts })
    }

    pub fn accuracy(&self) -> f64 {
        let total: usize = self.counts.iter().flatten().sum();
        let diag: usize = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        if total == 0 {
            0.0
        } else {
            100.0 * diag as f64 / total as f64
        }
    }

    /// `true,predicted,count` for every cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true,predicted,count\n");
        for (i, row) in self.counts.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{c}", self.labels[i], self.labels[j]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationDirection {
    FromFirst,
    FromLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub direction: AblationDirection,
    pub layers: usize,
    pub corrupted_ca: f64,
}

/// Corrupted CA with adaptation restricted to the first (or last) `j` BN
/// layers, for `j = 0..=n`.
pub fn layer_ablation_sweep(
    model: &Model,
    router: &dyn Router,
    codebook: &Codebook,
    samples: &[StoredSample],
    cfg: &AdaptConfig,
    direction: AblationDirection,
) -> Result<Vec<AblationPoint>> {
    let n = model.bn_count();
    if n < 2 {
        return Err(PanError::Config(format!("layer ablation needs at least 2 BN layers, model has {n}")));
    }
    let mut out = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let layers = match direction {
            AblationDirection::FromFirst => LayerSelection::FromFirst(j),
            AblationDirection::FromLast => LayerSelection::FromLast(j),
        };
        let table = eval_ca(
            model,
            StatsSource::Adaptive { codebook, router, cfg: AdaptConfig { layers, ..*cfg } },
            samples,
            cfg.batch_size,
            &[],
        )?;
        let corrupted_ca = table
            .corrupted_ca()
            .ok_or_else(|| PanError::Contract("layer ablation stream has no corrupted samples".into()))?;
        out.push(AblationPoint { direction, layers: j, corrupted_ca });
    }
    Ok(out)
}

pub fn ablation_csv(points: &[AblationPoint]) -> String {
    let mut out = String::from("direction,layers,corrupted_ca\n");
    for p in points {
        let dir = match p.direction {
            AblationDirection::FromFirst => "from_first",
            AblationDirection::FromLast => "from_last",
        };
        let _ = writeln!(out, "{dir},{},{:.4}", p.layers, p.corrupted_ca);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(kind: CorruptionKind, sev: Option<u8>, label: usize) -> StoredSample {
        StoredSample {
            image: Tensor::zeros(&[1]),
            label,
            corruption: kind,
            severity: sev.map(|s| Severity::new(s).unwrap()),
        }
    }

    fn table(errors: &[(CorruptionKind, u8, usize, usize)]) -> CaTable {
        CaTable {
            groups: errors
                .iter()
                .map(|&(corruption, s, n, correct)| GroupCa {
                    corruption,
                    severity: Some(Severity::new(s).unwrap()),
                    n,
                    correct,
                })
                .collect(),
            omitted: vec![],
        }
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let samples: Vec<StoredSample> = (0..20).map(|i| sample(CorruptionKind::Fog, Some(3), i % 10)).collect();
        let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let t = CaTable::from_predictions(&samples, &truth, &[]).unwrap();
        assert_eq!(t.groups[0].ca(), 100.0);
        let t = CaTable::from_predictions(&samples, &[4; 20], &[]).unwrap();
        assert_eq!(t.corrupted_ca(), Some(10.0));
        assert_eq!(t.clean_ca(), None);
        assert_eq!(t.total_n(), 20);
    }

    #[test]
    fn omitted_groups_flagged() {
        let samples = vec![sample(CorruptionKind::Clean, None, 0)];
        let fog = (CorruptionKind::Fog, Some(Severity::new(5).unwrap()));
        let t = CaTable::from_predictions(&samples, &[0], &[fog, (CorruptionKind::Clean, None)]).unwrap();
        assert_eq!(t.omitted, vec!["fog@5".to_string()]);
        assert_eq!(t.to_csv(), "corruption,severity,n,correct,ca\nclean,0,1,1,100.0000\n");
    }

    #[test]
    fn mce_examples() {
        let base = table(&[(CorruptionKind::Fog, 3, 10, 6), (CorruptionKind::Fog, 5, 10, 2), (CorruptionKind::Contrast, 3, 10, 4)]);
        assert!((eval_mce(&base, &base).unwrap() - 100.0).abs() < 1e-12);
        let half = table(&[(CorruptionKind::Fog, 3, 10, 8), (CorruptionKind::Fog, 5, 10, 6), (CorruptionKind::Contrast, 3, 10, 7)]);
        assert!((eval_mce(&half, &base).unwrap() - 50.0).abs() < 1e-9);
        let perfect = table(&[(CorruptionKind::Fog, 3, 10, 10), (CorruptionKind::Fog, 5, 10, 10), (CorruptionKind::Contrast, 3, 10, 10)]);
        assert_eq!(eval_mce(&perfect, &base).unwrap(), 0.0);
        let err = eval_mce(&base, &perfect).unwrap_err();
        assert!(err.to_string().contains("contrast"), "{err}");
        let other = table(&[(CorruptionKind::Fog, 3, 10, 8)]);
        assert!(matches!(eval_mce(&other, &base), Err(PanError::Contract(_))));
    }

    #[test]
    fn confusion_rows_sum_to_counts() {
        let m = ConfusionMatrix::from_pairs(vec!["a".into(), "b".into()], &[0, 0, 1], &[0, 1, 1]).unwrap();
        assert_eq!(m.counts, vec![vec![1, 1], vec![0, 1]]);
        assert!((m.accuracy() - 200.0 / 3.0).abs() < 1e-12);
    }
}
