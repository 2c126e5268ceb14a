//! The staged experiment: data → source model → CIM → adaptation → report.
//!
//! Every stage is a plain function so the CLI can run them one at a time
//! with on-disk artifacts in between; [`run_pipeline`] chains them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cim::{build_prototypes, train_cim, CimConfig, CimSnapshot, CimTrainReport, FixedRouter, OracleRouter};
use crate::codebook::{adapt_stream, compute_reference_stats, AdaptConfig, Codebook, LayerSelection};
use crate::config::KvConfig;
use crate::corruption::{build_corrupted_dataset, corrupt, parse_kinds, parse_severities, CorruptionKind, CorruptionRegistry, Severity};
use crate::data::store::StoredSample;
use crate::data::{procedural_shapes, LabeledImage};
use crate::error::{PanError, Result};
use crate::eval::{
    ablation_csv, divergence_csv, divergence_summary, eval_mce, layer_ablation_sweep, predict_fixed, stats_divergence,
    AblationDirection, AblationPoint, CaSummary, CaTable, ConfusionMatrix, DivergenceRow, DivergenceSummary,
};
use crate::nn::{train_supervised, Architecture, Model, TrainConfig, TrainReport};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

/// Offsets keeping the data splits of one seed apart.
const TEST_SEED_OFFSET: u64 = 0x7E57;
const STREAM_SEED_OFFSET: u64 = 0x5EED;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub classes: usize,
    pub train_size: usize,
    /// Clean test images; each is corrupted with every (type, severity).
    pub test_size: usize,
    /// Clean training images turned into CIM training samples.
    pub cim_train_size: usize,
    pub corruptions: Vec<CorruptionKind>,
    pub severities: Vec<Severity>,
    pub source: TrainConfig,
    pub cim: CimConfig,
    pub reject_threshold: Option<f64>,
    pub adapt: AdaptConfig,
    pub eval_batch: usize,
    pub ablation: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        use CorruptionKind::*;
        Self {
            seed: 0,
            classes: 10,
            train_size: 3000,
            test_size: 150,
            cim_train_size: 2100,
            corruptions: vec![GaussianNoise, ImpulseNoise, DefocusBlur, MotionBlur, Contrast, Fog],
            severities: [3, 4, 5].map(|s| Severity::new(s).expect("valid")).to_vec(),
            source: TrainConfig { epochs: 6, batch_size: 32, lr: 0.02, momentum: 0.9, seed: 0 },
            cim: CimConfig { train: TrainConfig { epochs: 16, batch_size: 32, lr: 0.02, momentum: 0.9, seed: 0 }, ..CimConfig::default() },
            reject_threshold: None,
            adapt: AdaptConfig::default(),
            eval_batch: 64,
            ablation: true,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "classes",
    "train_size",
    "test_size",
    "cim_train_size",
    "corruptions",
    "severities",
    "source.epochs",
    "source.batch_size",
    "source.lr",
    "source.momentum",
    "cim.epochs",
    "cim.batch_size",
    "cim.lr",
    "cim.momentum",
    "cim.q",
    "cim.alpha",
    "cim.lambda",
    "cim.reject_threshold",
    "adapt.batch_size",
    "adapt.momentum",
    "adapt.layers",
    "eval_batch",
    "ablation",
];

fn train_from_kv(kv: &KvConfig, prefix: &str, base: TrainConfig, seed: u64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        epochs: kv.get_or(&format!("{prefix}.epochs"), base.epochs)?,
        batch_size: kv.get_or(&format!("{prefix}.batch_size"), base.batch_size)?,
        lr: kv.get_or(&format!("{prefix}.lr"), base.lr)?,
        momentum: kv.get_or(&format!("{prefix}.momentum"), base.momentum)?,
        seed,
    })
}

impl PipelineConfig {
    /// Defaults overridden by the keys of `kv`; unknown keys are rejected.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.check_keys(CONFIG_KEYS)?;
        let d = Self::default();
        let seed = kv.get_or("seed", d.seed)?;
        let corruptions = match kv.raw("corruptions") {
            Some(v) => parse_kinds(v).map_err(|e| PanError::Config(e.to_string()))?,
            None => d.corruptions,
        };
        let severities = match kv.raw("severities") {
            Some(v) => parse_severities(v).map_err(|e| PanError::Config(e.to_string()))?,
            None => d.severities,
        };
        let cfg = Self {
            seed,
            classes: kv.get_or("classes", d.classes)?,
            train_size: kv.get_or("train_size", d.train_size)?,
            test_size: kv.get_or("test_size", d.test_size)?,
            cim_train_size: kv.get_or("cim_train_size", d.cim_train_size)?,
            corruptions,
            severities,
            source: train_from_kv(kv, "source", d.source, seed)?,
            cim: CimConfig {
                q: kv.get_or("cim.q", d.cim.q)?,
                alpha: kv.get_or("cim.alpha", d.cim.alpha)?,
                lambda: kv.get_or("cim.lambda", d.cim.lambda)?,
                train: train_from_kv(kv, "cim", d.cim.train, seed)?,
            },
            reject_threshold: kv.get("cim.reject_threshold")?,
            adapt: AdaptConfig {
                batch_size: kv.get_or("adapt.batch_size", d.adapt.batch_size)?,
                momentum: kv.get_or("adapt.momentum", d.adapt.momentum)?,
                layers: match kv.raw("adapt.layers") {
                    Some(v) => v.parse::<LayerSelection>()?,
                    None => d.adapt.layers,
                },
            },
            eval_batch: kv.get_or("eval_batch", d.eval_batch)?,
            ablation: kv.get_or("ablation", d.ablation)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same seed for every sub-stage unless overridden.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.source.seed = seed;
        self.cim.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.corruptions.is_empty() || self.corruptions.contains(&CorruptionKind::Clean) {
            return Err(PanError::Config("corruptions must list at least one non-clean type".into()));
        }
        if self.severities.is_empty() {
            return Err(PanError::Config("at least one severity is required".into()));
        }
        if self.test_size == 0 || self.train_size == 0 || self.eval_batch == 0 {
            return Err(PanError::Config("train_size, test_size and eval_batch must be >= 1".into()));
        }
        let k = self.corruptions.len() + 1;
        if self.cim_train_size < k {
            return Err(PanError::Config(format!("cim_train_size must cover all {k} corruption types")));
        }
        if !(self.adapt.momentum > 0.0 && self.adapt.momentum <= 1.0) {
            return Err(PanError::Config(format!("adapt.momentum must be in (0, 1], got {}", self.adapt.momentum)));
        }
        Ok(())
    }

    /// Canonical `key=value` rendering of every setting.
    pub fn canonical(&self) -> String {
        let mut kv = KvConfig::default();
        kv.set("seed", self.seed);
        kv.set("classes", self.classes);
        kv.set("train_size", self.train_size);
        kv.set("test_size", self.test_size);
        kv.set("cim_train_size", self.cim_train_size);
        kv.set("corruptions", self.corruptions.iter().map(|k| k.name()).collect::<Vec<_>>().join(","));
        kv.set("severities", self.severities.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
        for (p, t) in [("source", &self.source), ("cim", &self.cim.train)] {
            kv.set(&format!("{p}.epochs"), t.epochs);
            kv.set(&format!("{p}.batch_size"), t.batch_size);
            kv.set(&format!("{p}.lr"), t.lr);
            kv.set(&format!("{p}.momentum"), t.momentum);
        }
        kv.set("cim.q", self.cim.q);
        kv.set("cim.alpha", self.cim.alpha);
        kv.set("cim.lambda", self.cim.lambda);
        if let Some(t) = self.reject_threshold {
            kv.set("cim.reject_threshold", t);
        }
        kv.set("adapt.batch_size", self.adapt.batch_size);
        kv.set("adapt.momentum", self.adapt.momentum);
        kv.set("adapt.layers", self.adapt.layers);
        kv.set("eval_batch", self.eval_batch);
        kv.set("ablation", self.ablation);
        kv.canonical()
    }

    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn registry(&self) -> CorruptionRegistry {
        CorruptionRegistry::new(&self.corruptions)
    }
}

/// Training and test splits of the procedural corpus.
pub fn procedural_splits(cfg: &PipelineConfig) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let train = procedural_shapes(cfg.train_size, cfg.classes, cfg.seed)?;
    let test = procedural_shapes(cfg.test_size, cfg.classes, cfg.seed.wrapping_add(TEST_SEED_OFFSET))?;
    Ok((train, test))
}

/// One corrupted copy per clean image: image `i` gets type `i mod K` (clean
/// included) and a random severity from `severities`.
pub fn cim_training_set(
    clean: &[LabeledImage],
    registry: &CorruptionRegistry,
    severities: &[Severity],
    seed: u64,
) -> Result<Vec<StoredSample>> {
    if severities.is_empty() {
        return Err(PanError::Config("at least one severity is required".into()));
    }
    clean
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let kind = registry.kind(i % registry.len())?;
            let mut rng = Rng::derive(seed, streams::CORRUPT, i as u64);
            if kind == CorruptionKind::Clean {
                return Ok(StoredSample { image: item.image.clone(), label: item.label, corruption: kind, severity: None });
            }
            let sev = severities[rng.below(severities.len())];
            Ok(StoredSample {
                image: corrupt(&item.image, kind, sev, &mut rng)?,
                label: item.label,
                corruption: kind,
                severity: Some(sev),
            })
        })
        .collect()
}

/// Every clean test image under every (type, severity), plus the clean
/// images themselves, in a seeded random order.
pub fn test_stream(
    clean: &[LabeledImage],
    kinds: &[CorruptionKind],
    severities: &[Severity],
    seed: u64,
) -> Result<Vec<StoredSample>> {
    let mut out: Vec<StoredSample> = build_corrupted_dataset(clean, kinds, severities, seed)?
        .into_iter()
        .map(|s| StoredSample { image: s.image, label: s.label, corruption: s.corruption, severity: Some(s.severity) })
        .collect();
    out.extend(clean.iter().map(|c| StoredSample {
        image: c.image.clone(),
        label: c.label,
        corruption: CorruptionKind::Clean,
        severity: None,
    }));
    Rng::stream(seed.wrapping_add(STREAM_SEED_OFFSET), streams::SHUFFLE).shuffle(&mut out);
    Ok(out)
}

/// Samples relabelled with their corruption id for CIM training.
pub fn corruption_labeled(samples: &[StoredSample], registry: &CorruptionRegistry) -> Result<Vec<LabeledImage>> {
    samples
        .iter()
        .map(|s| Ok(LabeledImage { image: s.image.clone(), label: registry.id(s.corruption)? }))
        .collect()
}

pub fn train_source(train: &[LabeledImage], classes: usize, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(Architecture::source_cnn(classes), cfg.seed)?;
    let report = train_supervised(&mut model, train, cfg)?;
    Ok((model, report))
}

pub fn train_cim_snapshot(
    samples: &[StoredSample],
    registry: &CorruptionRegistry,
    cfg: &CimConfig,
    reject_threshold: Option<f64>,
) -> Result<(CimSnapshot, CimTrainReport)> {
    let labeled = corruption_labeled(samples, registry)?;
    let (encoder, report) = train_cim(&labeled, registry, cfg, cfg.train.seed)?;
    let prototypes = build_prototypes(&encoder, &labeled, registry)?;
    Ok((
        CimSnapshot { encoder, prototypes, registry: registry.clone(), config: cfg.clone(), reject_threshold },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    /// Model whose errors normalize mCE.
    pub baseline: String,
    pub registry: Vec<String>,
    pub bn_layers: usize,
    pub stream_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run: RunMetadata,
    pub source: CaSummary,
    pub pan: CaSummary,
    /// PAN with ground-truth routing.
    pub oracle: CaSummary,
    pub mce_pan: f64,
    pub mce_oracle: f64,
    pub cim_accuracy: f64,
    pub cim_confusion: ConfusionMatrix,
    pub codebook_updates: Vec<u64>,
    pub divergence: Vec<DivergenceRow>,
    pub divergence_summary: Vec<DivergenceSummary>,
    /// Largest element difference between oracle-routed adaptation and the
    /// reference statistics.
    pub oracle_reference_max_diff: f64,
    pub ablation: Vec<AblationPoint>,
}

/// Everything produced by the evaluation stage.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub source_table: CaTable,
    pub pan_table: CaTable,
    pub oracle_table: CaTable,
    pub codebook: Codebook,
}

fn max_set_diff(a: &Codebook, reference: &[crate::nn::BnStatsSet]) -> f64 {
    let mut m: f64 = 0.0;
    for (e, r) in a.entries().iter().zip(reference) {
        for (le, lr) in e.layers.iter().zip(&r.layers) {
            for (x, y) in le.mu.iter().chain(&le.var).zip(lr.mu.iter().chain(&lr.var)) {
                m = m.max((x - y).abs());
            }
        }
    }
    m
}

pub fn expected_groups(kinds: &[CorruptionKind], severities: &[Severity]) -> Vec<(CorruptionKind, Option<Severity>)> {
    let mut g: Vec<_> = kinds.iter().flat_map(|&k| severities.iter().map(move |&s| (k, Some(s)))).collect();
    g.push((CorruptionKind::Clean, None));
    g
}

/// CIM routing decisions for a whole stream, computed once so repeated
/// adaptation runs see identical routes.
pub fn cim_routes(cim: &CimSnapshot, images: &[Tensor], batch_size: usize) -> Result<Vec<Option<usize>>> {
    if batch_size == 0 {
        return Err(PanError::Config("batch size must be >= 1".into()));
    }
    let mut routes = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        routes.extend(crate::cim::Router::route(cim, &Tensor::stack(&refs)?, &[])?);
    }
    Ok(routes)
}

/// Evaluate Source, PAN and oracle-routed PAN on `stream`, plus the
/// statistics diagnostics and (optionally) the layer ablation.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    cim: &CimSnapshot,
    stream: &[StoredSample],
    adapt: &AdaptConfig,
    eval_batch: usize,
    expected: &[(CorruptionKind, Option<Severity>)],
    ablation: bool,
    meta: (u64, String),
) -> Result<Evaluation> {
    let registry = &cim.registry;
    let k = registry.len();
    let images: Vec<Tensor> = stream.iter().map(|s| s.image.clone()).collect();
    let truth: Vec<usize> = stream.iter().map(|s| registry.id(s.corruption)).collect::<Result<_>>()?;
    let source_stats = model.source_stats();

    let source_preds = predict_fixed(model, &source_stats, &images, eval_batch)?;
    let source_table = CaTable::from_predictions(stream, &source_preds, expected)?;

    let routes = cim_routes(cim, &images, eval_batch)?;
    let router = FixedRouter { routes: &routes };
    let mut codebook = Codebook::new(source_stats.clone(), k)?;
    let pan = adapt_stream(model, &router, &mut codebook, &images, adapt)?;
    let pan_table = CaTable::from_predictions(stream, &pan.predictions, expected)?;

    let predicted_kappa: Vec<usize> = routes.iter().map(|r| r.unwrap_or(registry.clean_id())).collect();
    let cim_confusion = ConfusionMatrix::from_pairs(registry.names(), &truth, &predicted_kappa)?;

    let mut oracle_cb = Codebook::new(source_stats.clone(), k)?;
    let oracle = adapt_stream(model, &OracleRouter { labels: &truth }, &mut oracle_cb, &images, adapt)?;
    let oracle_table = CaTable::from_predictions(stream, &oracle.predictions, expected)?;

    let labels: Vec<Option<usize>> = truth.iter().map(|&t| Some(t)).collect();
    let reference = compute_reference_stats(model, &source_stats, k, &images, &labels, adapt)?;
    let divergence = stats_divergence(&codebook, &reference, registry)?;

    let ablation_points = if ablation {
        let fresh = Codebook::new(source_stats.clone(), k)?;
        let mut pts = layer_ablation_sweep(model, &router, &fresh, stream, adapt, AblationDirection::FromFirst)?;
        pts.extend(layer_ablation_sweep(model, &router, &fresh, stream, adapt, AblationDirection::FromLast)?);
        pts
    } else {
        Vec::new()
    };

    let report = EvalReport {
        run: RunMetadata {
            seed: meta.0,
            config_hash: meta.1,
            baseline: "source".into(),
            registry: registry.names(),
            bn_layers: model.bn_count(),
            stream_size: stream.len(),
        },
        source: source_table.summary(),
        pan: pan_table.summary(),
        oracle: oracle_table.summary(),
        mce_pan: eval_mce(&pan_table, &source_table)?,
        mce_oracle: eval_mce(&oracle_table, &source_table)?,
        cim_accuracy: cim_confusion.accuracy(),
        cim_confusion,
        codebook_updates: codebook.update_counts().to_vec(),
        divergence_summary: divergence_summary(&divergence),
        divergence,
        oracle_reference_max_diff: max_set_diff(&oracle_cb, &reference.entries),
        ablation: ablation_points,
    };
    Ok(Evaluation { report, source_table, pan_table, oracle_table, codebook })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| PanError::Numerical(format!("report: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    /// Short human-readable summary.
    pub fn render_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
        let mut out = String::new();
        let _ = writeln!(out, "config {}", self.run.config_hash);
        let _ = writeln!(out, "stream {} samples, {} BN layers", self.run.stream_size, self.run.bn_layers);
        let _ = writeln!(out, "{:<8} {:>10} {:>8} {:>8}", "method", "corrupted", "clean", "total");
        for (name, s) in [("source", &self.source), ("pan", &self.pan), ("oracle", &self.oracle)] {
            let _ = writeln!(out, "{name:<8} {:>10} {:>8} {:>8}", f(s.corrupted_ca), f(s.clean_ca), f(s.total_ca));
        }
        let _ = writeln!(out, "mCE vs {}: pan {:.2}, oracle {:.2}", self.run.baseline, self.mce_pan, self.mce_oracle);
        let _ = writeln!(out, "CIM accuracy {:.2}", self.cim_accuracy);
        for d in &self.divergence_summary {
            let _ = writeln!(
                out,
                "L2 to reference  {:<15} adapted {:.4e}  source {:.4e}",
                d.corruption.name(),
                d.adapted_to_reference,
                d.source_to_reference
            );
        }
        for p in &self.ablation {
            let _ = writeln!(out, "ablation {:?} {} layers: {:.2}", p.direction, p.layers, p.corrupted_ca);
        }
        out
    }
}

/// Write `report.json`, `eval.csv` (PAN), `source_eval.csv`,
/// `oracle_eval.csv`, `divergence.csv`, `confusion.csv` and `ablation.csv`.
pub fn write_evaluation(dir: &Path, ev: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), ev.report.to_json()?)?;
    fs::write(dir.join("eval.csv"), ev.pan_table.to_csv())?;
    fs::write(dir.join("source_eval.csv"), ev.source_table.to_csv())?;
    fs::write(dir.join("oracle_eval.csv"), ev.oracle_table.to_csv())?;
    fs::write(dir.join("divergence.csv"), divergence_csv(&ev.report.divergence))?;
    fs::write(dir.join("confusion.csv"), ev.report.cim_confusion.to_csv())?;
    if !ev.report.ablation.is_empty() {
        fs::write(dir.join("ablation.csv"), ablation_csv(&ev.report.ablation))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub source: TrainReport,
    pub cim: CimTrainReport,
}

impl TrainingSummary {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| PanError::Numerical(format!("training summary: {e}")))?;
        s.push('\n');
        Ok(s)
    }
}

pub struct PipelineOutput {
    pub model: Model,
    pub cim: CimSnapshot,
    pub evaluation: Evaluation,
    pub training: TrainingSummary,
}

/// Run every stage in memory on the procedural corpus.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let registry = cfg.registry();
    let (train, test) = procedural_splits(cfg)?;
    let (model, source_report) = train_source(&train, cfg.classes, &cfg.source)?;
    let cim_data = cim_training_set(&train[..cfg.cim_train_size.min(train.len())], &registry, &cfg.severities, cfg.seed)?;
    let (cim, cim_report) = train_cim_snapshot(&cim_data, &registry, &cfg.cim, cfg.reject_threshold)?;
    let stream = test_stream(&test, &cfg.corruptions, &cfg.severities, cfg.seed)?;
    let evaluation = evaluate(
        &model,
        &cim,
        &stream,
        &cfg.adapt,
        cfg.eval_batch,
        &expected_groups(&cfg.corruptions, &cfg.severities),
        cfg.ablation,
        (cfg.seed, cfg.config_hash()),
    )?;
    Ok(PipelineOutput { model, cim, evaluation, training: TrainingSummary { source: source_report, cim: cim_report } })
}

/// `kappa,corruption,z0,…,z{q-1}` per sample; κ is the true corruption id.
pub fn features_csv(cim: &CimSnapshot, samples: &[StoredSample], batch_size: usize) -> Result<String> {
    if batch_size == 0 {
        return Err(PanError::Config("batch size must be >= 1".into()));
    }
    let q = cim.prototypes.dim();
    let mut out = String::from("kappa,corruption");
    for i in 0..q {
        let _ = write!(out, ",z{i}");
    }
    out.push('\n');
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        for (s, z) in chunk.iter().zip(cim.features(&Tensor::stack(&refs)?)?) {
            let _ = write!(out, "{},{}", cim.registry.id(s.corruption)?, s.corruption);
            for v in z {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}
