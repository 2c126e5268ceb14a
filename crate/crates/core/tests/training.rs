use pan_core::cim::{train_cim, CimConfig};
use pan_core::corruption::{CorruptionKind, CorruptionRegistry, Severity};
use pan_core::data::procedural_shapes;
use pan_core::experiment::{cim_training_set, corruption_labeled};
use pan_core::nn::{train_supervised, Architecture, Model, TrainConfig};

fn cfg(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig { epochs, batch_size: 8, lr, momentum: 0.9, seed: 4 }
}

#[test]
fn zero_epochs_keep_initial_weights() {
    let data = procedural_shapes(16, 4, 1).unwrap();
    let mut model = Model::new(Architecture::source_cnn(4), 2).unwrap();
    let init = model.clone();
    let report = train_supervised(&mut model, &data, &cfg(0, 0.1)).unwrap();
    assert!(report.epoch_losses.is_empty());
    assert_eq!(model, init);
}

#[test]
fn zero_learning_rate_still_accumulates_statistics() {
    let data = procedural_shapes(16, 4, 1).unwrap();
    let mut model = Model::new(Architecture::source_cnn(4), 2).unwrap();
    let init = model.clone();
    train_supervised(&mut model, &data, &cfg(1, 0.0)).unwrap();
    let params = |m: &Model| m.params().into_iter().map(|p| p.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(params(&model), params(&init));
    assert_ne!(model.source_stats(), init.source_stats());
    let s = model.source_stats();
    assert!(s.layers.iter().all(|l| l.var.iter().all(|&v| v >= 0.0)));
}

#[test]
fn training_reduces_the_loss() {
    let data = procedural_shapes(64, 4, 3).unwrap();
    let mut model = Model::new(Architecture::source_cnn(4), 5).unwrap();
    let report = train_supervised(&mut model, &data, &cfg(4, 0.02)).unwrap();
    let (first, last) = (report.epoch_losses[0], *report.epoch_losses.last().unwrap());
    assert!(last <= first, "{:?}", report.epoch_losses);
}

#[test]
fn cim_features_move_toward_their_anchors() {
    let registry = CorruptionRegistry::new(&[CorruptionKind::GaussianNoise, CorruptionKind::Contrast, CorruptionKind::Clean]);
    let clean = procedural_shapes(90, 10, 6).unwrap();
    let samples = corruption_labeled(&cim_training_set(&clean, &registry, &[Severity::new(5).unwrap()], 6).unwrap(), &registry).unwrap();
    let cfg = CimConfig { q: 8, train: cfg(4, 0.02), ..CimConfig::default() };
    let (encoder, report) = train_cim(&samples, &registry, &cfg, 7).unwrap();
    let d = &report.epoch_anchor_distance;
    assert!(d.last().unwrap() < &d[0], "{d:?}");

    // zero epochs: the encoder is the initialization with the head removed
    let frozen = CimConfig { train: TrainConfig { epochs: 0, ..cfg.train }, ..cfg.clone() };
    let (untrained, _) = train_cim(&samples, &registry, &frozen, 7).unwrap();
    let init = Model::new(Architecture::cim_network(8, 3), 7).unwrap();
    let n = init.layers().len() - 1;
    assert_eq!(encoder.layers().len(), n);
    assert_eq!(untrained, init.truncate(n).unwrap());
}
