use std::fs;

use pan_core::checkpoint::{model_checkpoint, model_from_checkpoint, Checkpoint};
use pan_core::cim::CimSnapshot;
use pan_core::codebook::Codebook;
use pan_core::corruption::{CorruptionKind, Severity};
use pan_core::data::{load_dataset, read_cifar10_binary, save_dataset, write_cifar10_binary, DiskDataset};
use pan_core::experiment::{run_pipeline, test_stream, write_evaluation, PipelineConfig};
use pan_core::{PanError, Tensor};

const FIXTURE: &[u8] = include_bytes!("fixtures/cifar_fixture.bin");
const FIXTURE_LABELS: [usize; 4] = [0, 3, 7, 9];

fn fixture_byte(record: usize, i: usize) -> u8 {
    ((17 * record + 31 * i + 5) % 256) as u8
}

fn tiny_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(seed);
    cfg.classes = 3;
    cfg.train_size = 60;
    cfg.test_size = 9;
    cfg.cim_train_size = 45;
    cfg.corruptions = vec![CorruptionKind::GaussianNoise, CorruptionKind::Fog];
    cfg.severities = vec![Severity::new(4).unwrap()];
    cfg.source.epochs = 1;
    cfg.cim.train.epochs = 1;
    cfg.adapt.batch_size = 8;
    cfg.eval_batch = 8;
    cfg
}

#[test]
fn cifar_fixture_parses_bit_exactly() {
    let images = read_cifar10_binary(FIXTURE).unwrap();
    assert_eq!(images.len(), 4);
    for (r, item) in images.iter().enumerate() {
        assert_eq!(item.label, FIXTURE_LABELS[r]);
        assert_eq!(item.image.shape(), &[3, 32, 32]);
        for (i, &v) in item.image.data().iter().enumerate() {
            assert_eq!(v, f64::from(fixture_byte(r, i)) / 255.0, "record {r} byte {i}");
        }
        // planes are R, G, B, each row-major
        assert_eq!(item.image.data()[1024 + 32 + 2], f64::from(fixture_byte(r, 1024 + 34)) / 255.0);
    }
    assert_eq!(write_cifar10_binary(&images).unwrap(), FIXTURE);
}

#[test]
fn cifar_rejects_bad_records() {
    assert!(matches!(read_cifar10_binary(&FIXTURE[..FIXTURE.len() - 1]), Err(PanError::Format(_))));
    let mut bad = FIXTURE.to_vec();
    bad[3073] = 10;
    let err = read_cifar10_binary(&bad).unwrap_err();
    assert!(err.to_string().contains("record 1"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn dataset_directory_roundtrip() {
    let clean = read_cifar10_binary(FIXTURE).unwrap();
    let samples = test_stream(&clean, &[CorruptionKind::ShotNoise], &[Severity::new(2).unwrap()], 3).unwrap();
    let ds = DiskDataset::from_samples(samples, 10, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.header, ds.header);
    for (a, b) in back.samples.iter().zip(&ds.samples) {
        assert_eq!((a.label, a.corruption, a.severity), (b.label, b.corruption, b.severity));
        // pixels are stored as f32
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| *x == f64::from(*y as f32)));
    }
    // a second trip is lossless
    let dir2 = tempfile::tempdir().unwrap();
    save_dataset(dir2.path(), &back).unwrap();
    assert_eq!(load_dataset(dir2.path()).unwrap(), back);
    assert!(matches!(load_dataset(&dir.path().join("missing")), Err(PanError::Format(_) | PanError::Io(_))));
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let a = run_pipeline(&tiny_config(5)).unwrap();
    let b = run_pipeline(&tiny_config(5)).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_evaluation(da.path(), &a.evaluation).unwrap();
    write_evaluation(db.path(), &b.evaluation).unwrap();
    let mut names: Vec<String> = fs::read_dir(da.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert!(names.contains(&"report.json".to_string()) && names.contains(&"eval.csv".to_string()));
    for name in &names {
        assert_eq!(fs::read(da.path().join(name)).unwrap(), fs::read(db.path().join(name)).unwrap(), "{name} differs");
    }
    assert_eq!(model_checkpoint(&a.model).unwrap().encode(), model_checkpoint(&b.model).unwrap().encode());
    assert_eq!(a.cim.to_checkpoint().unwrap().encode(), b.cim.to_checkpoint().unwrap().encode());

    let c = run_pipeline(&tiny_config(6)).unwrap();
    assert_ne!(c.evaluation.report.run.config_hash, a.evaluation.report.run.config_hash);
    assert_ne!(model_checkpoint(&c.model).unwrap().encode(), model_checkpoint(&a.model).unwrap().encode());

    // checkpoints of every trained artefact survive a trip through disk
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model_checkpoint(&a.model).unwrap().save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"PANCKPT1");
    let model = model_from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(model, a.model);
    assert_eq!(model_checkpoint(&model).unwrap().encode(), bytes);

    let cim = CimSnapshot::from_checkpoint(&Checkpoint::decode(&a.cim.to_checkpoint().unwrap().encode()).unwrap()).unwrap();
    assert_eq!(cim, a.cim);

    let cb = &a.evaluation.codebook;
    let back = Codebook::from_checkpoint(&Checkpoint::decode(&cb.to_checkpoint().unwrap().encode()).unwrap()).unwrap();
    assert_eq!(&back, cb);
    assert!(cb.update_counts().iter().sum::<u64>() > 0);
}

#[test]
fn checkpoint_kinds_are_not_interchangeable() {
    let cb = Codebook::new(pan_core::nn::BnStatsSet::new(vec![pan_core::nn::BnLayerStats::identity(2, 1e-5)]), 2).unwrap();
    let ckpt = cb.to_checkpoint().unwrap();
    assert!(matches!(CimSnapshot::from_checkpoint(&ckpt), Err(PanError::Format(_))));
    assert!(model_from_checkpoint(&ckpt).is_err());
    let mut trimmed = Checkpoint::new(&serde_json::json!({"kind": "x"})).unwrap();
    trimmed.push("a", Tensor::zeros(&[2]));
    assert!(matches!(trimmed.get("b"), Err(PanError::Format(_))));
}
