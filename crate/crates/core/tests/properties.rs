//! Property tests over randomized inputs.

use pan_core::checkpoint::Checkpoint;
use pan_core::cim::{argmin, predict_from_distances, softmin};
use pan_core::codebook::{ema_update, Codebook, LayerSelection};
use pan_core::config::KvConfig;
use pan_core::corruption::{corrupt, CorruptionKind, Severity};
use pan_core::data::decode_dataset;
use pan_core::nn::{BatchStats, BnLayerStats, BnStatsSet};
use pan_core::rng::Rng;
use pan_core::Tensor;
use proptest::prelude::*;

fn distances() -> impl Strategy<Value = Vec<f64>> {
    (2usize..=16).prop_flat_map(|k| prop::collection::vec(0.0f64..50.0, k))
}

fn has_unique_min(d: &[f64]) -> bool {
    let m = d.iter().copied().fold(f64::INFINITY, f64::min);
    d.iter().filter(|&&v| v == m).count() == 1
}

fn stats_set(layout: &[usize], rng: &mut Rng) -> BnStatsSet {
    BnStatsSet::new(
        layout
            .iter()
            .map(|&c| BnLayerStats {
                mu: (0..c).map(|_| rng.normal()).collect(),
                var: (0..c).map(|_| 0.1 + rng.uniform()).collect(),
                gamma: (0..c).map(|_| rng.normal()).collect(),
                beta: (0..c).map(|_| rng.normal()).collect(),
                eps: 1e-5,
            })
            .collect(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn scores_keep_the_nearest_prototype(d in distances()) {
        prop_assume!(has_unique_min(&d));
        prop_assert_eq!(predict_from_distances(d.clone()).kappa, argmin(&d));
    }

    #[test]
    fn softmin_is_a_distribution(d in distances(), shift in -100.0f64..100.0) {
        let s = softmin(&d);
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = d.iter().map(|v| v + shift).collect();
        for (a, b) in s.iter().zip(softmin(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        // nearer prototypes never get less weight
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d[i] < d[j] {
                    prop_assert!(s[i] >= s[j]);
                }
            }
        }
    }

    #[test]
    fn scores_are_permutation_equivariant(d in distances(), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..d.len()).collect();
        Rng::new(seed).shuffle(&mut perm);
        let permuted: Vec<f64> = perm.iter().map(|&i| d[i]).collect();
        let a = predict_from_distances(d.clone());
        let b = predict_from_distances(permuted);
        for (pos, &i) in perm.iter().enumerate() {
            prop_assert!((b.scores[pos] - a.scores[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn tta_update_touches_only_its_entry(
        k in 1usize..6,
        layout in prop::collection::vec(1usize..5, 1..4),
        seed in any::<u64>(),
        m in 0.001f64..=1.0,
        pick in any::<prop::sample::Index>(),
    ) {
        let mut rng = Rng::new(seed);
        let source = stats_set(&layout, &mut rng);
        let mut cb = Codebook::new(source.clone(), k).unwrap();
        let kappa = pick.index(k);
        let batch: Vec<Option<BatchStats>> = layout
            .iter()
            .map(|&c| (rng.uniform() < 0.7).then(|| BatchStats {
                mu: (0..c).map(|_| 3.0 * rng.normal()).collect(),
                var: (0..c).map(|_| 5.0 * rng.uniform()).collect(),
            }))
            .collect();
        let before = cb.clone();
        cb.tta_update(kappa, &batch, m).unwrap();
        for i in 0..k {
            let (old, new) = (before.lookup(i).unwrap(), cb.lookup(i).unwrap());
            if i != kappa {
                prop_assert_eq!(old, new);
                continue;
            }
            for (l, (o, n)) in old.layers.iter().zip(&new.layers).enumerate() {
                prop_assert_eq!(&o.gamma, &n.gamma);
                prop_assert_eq!(&o.beta, &n.beta);
                prop_assert!(n.var.iter().all(|&v| v >= 0.0));
                match &batch[l] {
                    None => prop_assert_eq!(o, n),
                    Some(bs) => {
                        for c in 0..o.channels() {
                            let lo = o.mu[c].min(bs.mu[c]) - 1e-12;
                            let hi = o.mu[c].max(bs.mu[c]) + 1e-12;
                            prop_assert!(lo <= n.mu[c] && n.mu[c] <= hi);
                            let e = (1.0 - m) * o.var[c] + m * bs.var[c];
                            prop_assert_eq!(n.var[c], e);
                        }
                    }
                }
            }
        }
        prop_assert_eq!(cb.source(), &source);
    }

    #[test]
    fn ema_with_full_momentum_copies_the_batch(layout in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut entry = stats_set(&layout, &mut rng);
        let batch: Vec<Option<BatchStats>> = layout
            .iter()
            .map(|&c| Some(BatchStats { mu: (0..c).map(|_| rng.normal()).collect(), var: (0..c).map(|_| rng.uniform()).collect() }))
            .collect();
        ema_update(&mut entry, &batch, 1.0).unwrap();
        for (l, b) in entry.layers.iter().zip(&batch) {
            let b = b.as_ref().unwrap();
            prop_assert_eq!(&l.mu, &b.mu);
            prop_assert_eq!(&l.var, &b.var);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact(
        tensors in prop::collection::vec(
            ("[a-z.0-9]{1,12}", prop::collection::vec(1usize..4, 1..4), any::<u64>()),
            0..6,
        ),
        note in ".{0,20}",
    ) {
        let mut ckpt = Checkpoint::new(&serde_json::json!({ "note": note })).unwrap();
        for (name, shape, seed) in &tensors {
            let mut rng = Rng::new(*seed);
            // arbitrary bit patterns, including NaN payloads and subnormals
            let t = Tensor::from_fn(shape, |_| f64::from_bits(rng.next_u64()));
            ckpt.push(name.clone(), t);
        }
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.metadata_json(), ckpt.metadata_json());
        prop_assert_eq!(back.tensors().len(), ckpt.tensors().len());
        for ((na, a), (nb, b)) in ckpt.tensors().iter().zip(back.tensors()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        prop_assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn decoders_reject_garbage_without_panicking(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = Checkpoint::decode(&bytes);
        let mut prefixed = b"PANCKPT1".to_vec();
        prefixed.extend(&bytes);
        let _ = Checkpoint::decode(&prefixed);
        let _ = decode_dataset(&bytes, &bytes);
        let _ = KvConfig::parse(&String::from_utf8_lossy(&bytes));
    }

    #[test]
    fn config_canonical_roundtrip(pairs in prop::collection::btree_map("[a-z][a-z_.]{0,10}", "[A-Za-z0-9_.:,-]{1,10}", 0..8)) {
        let mut kv = KvConfig::default();
        for (k, v) in &pairs {
            kv.set(k, v);
        }
        let back = KvConfig::parse(&kv.canonical()).unwrap();
        prop_assert_eq!(back.canonical(), kv.canonical());
        for (k, v) in &pairs {
            prop_assert_eq!(back.raw(k), Some(v.as_str()));
        }
    }

    #[test]
    fn layer_selection_text_roundtrip(a in 0usize..20, b in 0usize..20, which in 0u8..4) {
        let sel = match which {
            0 => LayerSelection::All,
            1 => LayerSelection::FromFirst(a),
            2 => LayerSelection::FromLast(a),
            _ => LayerSelection::Range(a.min(b), a.max(b)),
        };
        prop_assert_eq!(sel.to_string().parse::<LayerSelection>().unwrap(), sel);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn corruptions_stay_in_range(seed in any::<u64>(), level in 1u8..=5) {
        let mut rng = Rng::new(seed);
        let img = Tensor::from_fn(&[3, 32, 32], |_| rng.uniform());
        for kind in CorruptionKind::ALL {
            let out = corrupt(&img, kind, Severity::new(level).unwrap(), &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "{} out of range", kind);
        }
    }
}
