//! Central finite-difference checks of every layer's backward pass and of
//! both losses, on small random instances.

use pan_core::cim::{cac_batch, cac_loss, AnchorSet};
use pan_core::gradcheck::grad_check;
use pan_core::nn::{softmax_cross_entropy, Architecture, BnMode, LayerSpec, Model};
use pan_core::rng::Rng;
use pan_core::Tensor;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn arch(input: [usize; 3], layers: Vec<LayerSpec>) -> Architecture {
    let mut a = Architecture::source_cnn(2);
    a.name = "probe".into();
    a.input = input.to_vec();
    a.layers = layers;
    a
}

/// Max relative error over all parameters and the input, for the loss
/// `Σ w ⊙ output` with a fixed random probe `w`.
fn check_model(arch: Architecture, batch: usize, mode: BnMode, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut model = Model::new(arch.clone(), seed).unwrap();
    // move BN away from the identity so stored-mode checks are not trivial
    let mut stats = model.source_stats();
    for l in &mut stats.layers {
        l.mu.iter_mut().for_each(|m| *m = 0.3 * rng.normal());
        l.var.iter_mut().for_each(|v| *v = 0.5 + rng.uniform());
        l.gamma.iter_mut().for_each(|g| *g = 1.0 + 0.5 * rng.normal());
        l.beta.iter_mut().for_each(|b| *b = 0.5 * rng.normal());
    }
    model.set_source_stats(&stats).unwrap();

    let x = random(&[&[batch][..], &arch.input].concat(), &mut rng);
    let out_len = model.forward_uniform(&x, &model.source_stats(), mode, false).unwrap().output.len();
    let probe: Vec<f64> = (0..out_len).map(|_| rng.normal()).collect();

    let mut params: Vec<Tensor> = model.params().into_iter().cloned().collect();
    params.push(x);
    grad_check(
        |p| {
            let (weights, input) = p.split_at(p.len() - 1);
            let mut m = model.clone();
            m.set_params(weights)?;
            m.zero_grad();
            let pass = m.forward_uniform(&input[0], &m.source_stats(), mode, true)?;
            let loss: f64 = pass.output.data().iter().zip(&probe).map(|(o, w)| o * w).sum();
            let g = Tensor::new(pass.output.shape().to_vec(), probe.clone())?;
            let gx = m.backward(&pass, &g)?;
            let mut grads = m.param_grads();
            grads.push(gx.into_data());
            Ok((loss, grads))
        },
        &params,
        EPS,
    )
    .unwrap()
}

fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv { out_channels, kernel, stride, pad }
}

#[test]
fn conv_layer() {
    for (i, c) in [conv(3, 3, 1, 1), conv(2, 3, 2, 0), conv(4, 1, 1, 0), conv(2, 2, 2, 1)].into_iter().enumerate() {
        let err = check_model(arch([2, 5, 5], vec![c.clone(), LayerSpec::Flatten]), 2, BnMode::UseStored, 10 + i as u64);
        assert!(err <= TOL, "{c:?}: {err}");
    }
}

#[test]
fn batch_norm_use_batch() {
    let err = check_model(arch([3, 4, 4], vec![conv(3, 3, 1, 1), LayerSpec::BatchNorm, LayerSpec::Flatten]), 3, BnMode::UseBatch, 20);
    assert!(err <= TOL, "{err}");
    // BN on a flat B×D input
    let err = check_model(
        arch([2, 2, 2], vec![LayerSpec::Flatten, LayerSpec::Linear { out_features: 5 }, LayerSpec::BatchNorm]),
        4,
        BnMode::UseBatch,
        21,
    );
    assert!(err <= TOL, "{err}");
}

#[test]
fn batch_norm_use_stored() {
    let err = check_model(arch([3, 4, 4], vec![conv(3, 3, 1, 1), LayerSpec::BatchNorm, LayerSpec::Flatten]), 2, BnMode::UseStored, 30);
    assert!(err <= TOL, "{err}");
}

#[test]
fn relu_and_pools() {
    for (i, layer) in [LayerSpec::Relu, LayerSpec::MaxPool { size: 2 }, LayerSpec::AvgPool { size: 2 }].into_iter().enumerate() {
        let err = check_model(arch([2, 4, 4], vec![conv(2, 3, 1, 1), layer.clone(), LayerSpec::Flatten]), 2, BnMode::UseStored, 40 + i as u64);
        assert!(err <= TOL, "{layer:?}: {err}");
    }
}

#[test]
fn linear_layer() {
    let err = check_model(
        arch([2, 3, 3], vec![LayerSpec::Flatten, LayerSpec::Linear { out_features: 4 }, LayerSpec::Linear { out_features: 3 }]),
        3,
        BnMode::UseStored,
        50,
    );
    assert!(err <= TOL, "{err}");
}

#[test]
fn full_block_stack() {
    let layers = vec![
        conv(4, 3, 1, 1),
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        conv(4, 3, 1, 1),
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Linear { out_features: 3 },
    ];
    for mode in [BnMode::UseBatch, BnMode::UseStored] {
        let err = check_model(arch([2, 8, 8], layers.clone()), 3, mode, 60);
        assert!(err <= TOL, "{mode:?}: {err}");
    }
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = Rng::new(70);
    let labels = [0usize, 3, 2, 3];
    let logits = random(&[4, 5], &mut rng);
    let err = grad_check(
        |p| {
            let out = softmax_cross_entropy(&p[0], &labels)?;
            Ok((out.loss, vec![out.grad.into_data()]))
        },
        &[logits],
        EPS,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn cac_loss_gradient() {
    let mut rng = Rng::new(80);
    for trial in 0..30 {
        let k = 2 + rng.below(8);
        let dim = k + rng.below(4);
        let alpha = 0.5 + 10.0 * rng.uniform();
        let lambda = [0.0, 0.1, 1.0, 3.0][trial % 4];
        let anchors = AnchorSet::scaled_basis(k, dim, alpha).unwrap();
        let y = rng.below(k);
        let z = Tensor::from_fn(&[dim], |_| alpha * rng.normal());
        let err = grad_check(
            |p| {
                let l = cac_loss(p[0].data(), y, &anchors, lambda)?;
                Ok((l.loss, vec![l.grad]))
            },
            &[z],
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "k={k} dim={dim} lambda={lambda}: {err}");
    }
}

#[test]
fn cac_batch_gradient() {
    let mut rng = Rng::new(90);
    let anchors = AnchorSet::scaled_basis(4, 4, 10.0).unwrap();
    let labels = [0usize, 1, 3, 3, 2];
    let out = random(&[5, 4], &mut rng);
    let err = grad_check(
        |p| {
            let l = cac_batch(&p[0], &labels, &anchors, 0.1)?;
            Ok((l.loss, vec![l.grad.into_data()]))
        },
        &[out],
        EPS,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}
