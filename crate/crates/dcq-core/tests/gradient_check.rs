//! Finite-difference verification of every layer kind and loss, plus the
//! freeze and determinism contracts of the engine.

use dcq_core::distill::LossSpec;
use dcq_core::gradcheck::{
    check_kind_instances, check_loss_instances, check_network_gradients, random_tensor,
};
use dcq_core::layer::{Layer, LayerKind};
use dcq_core::network::Network;
use dcq_core::rng::SplitMix64;
use dcq_core::tensor::Tensor;

const KINDS: [LayerKind; 7] = [
    LayerKind::Dense,
    LayerKind::Conv2d,
    LayerKind::Relu,
    LayerKind::Tanh,
    LayerKind::MaxPool2d,
    LayerKind::Flatten,
    LayerKind::Softmax,
];

#[test]
fn every_layer_kind_matches_finite_differences() {
    for kind in KINDS {
        let report = check_kind_instances(kind, 25, 0x9_0000 + kind as u64).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "{kind:?}: max rel err {} over {} entries",
            report.max_rel_err,
            report.entries_checked
        );
    }
}

#[test]
fn every_loss_matches_finite_differences() {
    for spec in [LossSpec::mse(), LossSpec::mae(), LossSpec::huber(0.5)] {
        let report = check_loss_instances(spec, 50, 0xA11CE).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "{spec:?}: max rel err {}",
            report.max_rel_err
        );
    }
}

#[test]
fn random_three_layer_net_gradients() {
    let mut rng = SplitMix64::new(33);
    let mut net = Network::new(
        vec![4],
        vec![
            Layer::dense(4, 6, 1).unwrap(),
            Layer::tanh(),
            Layer::dense(6, 5, 2).unwrap(),
            Layer::relu(),
            Layer::dense(5, 3, 3).unwrap(),
        ],
    )
    .unwrap();
    let x = random_tensor(&[3, 4], &mut rng);
    let target = random_tensor(&[3, 3], &mut rng);
    let report = check_network_gradients(&mut net, &x, &target, LossSpec::mse(), 1e-5).unwrap();
    assert!(report.entries_checked > 50);
    assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
}

#[test]
fn quantized_layer_gradients_follow_ste() {
    // Analytic gradient of a binary-quantized dense layer equals the
    // full-precision gradient of the same loss evaluated at the quantized
    // weights, masked where |latent| > 1.
    let mut net = Network::new(vec![3], vec![Layer::dense(3, 2, 5).unwrap()]).unwrap();
    net.layer_mut(0)
        .set_params(
            Tensor::new(vec![2, 3], vec![0.4, -1.7, 0.2, 0.9, -0.1, 1.3]).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap();
    net.layer_mut(0).quant = Some(dcq_core::QuantConfig::binary());

    let x = Tensor::new(vec![1, 3], vec![0.3, 0.5, -0.8]).unwrap();
    let target = Tensor::new(vec![1, 2], vec![0.1, -0.2]).unwrap();
    let trace = net.forward_trace(&x).unwrap();
    let (_, g) = dcq_core::distill::regression_loss(
        LossSpec::mse(),
        &target,
        trace.activations.last().unwrap(),
    )
    .unwrap();
    let grads = net.backward(&trace, &g).unwrap();
    let dw = &grads.get(&0).unwrap().0;

    // reference: same net with the quantized weights as plain weights
    let wq = net.layer(0).effective_weight().unwrap().unwrap();
    let mut plain = Network::new(vec![3], vec![Layer::dense(3, 2, 5).unwrap()]).unwrap();
    plain.layer_mut(0).set_params(wq, Tensor::zeros(&[2])).unwrap();
    let trace_p = plain.forward_trace(&x).unwrap();
    let (_, gp) = dcq_core::distill::regression_loss(
        LossSpec::mse(),
        &target,
        trace_p.activations.last().unwrap(),
    )
    .unwrap();
    let plain_grads = plain.backward(&trace_p, &gp).unwrap();
    let dw_plain = &plain_grads.get(&0).unwrap().0;

    let latent = [0.4f64, -1.7, 0.2, 0.9, -0.1, 1.3];
    for k in 0..6 {
        let expected: f64 = if latent[k].abs() > 1.0 { 0.0 } else { dw_plain.data()[k] };
        assert!(
            (dw.data()[k] - expected).abs() < 1e-12,
            "entry {k}: {} vs {}",
            dw.data()[k],
            expected
        );
    }
}

#[test]
fn training_leaves_frozen_parameters_bit_identical() {
    let mut net = Network::new(
        vec![4],
        vec![Layer::dense(4, 4, 7).unwrap(), Layer::relu(), Layer::dense(4, 2, 8).unwrap()],
    )
    .unwrap();
    net.set_frozen(0..1, true);
    let before = net.layer(0).weight().unwrap().clone();

    let mut rng = SplitMix64::new(1);
    let mut opt = dcq_core::optim::SgdMomentum::new(
        dcq_core::optim::OptConfig { lr: 0.05, momentum: 0.9, cosine_decay: false },
        100,
    );
    for _ in 0..50 {
        let x = random_tensor(&[4, 4], &mut rng);
        let target = random_tensor(&[4, 2], &mut rng);
        let trace = net.forward_trace(&x).unwrap();
        let (_, g) = dcq_core::distill::regression_loss(
            LossSpec::mse(),
            &target,
            trace.activations.last().unwrap(),
        )
        .unwrap();
        let grads = net.backward(&trace, &g).unwrap();
        opt.apply(&mut net, &grads).unwrap();
    }
    assert_eq!(net.layer(0).weight().unwrap(), &before);
    assert_ne!(net.layer(2).weight().unwrap().data()[0], 0.0);
}
