//! End-to-end behavior of sectional training: freeze contracts, fixed points,
//! determinism across execution modes, and section isolation.

use sha2::{Digest, Sha256};

use dcq_core::distill::{
    capture_pair, dcq_train, train_section, LossSpec, TrainConfig, TrainMode,
};
use dcq_core::layer::Layer;
use dcq_core::network::Network;
use dcq_core::optim::OptConfig;
use dcq_core::quant::QuantConfig;
use dcq_core::rng::SplitMix64;
use dcq_core::section::{build_subnet, direct_quantization, split_network, SplitPolicy};
use dcq_core::tensor::Tensor;

fn toy_teacher() -> Network<f64> {
    Network::new(
        vec![4],
        vec![
            Layer::dense(4, 8, 21).unwrap(),
            Layer::tanh(),
            Layer::dense(8, 8, 22).unwrap(),
            Layer::relu(),
            Layer::dense(8, 3, 23).unwrap(),
            Layer::softmax(),
        ],
    )
    .unwrap()
}

fn toy_inputs(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.normal()).collect()).unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        opt: OptConfig { lr: 0.01, momentum: 0.9, cosine_decay: true },
        epochs,
        batch_size: 16,
        record_every: 10,
        max_steps: 0,
    }
}

fn weight_hash(net: &Network<f64>, layers: impl Iterator<Item = usize>) -> Vec<u8> {
    let mut hasher = Sha256::new();
    for i in layers {
        if let Some(w) = net.layer(i).weight() {
            for v in w.data() {
                hasher.update(v.to_le_bytes());
            }
            for v in net.layer(i).bias().unwrap().data() {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    hasher.finalize().to_vec()
}

#[test]
fn capture_pair_matches_dual_forward() {
    let teacher = toy_teacher();
    let plan = split_network(&teacher, &SplitPolicy::PerKLayers(1)).unwrap();
    let subnet = build_subnet(&teacher, &plan, 2, QuantConfig::binary()).unwrap();
    let x = toy_inputs(3, 7);
    let end = subnet.section_range.end - 1;
    let (a_fp, a_q) = capture_pair(&teacher, &subnet, &x, end).unwrap();

    // independent recomputation, layer by layer
    let mut fp = x.clone();
    for i in 0..=end {
        fp = teacher.layer(i).apply_batch(&fp).unwrap();
    }
    assert_eq!(a_fp, fp);
    let mut q = x.clone();
    for i in 0..=end {
        q = subnet.net.layer(i).apply_batch(&q).unwrap();
    }
    assert_eq!(a_q, q);
    // prefix is full precision, so the tensors differ only through section 2
    assert_ne!(a_fp, a_q);

    assert!(capture_pair(&teacher, &subnet, &x, end + 1).is_err());
}

#[test]
fn identity_section_means_zero_initial_loss() {
    // With no quantization the subnet reproduces the teacher exactly, the
    // initial loss is zero, and training is a fixed point.
    let teacher = toy_teacher();
    let plan = split_network(&teacher, &SplitPolicy::PerKLayers(1)).unwrap();
    let mut subnet = build_subnet(&teacher, &plan, 1, QuantConfig::binary()).unwrap();
    subnet.net.set_quant(0..subnet.net.len(), None);
    subnet.quant = QuantConfig::binary(); // metadata only; weights stay fp

    let inputs = toy_inputs(64, 3);
    let before: Vec<_> =
        subnet.net.layers().iter().filter_map(|l| l.weight().cloned()).collect();
    let (weights, records) =
        train_section(&teacher, &subnet, &inputs, LossSpec::mse(), train_cfg(2), 5).unwrap();
    assert!(records.iter().all(|r| r.loss == 0.0), "losses: {records:?}");
    for ((_, w, _), orig) in weights.params.iter().zip(&before) {
        assert_eq!(w, orig, "zero gradients must leave weights untouched");
    }
}

#[test]
fn training_reduces_section_loss() {
    let teacher = toy_teacher();
    let plan = split_network(&teacher, &SplitPolicy::PerKLayers(3)).unwrap();
    assert_eq!(plan.section_count(), 1);
    let subnet = build_subnet(&teacher, &plan, 1, QuantConfig::ternary()).unwrap();
    let inputs = toy_inputs(256, 11);

    let mut trainer = dcq_core::distill::SectionTrainer::new(
        &teacher,
        &subnet,
        &inputs,
        LossSpec::mse(),
        train_cfg(12),
        1,
    )
    .unwrap();
    let first = trainer.step().unwrap().unwrap();
    let mut last = first;
    while let Some(loss) = trainer.step().unwrap() {
        last = loss;
    }
    assert!(
        last < first * 0.8,
        "expected training to reduce the loss: first {first}, last {last}"
    );
}

#[test]
fn section_training_is_isolated() {
    let teacher = toy_teacher();
    let plan = split_network(&teacher, &SplitPolicy::PerKLayers(1)).unwrap();
    let subnet = build_subnet(&teacher, &plan, 2, QuantConfig::binary()).unwrap();
    let inputs = toy_inputs(64, 5);

    let range = subnet.section_range.clone();
    let others = (0..subnet.net.len()).filter(|i| !range.contains(i)).collect::<Vec<_>>();
    let before = weight_hash(&subnet.net, others.iter().copied());
    let teacher_hash_before = weight_hash(&teacher, 0..teacher.len());

    let (_, _) = train_section(&teacher, &subnet, &inputs, LossSpec::mse(), train_cfg(2), 9).unwrap();

    assert_eq!(weight_hash(&subnet.net, others.into_iter()), before);
    assert_eq!(weight_hash(&teacher, 0..teacher.len()), teacher_hash_before);
}

#[test]
fn parallel_and_sequential_modes_are_bit_identical() {
    let teacher = toy_teacher();
    let plan = split_network(&teacher, &SplitPolicy::PerKLayers(1)).unwrap();
    let inputs = toy_inputs(128, 13);
    let cfg = train_cfg(3);

    let (par, _) = dcq_train(
        &teacher,
        &inputs,
        &plan,
        QuantConfig::binary(),
        LossSpec::mse(),
        cfg,
        TrainMode::Parallel,
        42,
    )
    .unwrap();
    let (seq, _) = dcq_train(
        &teacher,
        &inputs,
        &plan,
        QuantConfig::binary(),
        LossSpec::mse(),
        cfg,
        TrainMode::Sequential,
        42,
    )
    .unwrap();
    for i in 0..par.len() {
        assert_eq!(par.layer(i).weight(), seq.layer(i).weight(), "layer {i}");
        assert_eq!(par.layer(i).bias(), seq.layer(i).bias(), "layer {i}");
    }

    // chained mode is a different algorithm and may legitimately differ,
    // but it must still produce a valid merged network
    let (chained, _) = dcq_train(
        &teacher,
        &inputs,
        &plan,
        QuantConfig::binary(),
        LossSpec::mse(),
        cfg,
        TrainMode::SequentialChained,
        42,
    )
    .unwrap();
    assert_eq!(chained.len(), teacher.len());
}

#[test]
fn single_section_is_whole_network_distillation() {
    let teacher = toy_teacher();
    let plan = split_network(&teacher, &SplitPolicy::PerKLayers(99)).unwrap();
    assert_eq!(plan.section_count(), 1);
    let inputs = toy_inputs(64, 17);
    let (student, records) = dcq_train(
        &teacher,
        &inputs,
        &plan,
        QuantConfig::ternary(),
        LossSpec::mse(),
        train_cfg(2),
        TrainMode::Parallel,
        7,
    )
    .unwrap();
    assert_eq!(student.len(), teacher.len());
    assert!(records.iter().all(|r| r.section == 1));
    assert!(student.layers().iter().filter(|l| l.has_params()).all(|l| l.quant.is_some()));
}

#[test]
fn split_merge_without_training_matches_direct_quantization() {
    let teacher = toy_teacher();
    let cfg = QuantConfig::binary();
    for k in 1..=3 {
        let plan = split_network(&teacher, &SplitPolicy::PerKLayers(k)).unwrap();
        let sections: Vec<_> = (1..=plan.section_count())
            .map(|i| build_subnet(&teacher, &plan, i, cfg).unwrap().section_weights())
            .collect();
        let merged = dcq_core::section::merge_sections(&sections, &plan, &teacher).unwrap();
        let direct = direct_quantization(&teacher, cfg);
        let x = toy_inputs(5, 23);
        assert_eq!(merged.forward(&x).unwrap(), direct.forward(&x).unwrap(), "k={k}");
    }
}

#[test]
fn diverging_training_reports_the_step() {
    // Quantized forwards are bounded by construction (binary scales by
    // mean|w|, k-bit tanh-normalizes), so divergence needs an unquantized
    // section that does not end in a saturating layer.
    let teacher = toy_teacher();
    let plan = split_network(&teacher, &SplitPolicy::PerKLayers(2)).unwrap();
    let mut subnet = build_subnet(&teacher, &plan, 1, QuantConfig::binary()).unwrap();
    subnet.net.set_quant(0..subnet.net.len(), None);
    // Nudge the weights off the teacher's so the initial loss is nonzero.
    for i in 0..subnet.net.len() {
        if let Some((w, _)) = subnet.net.layer_mut(i).params_mut() {
            for v in w.data_mut() {
                *v = *v * 1.25 + 0.01;
            }
        }
    }
    let inputs = toy_inputs(64, 29);
    let absurd = TrainConfig {
        opt: OptConfig { lr: 1e18, momentum: 0.9, cosine_decay: false },
        epochs: 40,
        batch_size: 16,
        record_every: 1,
        max_steps: 0,
    };
    match train_section(&teacher, &subnet, &inputs, LossSpec::mse(), absurd, 1) {
        Err(dcq_core::DcqError::Diverged { section: 1, .. }) => {}
        Err(dcq_core::DcqError::NonFinite { .. }) => {} // overflow in forward also counts
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|(w, _)| w.section_index)
        ),
    }
}
