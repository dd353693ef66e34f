//! Model registry: the MNIST LeNet and the toy conv net for the splitting
//! study, both seeded and block-tagged.

use dcq_core::error::{DcqError, Result};
use dcq_core::layer::Layer;
use dcq_core::network::Network;
use dcq_core::rng::derive_seed;

pub fn build(name: &str, seed: u64) -> Result<Network<f32>> {
    match name {
        "lenet" => lenet(seed),
        "toy_conv" => toy_conv(seed),
        _ => Err(DcqError::Config(format!(
            "unknown model '{name}'; available: lenet, toy_conv"
        ))),
    }
}

/// Input shape of a registered model.
pub fn input_shape(name: &str) -> Result<Vec<usize>> {
    Ok(build(name, 0)?.input_shape().to_vec())
}

/// LeNet-style MNIST classifier: two conv/pool blocks and two dense layers.
pub fn lenet(seed: u64) -> Result<Network<f32>> {
    let s = |i: u64| derive_seed(seed, i);
    Network::new(
        vec![1, 28, 28],
        vec![
            Layer::conv2d(1, 8, 5, 1, 0, s(0))?.with_block(0),
            Layer::relu().with_block(0),
            Layer::maxpool2d(2, 2)?.with_block(0),
            Layer::conv2d(8, 16, 5, 1, 0, s(1))?.with_block(1),
            Layer::relu().with_block(1),
            Layer::maxpool2d(2, 2)?.with_block(1),
            Layer::flatten().with_block(1),
            Layer::dense(256, 128, s(2))?.with_block(2),
            Layer::relu().with_block(2),
            Layer::dense(128, 10, s(3))?.with_block(3),
            Layer::softmax().with_block(3),
        ],
    )
}

/// Four parameterized layers on an 8x8 single-channel input, so split plans
/// with 1, 2, and 4 sections are all available.
pub fn toy_conv(seed: u64) -> Result<Network<f32>> {
    let s = |i: u64| derive_seed(seed, i);
    Network::new(
        vec![1, 8, 8],
        vec![
            Layer::conv2d(1, 4, 3, 1, 1, s(0))?.with_block(0),
            Layer::relu().with_block(0),
            Layer::conv2d(4, 6, 3, 1, 1, s(1))?.with_block(1),
            Layer::relu().with_block(1),
            Layer::maxpool2d(2, 2)?.with_block(1),
            Layer::conv2d(6, 8, 3, 1, 1, s(2))?.with_block(2),
            Layer::relu().with_block(2),
            Layer::flatten().with_block(2),
            Layer::dense(128, 4, s(3))?.with_block(3),
            Layer::softmax().with_block(3),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcq_core::section::{split_network, SplitPolicy};

    #[test]
    fn lenet_shapes_and_default_split() {
        let net = lenet(1).unwrap();
        assert_eq!(net.output_shape(), vec![10]);
        let plan = split_network(&net, &SplitPolicy::PerKLayers(2)).unwrap();
        assert_eq!(plan.section_count(), 2);
    }

    #[test]
    fn toy_conv_supports_one_two_four_sections() {
        let net = toy_conv(1).unwrap();
        for (k, expected) in [(4, 1), (2, 2), (1, 4)] {
            let plan = split_network(&net, &SplitPolicy::PerKLayers(k)).unwrap();
            assert_eq!(plan.section_count(), expected, "k={k}");
        }
    }

    #[test]
    fn unknown_model_is_rejected() {
        assert!(build("resnet50", 0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = lenet(9).unwrap();
        let b = lenet(9).unwrap();
        assert_eq!(a.layer(0).weight(), b.layer(0).weight());
        let c = lenet(10).unwrap();
        assert_ne!(a.layer(0).weight(), c.layer(0).weight());
    }
}
