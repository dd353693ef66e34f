//! Property tests for the quantizer and split-plan invariants.

use proptest::prelude::*;

use dcq_core::layer::Layer;
use dcq_core::network::Network;
use dcq_core::quant::{quantize_binary, quantize_kbit, quantize_ternary};
use dcq_core::section::{split_network, SplitPolicy};
use dcq_core::tensor::Tensor;

fn weight_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..64)
}

fn distinct_bits(values: &[f64]) -> usize {
    let mut bits: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
    bits.sort_unstable();
    bits.dedup();
    bits.len()
}

proptest! {
    #[test]
    fn binary_has_at_most_two_values_and_symmetric_magnitudes(w in weight_vec()) {
        let q = quantize_binary(&Tensor::vector(&w)).unwrap();
        prop_assert!(distinct_bits(q.data()) <= 2);
        let mags: Vec<f64> = q.data().iter().map(|v| v.abs()).collect();
        let first = mags[0];
        prop_assert!(mags.iter().all(|&m| m == first));
    }

    #[test]
    fn ternary_has_at_most_three_values(w in weight_vec(), factor in 0.05f64..0.95) {
        let q = quantize_ternary(&Tensor::vector(&w), factor).unwrap();
        prop_assert!(distinct_bits(q.data()) <= 3);
    }

    #[test]
    fn kbit_level_budget(w in weight_vec(), k in 1u32..6) {
        let q = quantize_kbit(&Tensor::vector(&w), k).unwrap();
        prop_assert!(distinct_bits(q.data()) <= 1 << k);
        prop_assert!(q.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn binary_scale_equivariance(w in weight_vec(), c in 0.01f64..100.0) {
        let scaled = Tensor::vector(&w.iter().map(|&x| x * c).collect::<Vec<_>>());
        let lhs = quantize_binary(&scaled).unwrap();
        let rhs = quantize_binary(&Tensor::vector(&w)).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b * c).abs() <= 1e-9 * c.max(1.0));
        }
    }

    #[test]
    fn binary_and_ternary_idempotence(w in weight_vec()) {
        let b = quantize_binary(&Tensor::vector(&w)).unwrap();
        prop_assert_eq!(quantize_binary(&b).unwrap(), b);
        let t = quantize_ternary(&Tensor::vector(&w), 0.7).unwrap();
        prop_assert_eq!(quantize_ternary(&t, 0.7).unwrap(), t);
    }

    #[test]
    fn split_plans_cover_each_layer_exactly_once(
        widths in prop::collection::vec(2usize..6, 2..7),
        k in 1usize..5,
    ) {
        let mut layers = Vec::new();
        let mut in_dim = 3usize;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Layer::<f64>::dense(in_dim, w, i as u64).unwrap());
            if i % 2 == 0 {
                layers.push(Layer::relu());
            }
            in_dim = w;
        }
        let net = Network::new(vec![3], layers).unwrap();
        let plan = split_network(&net, &SplitPolicy::PerKLayers(k)).unwrap();
        let mut covered = vec![0usize; net.len()];
        for i in 1..=plan.section_count() {
            for idx in plan.section_range(i).unwrap() {
                covered[idx] += 1;
            }
        }
        prop_assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn histogram_conserves_mass(w in weight_vec(), bins in 2usize..40) {
        let hist = dcq_core::analysis::weight_histogram(&Tensor::vector(&w), None, bins).unwrap();
        prop_assert_eq!(hist.counts.iter().sum::<usize>(), w.len());
    }
}
