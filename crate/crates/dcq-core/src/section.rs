//! Splitting a network into contiguous sections, building per-section
//! training subnets with frozen prefixes, and merging trained sections back
//! into one quantized network.
//!
//! Section indices are 1-based (`1..=m`) throughout, matching the training
//! procedure's numbering.

use serde::{Deserialize, Serialize};

use crate::error::{DcqError, Result};
use crate::network::Network;
use crate::quant::QuantConfig;
use crate::tensor::{Element, Tensor};

/// Contiguous, disjoint `[start, end)` layer ranges covering the whole net.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    boundaries: Vec<(usize, usize)>,
}

impl SplitPlan {
    pub fn section_count(&self) -> usize {
        self.boundaries.len()
    }

    /// Layer range of 1-based section `i`.
    pub fn section_range(&self, i: usize) -> Result<std::ops::Range<usize>> {
        if i == 0 || i > self.section_count() {
            return Err(DcqError::Config(format!(
                "section index {i} out of range 1..={}",
                self.section_count()
            )));
        }
        let (start, end) = self.boundaries[i - 1];
        Ok(start..end)
    }

    pub fn boundaries(&self) -> &[(usize, usize)] {
        &self.boundaries
    }

    fn validate(boundaries: Vec<(usize, usize)>, layer_count: usize) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(DcqError::Config("split plan needs at least one section".into()));
        }
        let mut expected_start = 0usize;
        for &(start, end) in &boundaries {
            if start != expected_start {
                return Err(DcqError::Config(format!(
                    "split plan leaves layer {expected_start} uncovered (next section starts at {start})"
                )));
            }
            if end <= start {
                return Err(DcqError::Config(format!("empty section [{start}, {end})")));
            }
            expected_start = end;
        }
        if expected_start != layer_count {
            return Err(DcqError::Config(format!(
                "split plan covers {expected_start} layers, network has {layer_count}"
            )));
        }
        Ok(Self { boundaries })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// `k` parameterized layers per section; trailing parameterless layers
    /// (activations, pooling, flatten, softmax) attach to the section of the
    /// parameterized layer they follow.
    PerKLayers(usize),
    /// One section per block tag.
    PerBlock,
    Explicit(Vec<(usize, usize)>),
}

pub fn split_network<T: Element>(net: &Network<T>, policy: &SplitPolicy) -> Result<SplitPlan> {
    let n = net.len();
    match policy {
        SplitPolicy::PerKLayers(k) => {
            if *k == 0 {
                return Err(DcqError::Config("per_k_layers requires k >= 1".into()));
            }
            let params = net.param_layer_indices();
            if params.len() <= *k {
                return SplitPlan::validate(vec![(0, n)], n);
            }
            // A section starts at the (j*k)-th parameterized layer; everything
            // before the next section's first parameterized layer belongs to it.
            let mut boundaries = Vec::new();
            let mut start = 0usize;
            let mut next_param = *k;
            while next_param < params.len() {
                boundaries.push((start, params[next_param]));
                start = params[next_param];
                next_param += k;
            }
            boundaries.push((start, n));
            SplitPlan::validate(boundaries, n)
        }
        SplitPolicy::PerBlock => {
            let mut boundaries: Vec<(usize, usize)> = Vec::new();
            let mut current_block: Option<usize> = None;
            for (i, layer) in net.layers().iter().enumerate() {
                match (layer.block, current_block) {
                    (Some(b), Some(cur)) if b != cur => {
                        let start = boundaries.last().map(|&(_, e)| e).unwrap_or(0);
                        boundaries.push((start, i));
                        current_block = Some(b);
                    }
                    (Some(b), None) => current_block = Some(b),
                    // Untagged layers stay with the running section.
                    _ => {}
                }
            }
            if current_block.is_none() {
                return Err(DcqError::Config("per_block split on a network with no block tags".into()));
            }
            let start = boundaries.last().map(|&(_, e)| e).unwrap_or(0);
            boundaries.push((start, n));
            SplitPlan::validate(boundaries, n)
        }
        SplitPolicy::Explicit(b) => SplitPlan::validate(b.clone(), n),
    }
}

/// Training unit for section `i`: teacher layers `0..end_i` with the prefix
/// frozen at full precision and section `i` quantized and trainable.
#[derive(Debug, Clone)]
pub struct Subnet<T> {
    pub section_index: usize,
    pub section_range: std::ops::Range<usize>,
    pub quant: QuantConfig,
    pub net: Network<T>,
}

pub fn build_subnet<T: Element>(
    teacher: &Network<T>,
    plan: &SplitPlan,
    i: usize,
    quant: QuantConfig,
) -> Result<Subnet<T>> {
    quant.validate()?;
    let range = plan.section_range(i)?;
    let layers = teacher.layers()[..range.end].to_vec();
    let mut net = Network::new(teacher.input_shape().to_vec(), layers)?;
    net.set_frozen(0..range.end, true);
    net.set_frozen(range.clone(), false);
    net.set_quant(0..range.start, None);
    net.set_quant(range.clone(), Some(quant));
    Ok(Subnet { section_index: i, section_range: range, quant, net })
}

/// Chained variant: the prefix uses the already-trained *quantized* sections
/// instead of the full-precision teacher. `trained_prefix` must hold sections
/// `1..i` in order.
pub fn build_subnet_chained<T: Element>(
    teacher: &Network<T>,
    plan: &SplitPlan,
    i: usize,
    quant: QuantConfig,
    trained_prefix: &[SectionWeights<T>],
) -> Result<Subnet<T>> {
    if trained_prefix.len() + 1 != i {
        return Err(DcqError::Config(format!(
            "chained subnet {i} needs {} trained prefix sections, got {}",
            i - 1,
            trained_prefix.len()
        )));
    }
    let mut subnet = build_subnet(teacher, plan, i, quant)?;
    for section in trained_prefix {
        let range = plan.section_range(section.section_index)?;
        apply_section_weights(&mut subnet.net, section)?;
        // Prefix sections evaluate quantized, like the merged network will.
        subnet.net.set_quant(range, Some(section.quant));
    }
    Ok(subnet)
}

/// Latent weights of one trained section, keyed by teacher layer index.
#[derive(Debug, Clone)]
pub struct SectionWeights<T> {
    pub section_index: usize,
    pub quant: QuantConfig,
    pub params: Vec<(usize, Tensor<T>, Tensor<T>)>,
}

impl<T: Element> Subnet<T> {
    /// Extracts the (latent) parameters of the trainable section.
    pub fn section_weights(&self) -> SectionWeights<T> {
        let params = self
            .section_range
            .clone()
            .filter(|&i| self.net.layer(i).has_params())
            .map(|i| {
                let l = self.net.layer(i);
                (i, l.weight().unwrap().clone(), l.bias().unwrap().clone())
            })
            .collect();
        SectionWeights { section_index: self.section_index, quant: self.quant, params }
    }
}

fn apply_section_weights<T: Element>(
    net: &mut Network<T>,
    section: &SectionWeights<T>,
) -> Result<()> {
    for (idx, w, b) in &section.params {
        if *idx >= net.len() {
            return Err(DcqError::Config(format!("section weight for missing layer {idx}")));
        }
        net.layer_mut(*idx).set_params(w.clone(), b.clone())?;
    }
    Ok(())
}

/// MERGE phase: teacher topology, trained latent weights per section, every
/// parameterized layer carrying its section's quant config.
pub fn merge_sections<T: Element>(
    trained: &[SectionWeights<T>],
    plan: &SplitPlan,
    teacher: &Network<T>,
) -> Result<Network<T>> {
    let m = plan.section_count();
    if trained.len() != m {
        return Err(DcqError::Config(format!(
            "merge needs {m} sections, got {}",
            trained.len()
        )));
    }
    let mut merged = teacher.clone();
    let mut seen = vec![false; m + 1];
    for section in trained {
        let i = section.section_index;
        let range = plan.section_range(i)?;
        if seen[i] {
            return Err(DcqError::Config(format!("duplicate section {i} in merge")));
        }
        seen[i] = true;
        let expected: Vec<usize> = range
            .clone()
            .filter(|&idx| teacher.layer(idx).has_params())
            .collect();
        let provided: Vec<usize> = section.params.iter().map(|(idx, _, _)| *idx).collect();
        if expected != provided {
            return Err(DcqError::Config(format!(
                "section {i} weights cover layers {provided:?}, expected {expected:?}"
            )));
        }
        apply_section_weights(&mut merged, section)?;
        merged.set_quant(range, Some(section.quant));
    }
    merged.set_frozen(0..merged.len(), false);
    Ok(merged)
}

/// Direct quantization: the quantizer applied to pretrained weights with no
/// retraining.
pub fn direct_quantization<T: Element>(teacher: &Network<T>, cfg: QuantConfig) -> Network<T> {
    let mut q = teacher.clone();
    q.set_quant(0..q.len(), Some(cfg));
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Layer;

    fn dense_chain(n: usize) -> Network<f64> {
        let layers = (0..n).map(|i| Layer::dense(2, 2, i as u64).unwrap()).collect();
        Network::new(vec![2], layers).unwrap()
    }

    /// conv-relu-pool stack with a trailing flatten/dense/softmax, block-tagged.
    fn lenet_like() -> Network<f64> {
        Network::new(
            vec![1, 8, 8],
            vec![
                Layer::conv2d(1, 2, 3, 1, 0, 1).unwrap().with_block(0),
                Layer::relu().with_block(0),
                Layer::maxpool2d(2, 2).unwrap().with_block(0),
                Layer::conv2d(2, 4, 3, 1, 1, 2).unwrap().with_block(1),
                Layer::relu().with_block(1),
                Layer::flatten().with_block(1),
                Layer::dense(36, 5, 3).unwrap().with_block(2),
                Layer::softmax().with_block(2),
            ],
        )
        .unwrap()
    }

    #[test]
    fn per_k_layers_on_dense_chain() {
        let net = dense_chain(4);
        let plan = split_network(&net, &SplitPolicy::PerKLayers(2)).unwrap();
        assert_eq!(plan.boundaries(), &[(0, 2), (2, 4)]);
    }

    #[test]
    fn per_k_counts_parameterized_layers() {
        let net = lenet_like();
        let plan = split_network(&net, &SplitPolicy::PerKLayers(2)).unwrap();
        // conv,relu,pool,conv,relu,flatten | dense,softmax
        assert_eq!(plan.boundaries(), &[(0, 6), (6, 8)]);
    }

    #[test]
    fn per_k_larger_than_param_count_is_single_section() {
        let net = dense_chain(3);
        let plan = split_network(&net, &SplitPolicy::PerKLayers(5)).unwrap();
        assert_eq!(plan.boundaries(), &[(0, 3)]);
    }

    #[test]
    fn explicit_gap_is_rejected() {
        let net = dense_chain(3);
        let policy = SplitPolicy::Explicit(vec![(0, 1), (2, 3)]);
        assert!(split_network(&net, &policy).is_err());
        let overlap = SplitPolicy::Explicit(vec![(0, 2), (1, 3)]);
        assert!(split_network(&net, &overlap).is_err());
        let ok = SplitPolicy::Explicit(vec![(0, 1), (1, 3)]);
        assert!(split_network(&net, &ok).is_ok());
    }

    #[test]
    fn per_block_follows_tags() {
        let net = lenet_like();
        let plan = split_network(&net, &SplitPolicy::PerBlock).unwrap();
        assert_eq!(plan.boundaries(), &[(0, 3), (3, 6), (6, 8)]);
        let untagged = dense_chain(2);
        assert!(split_network(&untagged, &SplitPolicy::PerBlock).is_err());
    }

    #[test]
    fn plan_covers_every_layer_once() {
        for k in 1..=4 {
            let net = lenet_like();
            let plan = split_network(&net, &SplitPolicy::PerKLayers(k)).unwrap();
            let mut covered = vec![0usize; net.len()];
            for i in 1..=plan.section_count() {
                for idx in plan.section_range(i).unwrap() {
                    covered[idx] += 1;
                }
            }
            assert!(covered.iter().all(|&c| c == 1), "k={k}: {covered:?}");
        }
    }

    #[test]
    fn subnet_freezing_and_spans() {
        let net = dense_chain(4);
        let plan = split_network(&net, &SplitPolicy::PerKLayers(2)).unwrap();
        let cfg = QuantConfig::binary();

        let s1 = build_subnet(&net, &plan, 1, cfg).unwrap();
        assert_eq!(s1.net.len(), 2);
        assert!(!s1.net.layer(0).frozen && !s1.net.layer(1).frozen);
        assert!(s1.net.layer(0).quant.is_some());

        let s2 = build_subnet(&net, &plan, 2, cfg).unwrap();
        assert_eq!(s2.net.len(), 4); // spans the whole teacher
        assert!(s2.net.layer(0).frozen && s2.net.layer(1).frozen);
        assert!(s2.net.layer(0).quant.is_none(), "prefix stays full precision");
        assert!(!s2.net.layer(2).frozen);
        assert!(s2.net.layer(2).quant.is_some());
        // prefix weights bit-identical to teacher
        assert_eq!(s2.net.layer(0).weight().unwrap(), net.layer(0).weight().unwrap());

        assert!(build_subnet(&net, &plan, 0, cfg).is_err());
        assert!(build_subnet(&net, &plan, 3, cfg).is_err());
    }

    #[test]
    fn middle_subnet_of_three_sections() {
        let net = dense_chain(3);
        let plan = split_network(&net, &SplitPolicy::PerKLayers(1)).unwrap();
        let s2 = build_subnet(&net, &plan, 2, QuantConfig::ternary()).unwrap();
        assert_eq!(s2.net.len(), 2); // section 3 absent
        assert!(s2.net.layer(0).frozen);
        assert!(!s2.net.layer(1).frozen);
    }

    #[test]
    fn merge_of_untrained_sections_equals_direct_quantization() {
        let net = dense_chain(4);
        let plan = split_network(&net, &SplitPolicy::PerKLayers(2)).unwrap();
        let cfg = QuantConfig::binary();
        let sections: Vec<_> = (1..=2)
            .map(|i| build_subnet(&net, &plan, i, cfg).unwrap().section_weights())
            .collect();
        let merged = merge_sections(&sections, &plan, &net).unwrap();
        let direct = direct_quantization(&net, cfg);
        let x = Tensor::vector(&[0.7, -0.3]);
        assert_eq!(merged.forward(&x).unwrap(), direct.forward(&x).unwrap());
    }

    #[test]
    fn merge_validates_sections() {
        let net = dense_chain(4);
        let plan = split_network(&net, &SplitPolicy::PerKLayers(2)).unwrap();
        let cfg = QuantConfig::binary();
        let s1 = build_subnet(&net, &plan, 1, cfg).unwrap().section_weights();
        assert!(merge_sections(&[s1.clone()], &plan, &net).is_err());
        assert!(merge_sections(&[s1.clone(), s1.clone()], &plan, &net).is_err());
        let mut bad = build_subnet(&net, &plan, 2, cfg).unwrap().section_weights();
        bad.params[0].1 = Tensor::zeros(&[3, 3]);
        assert!(merge_sections(&[s1, bad], &plan, &net).is_err());
    }
}
