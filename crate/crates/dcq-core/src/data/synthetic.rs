//! Seeded synthetic datasets for the bound-check harnesses.

use crate::error::{DcqError, Result};
use crate::layer::Layer;
use crate::network::Network;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Element, Tensor};

use super::{Dataset, Split};

#[derive(Debug, Clone)]
pub struct BlobsParams {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Scale of the class-center positions.
    pub center_spread: f64,
    /// Within-class standard deviation; must be positive.
    pub noise: f64,
}

/// Isotropic gaussian blobs, one per class.
pub fn gaussian_blobs<T: Element>(params: &BlobsParams, seed: u64) -> Result<Dataset<T>> {
    if params.classes < 2 {
        return Err(DcqError::Config("blobs need at least 2 classes".into()));
    }
    if params.noise <= 0.0 {
        return Err(DcqError::Config("blob noise must be positive".into()));
    }
    if params.per_class == 0 || params.dim == 0 {
        return Err(DcqError::Config("blobs need per_class >= 1 and dim >= 1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let centers: Vec<Vec<f64>> = (0..params.classes)
        .map(|_| (0..params.dim).map(|_| rng.normal() * params.center_spread).collect())
        .collect();
    let n = params.classes * params.per_class;
    let mut data = Vec::with_capacity(n * params.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..params.per_class {
            for &mu in center {
                data.push(T::from_f64(mu + rng.normal() * params.noise));
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, params.dim], data)?, labels, params.classes, Split::Train)
}

/// Random dense/activation chain used by the bound-verification suites:
/// `n_dense` in `[min_dense, max_dense]` dense layers with widths in
/// `[2, max_width]`, each followed by a randomly chosen relu or tanh except
/// the last.
#[derive(Debug, Clone)]
pub struct ChainNetParams {
    pub min_dense: usize,
    pub max_dense: usize,
    pub max_width: usize,
}

pub fn random_chain_net<T: Element>(params: &ChainNetParams, seed: u64) -> Result<Network<T>> {
    if params.min_dense == 0 || params.max_dense < params.min_dense || params.max_width < 2 {
        return Err(DcqError::Config("invalid chain net params".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let span = params.max_dense - params.min_dense + 1;
    let n_dense = params.min_dense + rng.index(span);
    let width = |rng: &mut SplitMix64| 2 + rng.index(params.max_width - 1);
    let mut in_dim = width(&mut rng);
    let input_dim = in_dim;
    let mut layers: Vec<Layer<T>> = Vec::new();
    for i in 0..n_dense {
        let out_dim = width(&mut rng);
        layers.push(Layer::dense(in_dim, out_dim, derive_seed(seed, 10 + i as u64))?);
        if i + 1 < n_dense {
            layers.push(if rng.next_f64() < 0.5 { Layer::relu() } else { Layer::tanh() });
        }
        in_dim = out_dim;
    }
    Network::new(vec![input_dim], layers)
}

#[derive(Debug, Clone)]
pub struct RandomNetParams {
    pub dim: usize,
    pub classes: usize,
    pub n: usize,
    /// Hidden tanh layer widths.
    pub hidden: Vec<usize>,
    /// Multiplier on the final dense layer; large values saturate the softmax
    /// so outputs sit numerically on the one-hot vertices.
    pub output_scale: f64,
    /// Standard deviation of the gaussian inputs.
    pub input_spread: f64,
    /// Required logit gap between the top two classes; candidate points below
    /// it are resampled. A gap of g saturates the top softmax probability to
    /// at least 1 / (1 + (classes-1) e^{-g}).
    pub min_margin: f64,
    /// When set, every dense layer's weights are snapped onto ternary levels
    /// {-a, 0, +a} (a = the layer's mean |w| at init) with this relative
    /// jitter, so ternary quantization of the network has a small, tunable
    /// per-layer error.
    pub ternary_snap_jitter: Option<f64>,
}

fn snap_ternary<T: Element>(layer: &mut Layer<T>, jitter: f64, rng: &mut SplitMix64) {
    let (w, _) = layer.params_mut().expect("dense layer");
    let alpha = w.mean_abs().to_f64_();
    for v in w.data_mut() {
        let x = v.to_f64_();
        let snapped = if x.abs() > 0.5 * alpha {
            alpha * x.signum() * (1.0 + rng.uniform(-jitter, jitter))
        } else {
            // stays inside the ternary dead zone
            alpha * jitter * 0.3 * rng.uniform(-1.0, 1.0)
        };
        *v = T::from_f64(snapped);
    }
}

/// A frozen random classifier plus a dataset it labels: inputs are seeded
/// gaussians and each label is the network's own argmax, so the returned
/// network classifies the set perfectly by construction.
pub fn random_net_teacher<T: Element>(
    params: &RandomNetParams,
    seed: u64,
) -> Result<(Network<T>, Dataset<T>)> {
    if params.classes < 2 || params.dim == 0 || params.n == 0 {
        return Err(DcqError::Config("random_net_teacher needs classes >= 2, dim >= 1, n >= 1".into()));
    }
    let mut snap_rng = SplitMix64::new(derive_seed(seed, 0x5AAF));
    let mut layers: Vec<Layer<T>> = Vec::new();
    let mut in_dim = params.dim;
    for (i, &h) in params.hidden.iter().enumerate() {
        let mut layer = Layer::dense(in_dim, h, derive_seed(seed, 100 + i as u64))?;
        if let Some(jitter) = params.ternary_snap_jitter {
            snap_ternary(&mut layer, jitter, &mut snap_rng);
        }
        layers.push(layer);
        layers.push(Layer::tanh());
        in_dim = h;
    }
    let mut out_layer =
        Layer::dense(in_dim, params.classes, derive_seed(seed, 100 + params.hidden.len() as u64))?;
    if let Some(jitter) = params.ternary_snap_jitter {
        snap_ternary(&mut out_layer, jitter, &mut snap_rng);
    }
    if params.output_scale != 1.0 {
        let scale = T::from_f64(params.output_scale);
        let (w, _) = out_layer.params_mut().expect("dense");
        for v in w.data_mut() {
            *v = *v * scale;
        }
    }
    layers.push(out_layer);
    layers.push(Layer::softmax());
    let net = Network::new(vec![params.dim], layers)?;
    let logit_layer = net.len() - 2;

    let mut rng = SplitMix64::new(derive_seed(seed, 0));
    let mut kept: Vec<T> = Vec::with_capacity(params.n * params.dim);
    let mut labels = Vec::with_capacity(params.n);
    let mut rounds = 0;
    while labels.len() < params.n {
        rounds += 1;
        if rounds > 200 {
            return Err(DcqError::Config(format!(
                "margin filter {} rejected nearly all samples",
                params.min_margin
            )));
        }
        let draw = (params.n * 2).max(32);
        let data: Vec<T> = (0..draw * params.dim)
            .map(|_| T::from_f64(rng.normal() * params.input_spread))
            .collect();
        let candidates = Tensor::new(vec![draw, params.dim], data)?;
        let (_, captured) = net.forward_captured(&candidates, &[logit_layer])?;
        let logits = captured.into_values().next().expect("captured");
        for i in 0..draw {
            if labels.len() == params.n {
                break;
            }
            let row = logits.batch_item(i)?;
            let top = crate::network::argmax(row.data());
            let top_v = row.data()[top].to_f64_();
            let second = row
                .data()
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != top)
                .map(|(_, v)| v.to_f64_())
                .fold(f64::NEG_INFINITY, f64::max);
            if top_v - second >= params.min_margin {
                kept.extend_from_slice(candidates.batch_item(i)?.data());
                labels.push(top);
            }
        }
    }
    let inputs = Tensor::new(vec![params.n, params.dim], kept)?;
    let ds = Dataset::new(inputs, labels, params.classes, Split::Test)?;
    Ok((net, ds))
}
