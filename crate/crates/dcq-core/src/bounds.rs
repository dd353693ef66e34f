//! Numerical verification of the Lipschitz-chained quantization error bounds:
//! per-layer Lipschitz constants, accumulated error, pairwise and pointwise
//! inequality checks, and classification-stability radii.
//!
//! All computation here runs in f64; convert f32 networks first. Comparisons
//! allow a small tolerance above the bound so floating-point rounding in the
//! evaluation itself can never flag a violation: the slack from the 2Δ / 3Δ
//! terms in any real violation dwarfs it.

use serde::{Deserialize, Serialize};

use crate::error::{DcqError, Result};
use crate::layer::{conv2d_backward, conv2d_forward, Layer, LayerKind, LayerOp};
use crate::network::Network;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Absolute + relative tolerance for "lhs <= rhs" bound comparisons.
fn bound_tolerance(rhs: f64) -> f64 {
    1e-9 * (1.0 + rhs.abs())
}

// Successive Rayleigh estimates move by ~error * (1 - gap ratio), so a loose
// successive tolerance stops far from the limit when the top singular values
// are close. Iterate to a tight successive tolerance with a generous cap;
// typical matrices exit after a few hundred rounds.
const POWER_ITERS_MIN: usize = 100;
const POWER_ITERS_MAX: usize = 20_000;
const POWER_TOL: f64 = 1e-13;

/// Norm-based Lipschitz bound of a single layer. Parameterized layers use the
/// spectral norm of their (effective) weight operator; relu, tanh, flatten,
/// softmax and non-overlapping maxpool are 1-Lipschitz.
pub fn layer_lipschitz_bound(layer: &Layer<f64>, in_shape: &[usize]) -> Result<f64> {
    match &layer.op {
        LayerOp::Dense { .. } => {
            let w = layer.effective_weight()?.expect("dense has weights");
            Ok(dense_spectral_norm(&w))
        }
        LayerOp::Conv2d { stride, padding, .. } => {
            let w = layer.effective_weight()?.expect("conv has weights");
            conv_spectral_norm(&w, in_shape, *stride, *padding)
        }
        LayerOp::Relu | LayerOp::Tanh | LayerOp::Flatten | LayerOp::Softmax => Ok(1.0),
        LayerOp::MaxPool2d { kernel, stride } => {
            if stride < kernel {
                return Err(DcqError::Config(
                    "lipschitz bound for overlapping maxpool is unsupported".into(),
                ));
            }
            Ok(1.0)
        }
    }
}

/// Per-layer norm-based bounds for the whole chain.
pub fn chain_lipschitz_bounds(net: &Network<f64>) -> Result<Vec<f64>> {
    let mut shape = net.input_shape().to_vec();
    let mut bounds = Vec::with_capacity(net.len());
    for layer in net.layers() {
        bounds.push(layer_lipschitz_bound(layer, &shape)?);
        shape = layer.out_shape(&shape)?;
    }
    Ok(bounds)
}

/// Largest singular value of a dense weight matrix by power iteration.
fn dense_spectral_norm(w: &Tensor<f64>) -> f64 {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut rng = SplitMix64::new(0x5EC7_0A41);
    let mut v: Vec<f64> = (0..in_dim).map(|_| rng.normal()).collect();
    normalize(&mut v);
    let mut sigma = 0.0f64;
    for it in 0..POWER_ITERS_MAX {
        // u = W v
        let mut u = vec![0.0; out_dim];
        for o in 0..out_dim {
            let row = &wd[o * in_dim..(o + 1) * in_dim];
            u[o] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let new_sigma = norm(&u);
        if new_sigma == 0.0 {
            return 0.0;
        }
        // v = W^T u, normalized
        let mut vt = vec![0.0; in_dim];
        for o in 0..out_dim {
            let row = &wd[o * in_dim..(o + 1) * in_dim];
            for (vt_k, w_k) in vt.iter_mut().zip(row) {
                *vt_k += u[o] * w_k;
            }
        }
        normalize(&mut vt);
        v = vt;
        if it >= POWER_ITERS_MIN && (new_sigma - sigma).abs() <= POWER_TOL * new_sigma.max(1.0) {
            return new_sigma;
        }
        sigma = new_sigma;
    }
    sigma
}

/// Spectral norm of the conv linear operator (bias excluded) on the given
/// input shape, by power iteration with the conv forward and its adjoint.
fn conv_spectral_norm(
    w: &Tensor<f64>,
    in_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<f64> {
    if in_shape.len() != 3 {
        return Err(DcqError::Shape(format!("conv input shape {in_shape:?}")));
    }
    let mut batched_in = vec![1usize];
    batched_in.extend_from_slice(in_shape);
    let co = w.shape()[0];
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let h = in_shape[1] + 2 * padding;
    let wd = in_shape[2] + 2 * padding;
    if h < kh || wd < kw {
        return Err(DcqError::Config("conv kernel larger than padded input".into()));
    }
    let out_shape = vec![1, co, (h - kh) / stride + 1, (wd - kw) / stride + 1];
    let zero_bias = Tensor::zeros(&[co]);

    let mut rng = SplitMix64::new(0xC0_57A7_u64);
    let n_in: usize = batched_in.iter().product();
    let mut v = Tensor::new(
        batched_in.clone(),
        (0..n_in).map(|_| rng.normal()).collect(),
    )?;
    let inv = 1.0 / v.l2_norm();
    v = v.map(|x| x * inv);

    let mut sigma = 0.0f64;
    for it in 0..POWER_ITERS_MAX {
        let u = conv2d_forward(&v, w, &zero_bias, stride, padding, &out_shape)?;
        let new_sigma = u.l2_norm();
        if new_sigma == 0.0 {
            return Ok(0.0);
        }
        let (back, _, _) = conv2d_backward(&v, w, &u, stride, padding)?;
        let back_norm = back.l2_norm();
        if back_norm == 0.0 {
            return Ok(new_sigma);
        }
        let inv = 1.0 / back_norm;
        v = back.map(|x| x * inv);
        if it >= POWER_ITERS_MIN && (new_sigma - sigma).abs() <= POWER_TOL * new_sigma.max(1.0) {
            return Ok(new_sigma);
        }
        sigma = new_sigma;
    }
    Ok(sigma)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        for x in v {
            *x /= n;
        }
    }
}

/// Empirical Lipschitz estimate: max over sampled pairs of
/// ||phi(x) - phi(y)|| / ||x - y||, with a seeded standard-normal sampler.
pub fn layer_lipschitz_empirical(
    layer: &Layer<f64>,
    in_shape: &[usize],
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(DcqError::Config("empirical lipschitz needs n_pairs >= 1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let item: usize = in_shape.iter().product();
    let mut batched = vec![1usize];
    batched.extend_from_slice(in_shape);
    let mut best: Option<f64> = None;
    for _ in 0..n_pairs {
        let x = Tensor::new(batched.clone(), (0..item).map(|_| rng.normal()).collect())?;
        let y = Tensor::new(batched.clone(), (0..item).map(|_| rng.normal()).collect())?;
        let dist = x.l2_distance(&y)?;
        if dist < 1e-12 {
            continue;
        }
        let fx = layer.apply_batch(&x)?;
        let fy = layer.apply_batch(&y)?;
        let ratio = fx.l2_distance(&fy)? / dist;
        best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
    }
    best.ok_or_else(|| DcqError::Empty("all sampled pairs were degenerate".into()))
}

/// Accumulated quantization error across an m-layer chain:
/// delta_m + sum_{i<m} (prod_{j>i} L_j) * delta_i.
pub fn delta_ml(lipschitz: &[f64], deltas: &[f64]) -> Result<f64> {
    if lipschitz.len() != deltas.len() || lipschitz.is_empty() {
        return Err(DcqError::Config(format!(
            "delta_ml needs equal nonempty lists, got {} and {}",
            lipschitz.len(),
            deltas.len()
        )));
    }
    if lipschitz.iter().chain(deltas).any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(DcqError::Config("delta_ml inputs must be nonnegative and finite".into()));
    }
    let m = deltas.len();
    let mut total = deltas[m - 1];
    let mut suffix_product = 1.0;
    for i in (0..m - 1).rev() {
        suffix_product *= lipschitz[i + 1];
        total += suffix_product * deltas[i];
    }
    Ok(total)
}

/// Per-layer quantization errors measured over a calibration set.
///
/// Layer i's error is evaluated at both the quantized-prefix and the
/// full-precision-prefix outputs of every calibration input: the pairwise
/// chain visits the former and the pointwise (3-delta) chain visits both, so
/// calibrating over their union makes the checked inequalities consequences
/// of the proofs rather than sampling accidents.
pub fn calibrate_deltas(
    fp: &Network<f64>,
    q: &Network<f64>,
    calibration: &Tensor<f64>,
) -> Result<Vec<f64>> {
    if fp.len() != q.len() {
        return Err(DcqError::Config("calibrate_deltas: networks differ in depth".into()));
    }
    if calibration.batch_size() == 0 {
        return Err(DcqError::Empty("calibration set is empty".into()));
    }
    // inputs_to[i] = activation entering layer i, for both chains
    let mut fp_in = calibration.clone();
    let mut q_in = calibration.clone();
    let mut deltas = Vec::with_capacity(fp.len());
    for i in 0..fp.len() {
        let mut delta = max_item_distance(&fp.layer(i).apply_batch(&fp_in)?, &q.layer(i).apply_batch(&fp_in)?)?;
        if i > 0 {
            // identical tensors at i == 0; skip the duplicate evaluation
            let d_q = max_item_distance(&fp.layer(i).apply_batch(&q_in)?, &q.layer(i).apply_batch(&q_in)?)?;
            delta = delta.max(d_q);
        }
        deltas.push(delta);
        fp_in = fp.layer(i).apply_batch(&fp_in)?;
        q_in = q.layer(i).apply_batch(&q_in)?;
    }
    Ok(deltas)
}

fn max_item_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let n = a.batch_size();
    let mut worst = 0.0f64;
    for i in 0..n {
        worst = worst.max(a.batch_item(i)?.l2_distance(&b.batch_item(i)?)?);
    }
    Ok(worst)
}

/// Outcome of a sampled inequality check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub pass_fraction: f64,
    pub samples: usize,
    /// Smallest rhs - lhs over the samples; negative means a violation.
    pub worst_slack: f64,
    /// Largest lhs / rhs over the samples (rhs > 0 samples only).
    pub max_ratio: f64,
}

/// Pairwise bound: ||f_q(x) - f_q(y)|| < (prod L) ||x - y|| + 2 delta,
/// sampled over distinct index pairs of the calibration pool.
pub fn check_lemma_pairwise(
    f_q: &Network<f64>,
    lipschitz: &[f64],
    delta: f64,
    pool: &Tensor<f64>,
    n_pairs: usize,
    seed: u64,
) -> Result<CheckResult> {
    let n = pool.batch_size();
    if n < 2 {
        return Err(DcqError::Config("lemma check needs a pool of at least 2 points".into()));
    }
    if n_pairs == 0 {
        return Err(DcqError::Config("lemma check needs n_pairs >= 1".into()));
    }
    let l_prod: f64 = lipschitz.iter().product();
    let outputs = f_q.forward(pool)?;
    let mut rng = SplitMix64::new(seed);
    let mut satisfied = 0usize;
    let mut worst_slack = f64::INFINITY;
    let mut max_ratio = 0.0f64;
    for _ in 0..n_pairs {
        let i = rng.index(n);
        let mut j = rng.index(n);
        while j == i {
            j = rng.index(n);
        }
        let lhs = outputs.batch_item(i)?.l2_distance(&outputs.batch_item(j)?)?;
        let dist = pool.batch_item(i)?.l2_distance(&pool.batch_item(j)?)?;
        let rhs = l_prod * dist + 2.0 * delta;
        let slack = rhs - lhs;
        if lhs <= rhs + bound_tolerance(rhs) {
            satisfied += 1;
        }
        worst_slack = worst_slack.min(slack);
        if rhs > 0.0 {
            max_ratio = max_ratio.max(lhs / rhs);
        }
    }
    Ok(CheckResult {
        pass_fraction: satisfied as f64 / n_pairs as f64,
        samples: n_pairs,
        worst_slack,
        max_ratio,
    })
}

/// Pointwise bound: ||f_q(x) - f_fp(x)|| <= 3 delta, sampled over the pool.
/// With delta == 0 any observed error counts as a violation (it signals
/// mis-calibrated per-layer deltas).
pub fn check_theorem_pointwise(
    f_fp: &Network<f64>,
    f_q: &Network<f64>,
    delta: f64,
    pool: &Tensor<f64>,
    n_points: usize,
    seed: u64,
) -> Result<CheckResult> {
    let n = pool.batch_size();
    if n == 0 || n_points == 0 {
        return Err(DcqError::Config("theorem check needs a pool and n_points >= 1".into()));
    }
    let out_fp = f_fp.forward(pool)?;
    let out_q = f_q.forward(pool)?;
    let rhs = 3.0 * delta;
    let mut rng = SplitMix64::new(seed);
    let mut satisfied = 0usize;
    let mut worst_slack = f64::INFINITY;
    let mut max_ratio = 0.0f64;
    for _ in 0..n_points {
        let i = rng.index(n);
        let err = out_fp.batch_item(i)?.l2_distance(&out_q.batch_item(i)?)?;
        if err <= rhs + bound_tolerance(rhs) {
            satisfied += 1;
        }
        worst_slack = worst_slack.min(rhs - err);
        if rhs > 0.0 {
            max_ratio = max_ratio.max(err / rhs);
        }
    }
    Ok(CheckResult {
        pass_fraction: satisfied as f64 / n_points as f64,
        samples: n_points,
        worst_slack,
        max_ratio,
    })
}

/// Guaranteed-stability radii. Negative values carry no guarantee and are
/// clamped to zero with the corresponding flag set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RadiusReport {
    pub radius_q: f64,
    pub radius_fp: f64,
    pub no_guarantee_q: bool,
    pub no_guarantee_fp: bool,
}

/// radius_q = (r - 2 delta) / L guards the quantized net's own labels;
/// radius_fp = (r - 5 delta) / L guards agreement with the full-precision net.
pub fn robustness_radii(r: f64, lipschitz_product: f64, delta: f64) -> RadiusReport {
    let rq = (r - 2.0 * delta) / lipschitz_product;
    let rfp = (r - 5.0 * delta) / lipschitz_product;
    RadiusReport {
        radius_q: rq.max(0.0),
        radius_fp: rfp.max(0.0),
        no_guarantee_q: rq <= 0.0,
        no_guarantee_fp: rfp <= 0.0,
    }
}

/// Separation radius r = (1/2) min distance between distinct class targets;
/// for one-hot softmax targets the classification-safe value is 1/2.
pub fn softmax_class_radius() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityCheck {
    pub pass_fraction: f64,
    pub points: usize,
    pub perturbations_per_point: usize,
}

/// Over the correctly-classified subset, the fraction of sampled
/// perturbations (uniform in the L2 ball of `radius`) that leave the argmax
/// unchanged.
pub fn check_classification_stability(
    net: &Network<f64>,
    inputs: &Tensor<f64>,
    labels: &[usize],
    radius: f64,
    n_perturbations: usize,
    seed: u64,
) -> Result<StabilityCheck> {
    if radius < 0.0 {
        return Err(DcqError::Config("stability radius must be nonnegative".into()));
    }
    if n_perturbations == 0 {
        return Err(DcqError::Config("stability check needs n_perturbations >= 1".into()));
    }
    let n = inputs.batch_size();
    if n == 0 || n != labels.len() {
        return Err(DcqError::Shape(format!("{n} inputs vs {} labels", labels.len())));
    }
    let out_dim: usize = net.output_shape().iter().product();
    let outputs = net.forward(inputs)?;
    let correct: Vec<usize> = (0..n)
        .filter(|&i| {
            let item = outputs.batch_item(i).expect("in range");
            crate::network::argmax(item.data()) == labels[i]
        })
        .collect();
    if correct.is_empty() {
        return Err(DcqError::Empty("no correctly-classified points to perturb".into()));
    }

    let item_len: usize = inputs.len() / n;
    let mut rng = SplitMix64::new(seed);
    let mut stable = 0usize;
    let mut total = 0usize;
    for &i in &correct {
        let base = inputs.batch_item(i)?;
        let base_pred = labels[i];
        // batch all perturbations of this point into one forward
        let mut data = Vec::with_capacity(n_perturbations * item_len);
        for _ in 0..n_perturbations {
            let mut eta: Vec<f64> = (0..item_len).map(|_| rng.normal()).collect();
            let nrm = norm(&eta);
            let scale = if nrm == 0.0 {
                0.0
            } else {
                radius * rng.next_f64().powf(1.0 / item_len as f64) / nrm
            };
            for (d, b) in eta.iter_mut().zip(base.data()) {
                *d = *b + *d * scale;
            }
            data.extend_from_slice(&eta);
        }
        let mut shape = vec![n_perturbations];
        shape.extend_from_slice(&inputs.shape()[1..]);
        let batch = Tensor::new(shape, data)?;
        let perturbed_out = net.forward(&batch)?;
        for p in 0..n_perturbations {
            let row = &perturbed_out.data()[p * out_dim..(p + 1) * out_dim];
            if crate::network::argmax(row) == base_pred {
                stable += 1;
            }
            total += 1;
        }
    }
    Ok(StabilityCheck {
        pass_fraction: stable as f64 / total as f64,
        points: correct.len(),
        perturbations_per_point: n_perturbations,
    })
}

/// Everything the `bounds` command reports, serialized as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerBound {
    pub layer: usize,
    pub kind: LayerKind,
    pub lipschitz_norm: f64,
    pub lipschitz_empirical: Option<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub layers: Vec<LayerBound>,
    pub lipschitz_product: f64,
    pub delta_ml: f64,
    pub calibration_size: usize,
    pub class_radius: f64,
    pub radii: RadiusReport,
    pub lemma: CheckResult,
    pub theorem: CheckResult,
    pub stability: Option<StabilityCheck>,
    /// True when both inequality checks passed on every sample.
    pub passed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ReportOptions {
    pub n_pairs: usize,
    pub n_points: usize,
    /// Pairs per layer for the empirical Lipschitz estimate; 0 skips it.
    pub empirical_pairs: usize,
    pub class_radius: f64,
    pub seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            n_pairs: 10_000,
            n_points: 10_000,
            empirical_pairs: 1_000,
            class_radius: softmax_class_radius(),
            seed: 0,
        }
    }
}

/// Calibrates deltas, computes the chain bounds, and runs both inequality
/// checks with samplers drawing from the calibration pool.
pub fn build_report(
    fp: &Network<f64>,
    q: &Network<f64>,
    calibration: &Tensor<f64>,
    opts: &ReportOptions,
) -> Result<BoundReport> {
    let lipschitz = chain_lipschitz_bounds(fp)?;
    let deltas = calibrate_deltas(fp, q, calibration)?;
    let total_delta = delta_ml(&lipschitz, &deltas)?;
    let l_prod: f64 = lipschitz.iter().product();

    let mut layers = Vec::with_capacity(fp.len());
    let mut shape = fp.input_shape().to_vec();
    for (i, layer) in fp.layers().iter().enumerate() {
        let empirical = if opts.empirical_pairs > 0 {
            Some(layer_lipschitz_empirical(
                layer,
                &shape,
                opts.empirical_pairs,
                crate::rng::derive_seed(opts.seed, 0x11F0 + i as u64),
            )?)
        } else {
            None
        };
        layers.push(LayerBound {
            layer: i,
            kind: layer.kind(),
            lipschitz_norm: lipschitz[i],
            lipschitz_empirical: empirical,
            delta: deltas[i],
        });
        shape = layer.out_shape(&shape)?;
    }

    let lemma = check_lemma_pairwise(
        q,
        &lipschitz,
        total_delta,
        calibration,
        opts.n_pairs,
        crate::rng::derive_seed(opts.seed, 1),
    )?;
    let theorem = check_theorem_pointwise(
        fp,
        q,
        total_delta,
        calibration,
        opts.n_points,
        crate::rng::derive_seed(opts.seed, 2),
    )?;
    let radii = robustness_radii(opts.class_radius, l_prod, total_delta);
    let passed = lemma.pass_fraction == 1.0 && theorem.pass_fraction == 1.0;
    Ok(BoundReport {
        layers,
        lipschitz_product: l_prod,
        delta_ml: total_delta,
        calibration_size: calibration.batch_size(),
        class_radius: opts.class_radius,
        radii,
        lemma,
        theorem,
        stability: None,
        passed,
    })
}
