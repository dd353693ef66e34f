//! Central finite-difference gradient checking (f64 only).
//!
//! Relu, maxpool, mae and huber are only piecewise differentiable, so the
//! instance generators resample until every intermediate sits a safe margin
//! away from a kink; otherwise the finite difference straddles the
//! non-differentiability and disagrees with the (correct) one-sided analytic
//! gradient.

use crate::distill::{regression_loss, LossKind, LossSpec};
use crate::error::Result;
use crate::layer::LayerOp;
use crate::network::Network;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    fn absorb(&mut self, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        self.entries_checked += 1;
        self.max_rel_err = self.max_rel_err.max(rel);
    }
}

/// True when no intermediate activation sits within `margin` of a relu zero
/// crossing or a maxpool window tie.
pub fn kink_free(net: &Network<f64>, x: &Tensor<f64>, margin: f64) -> Result<bool> {
    let trace = net.forward_trace(x)?;
    for (i, layer) in net.layers().iter().enumerate() {
        match &layer.op {
            LayerOp::Relu => {
                if trace.activations[i].data().iter().any(|v| v.abs() < margin) {
                    return Ok(false);
                }
            }
            LayerOp::MaxPool2d { kernel, stride } => {
                let input = &trace.activations[i];
                let (nc, h, w) = (
                    input.shape()[0] * input.shape()[1],
                    input.shape()[2],
                    input.shape()[3],
                );
                let out = &trace.activations[i + 1];
                let (ho, wo) = (out.shape()[2], out.shape()[3]);
                let xd = input.data();
                for p in 0..nc {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut top = f64::NEG_INFINITY;
                            let mut second = f64::NEG_INFINITY;
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    let v = xd[p * h * w + (oy * stride + ky) * w + ox * stride + kx];
                                    if v > top {
                                        second = top;
                                        top = v;
                                    } else if v > second {
                                        second = v;
                                    }
                                }
                            }
                            if top - second < margin && second.is_finite() {
                                return Ok(false);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    Ok(true)
}

/// Whether the loss at these residuals is locally smooth within `margin`.
pub fn loss_kink_free(spec: LossSpec, y: &Tensor<f64>, yhat: &Tensor<f64>, margin: f64) -> bool {
    y.data().iter().zip(yhat.data()).all(|(&t, &p)| {
        let r = (p - t).abs();
        match spec.kind {
            LossKind::Mse => true,
            LossKind::Mae => r > margin,
            LossKind::Huber => r > margin && (r - spec.huber_delta).abs() > margin,
        }
    })
}

/// Checks every trainable parameter of `net` against a central finite
/// difference of the end-to-end loss on `(x, target)`.
pub fn check_network_gradients(
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    spec: LossSpec,
    h: f64,
) -> Result<GradCheckReport> {
    let trace = net.forward_trace(x)?;
    let output = trace.activations.last().unwrap().clone();
    let (_, loss_grad) = regression_loss(spec, target, &output)?;
    let grads = net.backward(&trace, &loss_grad)?;

    let loss_at = |net: &Network<f64>| -> Result<f64> {
        let out = net.forward(x)?;
        Ok(regression_loss(spec, target, &out)?.0)
    };

    let mut report = GradCheckReport::default();
    let layer_indices: Vec<usize> = grads.keys().copied().collect();
    for li in layer_indices {
        let (dw, db) = grads.get(&li).unwrap().clone();
        let w_len = dw.len();
        for k in 0..w_len + db.len() {
            let bump = |net: &mut Network<f64>, delta: f64| {
                let (w, b) = net.layer_mut(li).params_mut().expect("trainable layer");
                if k < w_len {
                    w.data_mut()[k] = w.data_mut()[k] + delta;
                } else {
                    b.data_mut()[k - w_len] = b.data_mut()[k - w_len] + delta;
                }
            };
            bump(net, h);
            let plus = loss_at(net)?;
            bump(net, -2.0 * h);
            let minus = loss_at(net)?;
            bump(net, h);
            let numeric = (plus - minus) / (2.0 * h);
            let analytic =
                if k < w_len { dw.data()[k] } else { db.data()[k - w_len] };
            report.absorb(analytic, numeric);
        }
    }
    Ok(report)
}

/// Checks a loss gradient against a central finite difference in `yhat`.
pub fn check_loss_gradient(
    spec: LossSpec,
    y: &Tensor<f64>,
    yhat: &Tensor<f64>,
    h: f64,
) -> Result<GradCheckReport> {
    let (_, grad) = regression_loss(spec, y, yhat)?;
    let mut report = GradCheckReport::default();
    let mut perturbed = yhat.clone();
    for k in 0..yhat.len() {
        let orig = perturbed.data()[k];
        perturbed.data_mut()[k] = orig + h;
        let plus = regression_loss(spec, y, &perturbed)?.0;
        perturbed.data_mut()[k] = orig - h;
        let minus = regression_loss(spec, y, &perturbed)?.0;
        perturbed.data_mut()[k] = orig;
        report.absorb(grad.data()[k], (plus - minus) / (2.0 * h));
    }
    Ok(report)
}

/// Random tensor with entries in (-1, 1), kept for harness reproducibility.
pub fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .expect("valid shape")
}

/// A small network exercising one layer kind, with parameterized layers on
/// both sides where possible so input gradients flow through the kind under
/// test.
pub fn kind_probe_net(kind: crate::layer::LayerKind, seed: u64) -> Network<f64> {
    use crate::layer::{Layer, LayerKind};
    let d = |i: usize, o: usize, s: u64| Layer::dense(i, o, s).expect("dims");
    let layers = match kind {
        LayerKind::Dense => vec![d(5, 4, seed)],
        LayerKind::Conv2d => {
            vec![Layer::conv2d(2, 3, 3, 1, 1, seed).expect("dims"), Layer::flatten(), d(108, 4, seed + 1)]
        }
        LayerKind::Relu => vec![d(6, 5, seed), Layer::relu(), d(5, 4, seed + 1)],
        LayerKind::Tanh => vec![d(6, 5, seed), Layer::tanh(), d(5, 4, seed + 1)],
        LayerKind::MaxPool2d => vec![
            Layer::conv2d(1, 2, 3, 1, 0, seed).expect("dims"),
            Layer::maxpool2d(2, 2).expect("dims"),
            Layer::flatten(),
            d(8, 3, seed + 1),
        ],
        LayerKind::Flatten => {
            vec![Layer::conv2d(1, 2, 3, 1, 0, seed).expect("dims"), Layer::flatten(), d(32, 4, seed + 1)]
        }
        LayerKind::Softmax => vec![d(5, 4, seed), Layer::softmax()],
    };
    let input_shape = match kind {
        LayerKind::Dense | LayerKind::Softmax => vec![5],
        LayerKind::Relu | LayerKind::Tanh => vec![6],
        LayerKind::Conv2d => vec![2, 6, 6],
        LayerKind::MaxPool2d | LayerKind::Flatten => vec![1, 6, 6],
    };
    Network::new(input_shape, layers).expect("probe net is well-formed")
}

/// Runs `instances` finite-difference checks of `kind`, resampling any
/// instance that lands within the kink margin. Returns the worst relative
/// error observed.
pub fn check_kind_instances(
    kind: crate::layer::LayerKind,
    instances: usize,
    base_seed: u64,
) -> Result<GradCheckReport> {
    let mut combined = GradCheckReport::default();
    let mut attempt = 0u64;
    let mut done = 0usize;
    while done < instances {
        let seed = base_seed.wrapping_add(attempt.wrapping_mul(7919));
        attempt += 1;
        let mut net = kind_probe_net(kind, seed);
        let mut rng = SplitMix64::new(seed ^ 0xDA7A);
        let mut in_shape = vec![2usize];
        in_shape.extend_from_slice(net.input_shape());
        let x = random_tensor(&in_shape, &mut rng);
        if !kink_free(&net, &x, 1e-3)? {
            continue;
        }
        let mut out_shape = vec![2usize];
        out_shape.extend_from_slice(&net.output_shape());
        let target = random_tensor(&out_shape, &mut rng);
        let report = check_network_gradients(&mut net, &x, &target, LossSpec::mse(), 1e-5)?;
        combined.entries_checked += report.entries_checked;
        combined.max_rel_err = combined.max_rel_err.max(report.max_rel_err);
        done += 1;
    }
    Ok(combined)
}

/// Runs `instances` finite-difference checks of a loss spec on random
/// tensors, resampling residuals that sit on a kink.
pub fn check_loss_instances(
    spec: LossSpec,
    instances: usize,
    base_seed: u64,
) -> Result<GradCheckReport> {
    let mut combined = GradCheckReport::default();
    let mut rng = SplitMix64::new(base_seed);
    let mut done = 0usize;
    while done < instances {
        let y = random_tensor(&[20], &mut rng);
        let yhat = random_tensor(&[20], &mut rng);
        if !loss_kink_free(spec, &y, &yhat, 1e-3) {
            continue;
        }
        let report = check_loss_gradient(spec, &y, &yhat, 1e-6)?;
        combined.entries_checked += report.entries_checked;
        combined.max_rel_err = combined.max_rel_err.max(report.max_rel_err);
        done += 1;
    }
    Ok(combined)
}
