//! Weight and activation quantizers plus per-layer quantization-error
//! measurement.
//!
//! Binary maps weights to {-a, +a} with a = mean(|w|); ternary to {-a, 0, +a}
//! with a dead zone below `threshold_factor * mean(|w|)`; k-bit applies the
//! tanh-normalized uniform grid. One scale per weight tensor.

use serde::{Deserialize, Serialize};

use crate::error::{DcqError, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Binary,
    Ternary,
    KBit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    MeanAbs,
}

/// Quantization scheme for one weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub scheme: Scheme,
    /// Bitwidth; only meaningful for `KBit`.
    pub bits: u32,
    pub scale_rule: ScaleRule,
    pub ternary_threshold_factor: f64,
}

impl QuantConfig {
    pub fn binary() -> Self {
        Self { scheme: Scheme::Binary, bits: 1, scale_rule: ScaleRule::MeanAbs, ternary_threshold_factor: 0.7 }
    }

    pub fn ternary() -> Self {
        Self { scheme: Scheme::Ternary, bits: 2, scale_rule: ScaleRule::MeanAbs, ternary_threshold_factor: 0.7 }
    }

    pub fn kbit(bits: u32) -> Self {
        Self { scheme: Scheme::KBit, bits, scale_rule: ScaleRule::MeanAbs, ternary_threshold_factor: 0.7 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.scheme {
            Scheme::KBit if self.bits < 1 => {
                Err(DcqError::Config("k-bit quantization requires bits >= 1".into()))
            }
            Scheme::Ternary
                if !(self.ternary_threshold_factor > 0.0
                    && self.ternary_threshold_factor < 1.0) =>
            {
                Err(DcqError::Config(format!(
                    "ternary threshold factor must be in (0, 1), got {}",
                    self.ternary_threshold_factor
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn apply<T: Element>(&self, w: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate()?;
        match self.scheme {
            Scheme::Binary => quantize_binary(w),
            Scheme::Ternary => quantize_ternary(w, T::from_f64(self.ternary_threshold_factor)),
            Scheme::KBit => quantize_kbit(w, self.bits),
        }
    }
}

/// Measured per-layer quantization error (L2 over the layer's output space).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaEstimate {
    pub layer_index: usize,
    pub delta: f64,
    pub calibration_size: usize,
}

/// `a * sign(w)` with `a = mean(|w|)` and `sign(0) := +1`.
pub fn quantize_binary<T: Element>(w: &Tensor<T>) -> Result<Tensor<T>> {
    if w.is_empty() {
        return Err(DcqError::Empty("quantize_binary of empty tensor".into()));
    }
    let alpha = w.mean_abs();
    Ok(w.map(|x| if x < T::zero() { -alpha } else { alpha }))
}

/// Dead-zones entries with |w| <= t, t = factor * mean(|w|); the survivors map
/// to `a * sign(w)` with `a = mean(|w|)` over the survivors.
pub fn quantize_ternary<T: Element>(w: &Tensor<T>, threshold_factor: T) -> Result<Tensor<T>> {
    if w.is_empty() {
        return Err(DcqError::Empty("quantize_ternary of empty tensor".into()));
    }
    if !(threshold_factor > T::zero() && threshold_factor < T::one()) {
        return Err(DcqError::Config("ternary threshold factor must be in (0, 1)".into()));
    }
    let t = threshold_factor * w.mean_abs();
    let above_count = w.data().iter().filter(|x| x.abs() > t).count();
    if above_count == 0 {
        // All entries inside the dead zone; the all-zero tensor is valid.
        return Ok(Tensor::zeros(w.shape()));
    }
    let alpha = crate::tensor::compensated_mean(
        w.data().iter().map(|x| x.abs()).filter(|x| *x > t),
        above_count,
    );
    Ok(w.map(|x| {
        if x.abs() <= t {
            T::zero()
        } else if x < T::zero() {
            -alpha
        } else {
            alpha
        }
    }))
}

/// Uniform quantizer on [0, 1]: `round((2^k - 1) x) / (2^k - 1)`, with
/// half-way cases rounded away from zero.
fn qk<T: Element>(x: T, k: u32) -> T {
    let levels = T::from_f64(((1u64 << k) - 1) as f64);
    (x * levels).round() / levels
}

/// DoReFa-style k-bit weight quantizer: tanh-normalize into [0, 1], quantize
/// on the uniform grid, map back to [-1, 1].
pub fn quantize_kbit<T: Element>(w: &Tensor<T>, k: u32) -> Result<Tensor<T>> {
    if k < 1 {
        return Err(DcqError::Config("k-bit quantization requires k >= 1".into()));
    }
    if w.is_empty() {
        return Err(DcqError::Empty("quantize_kbit of empty tensor".into()));
    }
    let max_tanh = w.map(|x| x.tanh()).max_abs();
    if max_tanh == T::zero() {
        return Ok(Tensor::zeros(w.shape()));
    }
    let half = T::from_f64(0.5);
    let two = T::from_f64(2.0);
    Ok(w.map(|x| {
        let normalized = x.tanh() / (two * max_tanh) + half;
        two * qk(normalized, k) - T::one()
    }))
}

/// DoReFa activation rule: clip to [0, 1], then the uniform k-bit grid.
pub fn quantize_activations<T: Element>(a: &Tensor<T>, k: u32) -> Result<Tensor<T>> {
    if k < 1 {
        return Err(DcqError::Config("activation quantization requires k >= 1".into()));
    }
    Ok(a.map(|x| qk(x.max(T::zero()).min(T::one()), k)))
}

/// Max-over-inputs L2 distance between the outputs of a full-precision layer
/// and its quantized counterpart. `calibration` is batched along the leading
/// axis.
pub fn measure_delta<T: Element>(
    layer_fp: &crate::layer::Layer<T>,
    layer_q: &crate::layer::Layer<T>,
    calibration: &Tensor<T>,
    layer_index: usize,
) -> Result<DeltaEstimate> {
    let n = calibration.batch_size();
    if n == 0 {
        return Err(DcqError::Empty("measure_delta with empty calibration set".into()));
    }
    let out_fp = layer_fp.apply_batch(calibration)?;
    let out_q = layer_q.apply_batch(calibration)?;
    let mut delta = 0.0f64;
    for i in 0..n {
        let d = out_fp.batch_item(i)?.l2_distance(&out_q.batch_item(i)?)?;
        delta = delta.max(d.to_f64_());
    }
    Ok(DeltaEstimate { layer_index, delta, calibration_size: n })
}
