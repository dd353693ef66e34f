//! Post-training forensics: which quantized weights did training actually
//! flip, weight histograms with altered-position overlays, and per-pixel
//! feature-map loss grids. Everything exports as plot-ready CSV.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::{LossKind, LossSpec};
use crate::error::{DcqError, Result};
use crate::network::Network;
use crate::quant::{quantize_binary, quantize_ternary, Scheme};
use crate::section::SplitPlan;
use crate::tensor::{Element, Tensor};

pub const FLIP_HISTOGRAM_BINS: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipStats {
    pub layer_index: usize,
    pub total_weights: usize,
    pub altered_count: usize,
    pub altered_fraction: f64,
    /// Histogram of teacher |w| at altered positions, 32 uniform bins over
    /// [min |w|, max |w|].
    pub altered_magnitude_histogram: Vec<usize>,
    pub histogram_edges: Vec<f64>,
    /// Mask over flattened weights, true where the level changed.
    pub altered: Vec<bool>,
}

/// Quantization level per weight: the sign for binary, {-1, 0, +1} for
/// ternary. Levels are compared instead of values so a drift in the scale
/// alpha alone never counts as an alteration.
fn levels<T: Element>(w: &Tensor<T>, scheme: Scheme) -> Result<Vec<i8>> {
    let q = match scheme {
        Scheme::Binary => quantize_binary(w)?,
        Scheme::Ternary => quantize_ternary(w, T::from_f64(0.7))?,
        Scheme::KBit => {
            return Err(DcqError::Config("flip stats are defined for binary/ternary".into()))
        }
    };
    Ok(q.data()
        .iter()
        .map(|&v| {
            if v > T::zero() {
                1
            } else if v < T::zero() {
                -1
            } else if matches!(scheme, Scheme::Binary) {
                1 // sign(0) := +1, matching the binary quantizer
            } else {
                0
            }
        })
        .collect())
}

/// Compares the trained section's quantization levels against direct
/// quantization of the teacher layer.
pub fn flip_stats<T: Element>(
    teacher_weight: &Tensor<T>,
    trained_weight: &Tensor<T>,
    scheme: Scheme,
    layer_index: usize,
) -> Result<FlipStats> {
    if teacher_weight.shape() != trained_weight.shape() {
        return Err(DcqError::Shape(format!(
            "flip_stats shapes {:?} vs {:?}",
            teacher_weight.shape(),
            trained_weight.shape()
        )));
    }
    let direct = levels(teacher_weight, scheme)?;
    let trained = levels(trained_weight, scheme)?;
    let altered: Vec<bool> = direct.iter().zip(&trained).map(|(a, b)| a != b).collect();
    let altered_count = altered.iter().filter(|&&x| x).count();

    let magnitudes: Vec<f64> = teacher_weight.data().iter().map(|w| w.abs().to_f64_()).collect();
    let (edges, _) = bin_edges(&magnitudes, FLIP_HISTOGRAM_BINS);
    let mut histogram = vec![0usize; FLIP_HISTOGRAM_BINS];
    for (i, &is_altered) in altered.iter().enumerate() {
        if is_altered {
            histogram[bin_of(magnitudes[i], &edges)] += 1;
        }
    }

    Ok(FlipStats {
        layer_index,
        total_weights: altered.len(),
        altered_count,
        altered_fraction: altered_count as f64 / altered.len() as f64,
        altered_magnitude_histogram: histogram,
        histogram_edges: edges,
        altered,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    /// bins + 1 edges, uniform over [min, max].
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Counts restricted to altered positions; zeros when no mask was given.
    pub overlay: Vec<usize>,
}

/// Uniform bin edges over the value range; a constant input widens the range
/// by 1e-6 so every value still lands in a real bin.
fn bin_edges(values: &[f64], bins: usize) -> (Vec<f64>, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        lo -= 5e-7;
        hi += 5e-7;
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    (edges, width)
}

fn bin_of(value: f64, edges: &[f64]) -> usize {
    let bins = edges.len() - 1;
    let lo = edges[0];
    let hi = edges[bins];
    let idx = ((value - lo) / (hi - lo) * bins as f64) as usize;
    idx.min(bins - 1)
}

/// Histogram of full-precision weights with an optional overlay counting the
/// altered positions per bin.
pub fn weight_histogram<T: Element>(
    weights: &Tensor<T>,
    altered: Option<&[bool]>,
    bins: usize,
) -> Result<Histogram> {
    if bins < 2 {
        return Err(DcqError::Config("histogram needs at least 2 bins".into()));
    }
    if weights.is_empty() {
        return Err(DcqError::Empty("histogram of empty tensor".into()));
    }
    if let Some(mask) = altered {
        if mask.len() != weights.len() {
            return Err(DcqError::Shape("altered mask length mismatch".into()));
        }
    }
    let values: Vec<f64> = weights.data().iter().map(|w| w.to_f64_()).collect();
    let (edges, _) = bin_edges(&values, bins);
    let mut counts = vec![0usize; bins];
    let mut overlay = vec![0usize; bins];
    for (i, &v) in values.iter().enumerate() {
        let b = bin_of(v, &edges);
        counts[b] += 1;
        if altered.map_or(false, |m| m[i]) {
            overlay[b] += 1;
        }
    }
    Ok(Histogram { edges, counts, overlay })
}

/// Elementwise (unreduced) loss between the teacher's and student's section
/// output feature maps for one input. Errors when the section output has no
/// spatial extent.
pub fn fmap_loss_grid<T: Element>(
    teacher: &Network<T>,
    student: &Network<T>,
    x: &Tensor<T>,
    plan: &SplitPlan,
    section_index: usize,
    spec: LossSpec,
) -> Result<Tensor<T>> {
    let range = plan.section_range(section_index)?;
    let end = range.end - 1;
    let (_, cap_t) = teacher.forward_captured(x, &[end])?;
    let (_, cap_s) = student.forward_captured(x, &[end])?;
    let a_fp = cap_t.into_values().next().expect("captured");
    let a_q = cap_s.into_values().next().expect("captured");
    if a_fp.shape().len() < 3 {
        return Err(DcqError::Shape(format!(
            "section {section_index} output {:?} is not spatial",
            a_fp.shape()
        )));
    }
    elementwise_loss(spec, &a_fp, &a_q)
}

/// Per-element loss with no reduction; summing it and dividing by the element
/// count reproduces `regression_loss`.
pub fn elementwise_loss<T: Element>(
    spec: LossSpec,
    y: &Tensor<T>,
    yhat: &Tensor<T>,
) -> Result<Tensor<T>> {
    if y.shape() != yhat.shape() {
        return Err(DcqError::Shape("elementwise loss shape mismatch".into()));
    }
    let half = T::from_f64(0.5);
    let delta = T::from_f64(spec.huber_delta);
    let data = y
        .data()
        .iter()
        .zip(yhat.data())
        .map(|(&t, &p)| {
            let r = p - t;
            match spec.kind {
                LossKind::Mse => r * r,
                LossKind::Mae => r.abs(),
                LossKind::Huber => {
                    if r.abs() <= delta {
                        half * r * r
                    } else {
                        delta * r.abs() - half * delta * delta
                    }
                }
            }
        })
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// Writes `{run_id}/{layer}.{stat}.csv` under `out_dir`, creating directories
/// as needed; returns the file path.
fn stat_path(out_dir: &Path, run_id: &str, layer: usize, stat: &str) -> Result<std::path::PathBuf> {
    let dir = out_dir.join(run_id);
    std::fs::create_dir_all(&dir)?;
    Ok(dir.join(format!("layer{layer}.{stat}.csv")))
}

pub fn write_flip_stats_csv(out_dir: &Path, run_id: &str, stats: &FlipStats) -> Result<std::path::PathBuf> {
    let path = stat_path(out_dir, run_id, stats.layer_index, "flips")?;
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "bin_lo,bin_hi,altered_count")?;
    for (i, &count) in stats.altered_magnitude_histogram.iter().enumerate() {
        writeln!(f, "{},{},{}", stats.histogram_edges[i], stats.histogram_edges[i + 1], count)?;
    }
    writeln!(f, "# total_weights={} altered={} fraction={}", stats.total_weights, stats.altered_count, stats.altered_fraction)?;
    Ok(path)
}

pub fn write_histogram_csv(
    out_dir: &Path,
    run_id: &str,
    layer: usize,
    hist: &Histogram,
) -> Result<std::path::PathBuf> {
    let path = stat_path(out_dir, run_id, layer, "hist")?;
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "bin_lo,bin_hi,count,altered_count")?;
    for i in 0..hist.counts.len() {
        writeln!(f, "{},{},{},{}", hist.edges[i], hist.edges[i + 1], hist.counts[i], hist.overlay[i])?;
    }
    Ok(path)
}

pub fn write_fmap_csv<T: Element>(
    out_dir: &Path,
    run_id: &str,
    layer: usize,
    grid: &Tensor<T>,
) -> Result<std::path::PathBuf> {
    let path = stat_path(out_dir, run_id, layer, "fmap_loss")?;
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "channel,row,col,loss")?;
    let shape = grid.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    for ch in 0..c {
        for row in 0..h {
            for col in 0..w {
                let v = grid.data()[(ch * h + row) * w + col].to_f64_();
                writeln!(f, "{ch},{row},{col},{v}")?;
            }
        }
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_levels_mean_zero_flips() {
        let w = Tensor::<f64>::vector(&[0.5, -0.3, 0.8, -0.1]);
        let s = flip_stats(&w, &w, Scheme::Binary, 0).unwrap();
        assert_eq!(s.altered_count, 0);
        assert_eq!(s.altered_fraction, 0.0);
    }

    #[test]
    fn negated_weights_flip_everything() {
        let w = Tensor::<f64>::vector(&[0.5, -0.3, 0.8, -0.1]);
        let neg = w.map(|x| -x);
        let s = flip_stats(&w, &neg, Scheme::Binary, 0).unwrap();
        assert_eq!(s.altered_fraction, 1.0);
    }

    #[test]
    fn scale_drift_is_not_an_alteration() {
        let w = Tensor::<f64>::vector(&[0.5, -0.3, 0.8, -0.1]);
        let scaled = w.map(|x| x * 3.0);
        let s = flip_stats(&w, &scaled, Scheme::Binary, 0).unwrap();
        assert_eq!(s.altered_count, 0);
        let st = flip_stats(&w, &scaled, Scheme::Ternary, 0).unwrap();
        assert_eq!(st.altered_count, 0);
    }

    #[test]
    fn ternary_level_change_detected() {
        let teacher = Tensor::<f64>::vector(&[1.0, -1.0, 0.01, 0.9]);
        let trained = Tensor::<f64>::vector(&[1.0, -1.0, 0.95, 0.9]); // dead zone -> +1
        let s = flip_stats(&teacher, &trained, Scheme::Ternary, 0).unwrap();
        assert_eq!(s.altered_count, 1);
    }

    #[test]
    fn histogram_conserves_counts() {
        let w = Tensor::<f64>::vector(&[-1.0, 1.0]);
        let h = weight_histogram(&w, None, 2).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
        assert_eq!(h.overlay, vec![0, 0]);
        let mut rng = crate::rng::SplitMix64::new(5);
        let big =
            Tensor::<f64>::vector(&(0..500).map(|_| rng.uniform(-2.0, 2.0)).collect::<Vec<_>>());
        let h = weight_histogram(&big, None, 7).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 500);
    }

    #[test]
    fn constant_tensor_widens_range() {
        let w = Tensor::<f64>::vector(&[0.25; 10]);
        let h = weight_histogram(&w, None, 4).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 10);
        assert!(h.edges[0] < 0.25 && *h.edges.last().unwrap() > 0.25);
    }

    #[test]
    fn elementwise_mse_matches_reduction() {
        let y = Tensor::<f64>::vector(&[1.0, 2.0, 3.0]);
        let yhat = Tensor::<f64>::vector(&[1.5, 2.0, 0.0]);
        let grid = elementwise_loss(LossSpec::mse(), &y, &yhat).unwrap();
        let (reduced, _) = crate::distill::regression_loss(LossSpec::mse(), &y, &yhat).unwrap();
        let total: f64 = grid.data().iter().sum();
        assert!((total / 3.0 - reduced).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_grid_is_c_squared() {
        let y = Tensor::<f64>::filled(&[2, 2], 1.0);
        let yhat = Tensor::<f64>::filled(&[2, 2], 3.0);
        let grid = elementwise_loss(LossSpec::mse(), &y, &yhat).unwrap();
        assert!(grid.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }
}
