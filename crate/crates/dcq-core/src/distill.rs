//! Sectional regression training: each quantized section learns to reproduce
//! the teacher section's output activations.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{DcqError, Result};
use crate::network::Network;
use crate::optim::{OptConfig, SgdMomentum};
use crate::quant::QuantConfig;
use crate::rng::{derive_seed, SplitMix64};
use crate::section::{
    build_subnet, build_subnet_chained, merge_sections, SectionWeights, SplitPlan, Subnet,
};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
    Huber,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Only meaningful for Huber.
    pub huber_delta: f64,
}

impl LossSpec {
    pub fn mse() -> Self {
        Self { kind: LossKind::Mse, huber_delta: 1.0 }
    }
    pub fn mae() -> Self {
        Self { kind: LossKind::Mae, huber_delta: 1.0 }
    }
    pub fn huber(delta: f64) -> Self {
        Self { kind: LossKind::Huber, huber_delta: delta }
    }
}

/// Loss value and gradient with respect to the prediction.
///
/// With r = yhat - y and n the element count:
///   mse   = mean(r^2)
///   mae   = mean(|r|)
///   huber = mean(r^2 / 2          if |r| <= delta,
///                delta|r| - delta^2 / 2  otherwise)
pub fn regression_loss<T: Element>(
    spec: LossSpec,
    y: &Tensor<T>,
    yhat: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    if y.shape() != yhat.shape() {
        return Err(DcqError::Shape(format!(
            "loss shapes {:?} vs {:?}",
            y.shape(),
            yhat.shape()
        )));
    }
    let n = T::from_f64(y.len() as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); y.len()];
    match spec.kind {
        LossKind::Mse => {
            let two = T::from_f64(2.0);
            for (g, (&t, &p)) in grad.iter_mut().zip(y.data().iter().zip(yhat.data())) {
                let r = p - t;
                total = total + r * r;
                *g = two * r / n;
            }
        }
        LossKind::Mae => {
            for (g, (&t, &p)) in grad.iter_mut().zip(y.data().iter().zip(yhat.data())) {
                let r = p - t;
                total = total + r.abs();
                *g = if r > T::zero() {
                    T::one() / n
                } else if r < T::zero() {
                    -T::one() / n
                } else {
                    T::zero()
                };
            }
        }
        LossKind::Huber => {
            if spec.huber_delta <= 0.0 {
                return Err(DcqError::Config("huber delta must be positive".into()));
            }
            let delta = T::from_f64(spec.huber_delta);
            let half = T::from_f64(0.5);
            for (g, (&t, &p)) in grad.iter_mut().zip(y.data().iter().zip(yhat.data())) {
                let r = p - t;
                if r.abs() <= delta {
                    total = total + half * r * r;
                    *g = r / n;
                } else {
                    total = total + delta * r.abs() - half * delta * delta;
                    *g = delta * r.signum() / n;
                }
            }
        }
    }
    let loss = (total / n).to_f64_();
    Ok((loss, Tensor::new(y.shape().to_vec(), grad)?))
}

/// Post-section activations of the teacher and the subnet for the same input.
pub fn capture_pair<T: Element>(
    teacher: &Network<T>,
    subnet: &Subnet<T>,
    x: &Tensor<T>,
    section_end_index: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if section_end_index + 1 != subnet.net.len() {
        return Err(DcqError::Config(format!(
            "section_end_index {section_end_index} does not terminate the subnet ({} layers)",
            subnet.net.len()
        )));
    }
    let (_, captured) = teacher.forward_captured(x, &[section_end_index])?;
    let a_fp = captured.into_values().next().expect("requested capture present");
    let a_q = subnet.net.forward(x)?;
    Ok((a_fp, a_q))
}

/// One per-step training record, persisted through the metrics sink.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub section: usize,
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub opt: OptConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Record a TrainRecord every this many steps (and always the last step).
    pub record_every: usize,
    /// Overrides the epoch-derived step budget when nonzero.
    pub max_steps: usize,
}

impl TrainConfig {
    pub fn total_steps(&self, dataset_len: usize) -> usize {
        if self.max_steps > 0 {
            return self.max_steps;
        }
        let per_epoch = dataset_len.div_ceil(self.batch_size);
        per_epoch * self.epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Sections train concurrently against the full-precision teacher prefix.
    Parallel,
    /// Same computation, one section at a time. Bit-identical to Parallel.
    Sequential,
    /// Prefixes use the previously trained quantized sections (comparison mode).
    SequentialChained,
}

/// Stepwise trainer for one section. The frozen prefix never changes during
/// training, so prefix outputs and teacher targets are computed once up front;
/// each step then only runs the section layers.
pub struct SectionTrainer<T: Element> {
    section_index: usize,
    /// Section layers, quantized and trainable; inputs are prefix outputs.
    section_net: Network<T>,
    /// Layer index of the section start within the teacher.
    section_start: usize,
    quant: QuantConfig,
    prefix_out: Tensor<T>,
    targets: Tensor<T>,
    spec: LossSpec,
    opt: SgdMomentum<T>,
    batch_size: usize,
    record_every: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    seed: u64,
    step: usize,
    total_steps: usize,
    records: Vec<TrainRecord>,
    started: Instant,
}

impl<T: Element> SectionTrainer<T> {
    pub fn new(
        teacher: &Network<T>,
        subnet: &Subnet<T>,
        inputs: &Tensor<T>,
        spec: LossSpec,
        config: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let n = inputs.batch_size();
        if n == 0 {
            return Err(DcqError::Empty("training dataset is empty".into()));
        }
        if config.batch_size == 0 || config.epochs == 0 {
            return Err(DcqError::Config("batch size and epochs must be positive".into()));
        }
        let range = subnet.section_range.clone();

        // Prefix outputs from the subnet itself (its prefix is frozen), then
        // teacher targets by running the FP section layers on them.
        let prefix_out = if range.start == 0 {
            inputs.clone()
        } else {
            forward_sub_chain(&subnet.net, 0..range.start, inputs)?
        };
        let targets = forward_sub_chain(teacher, range.clone(), &prefix_out)?;

        let section_layers = subnet.net.layers()[range.clone()].to_vec();
        let in_shape = prefix_out.shape()[1..].to_vec();
        let section_net = Network::new(in_shape, section_layers)?;

        let total_steps = config.total_steps(n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = SplitMix64::new(derive_seed(seed, 0));
        rng.shuffle(&mut order);

        Ok(Self {
            section_index: subnet.section_index,
            section_net,
            section_start: range.start,
            quant: subnet.quant,
            prefix_out,
            targets,
            spec,
            opt: SgdMomentum::new(config.opt, total_steps),
            batch_size: config.batch_size,
            record_every: config.record_every.max(1),
            order,
            cursor: 0,
            epoch: 0,
            seed,
            step: 0,
            total_steps,
            records: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn steps_remaining(&self) -> usize {
        self.total_steps - self.step
    }

    pub fn section_index(&self) -> usize {
        self.section_index
    }

    /// Runs one minibatch step; returns the step's loss, or `None` once the
    /// budget is exhausted.
    pub fn step(&mut self) -> Result<Option<f64>> {
        if self.step >= self.total_steps {
            return Ok(None);
        }
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            let mut rng = SplitMix64::new(derive_seed(self.seed, self.epoch as u64));
            rng.shuffle(&mut self.order);
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch_idx = &self.order[self.cursor..end];
        self.cursor = end;

        let x = gather_batch(&self.prefix_out, batch_idx)?;
        let y = gather_batch(&self.targets, batch_idx)?;

        let trace = self.section_net.forward_trace(&x)?;
        let yhat = trace.activations.last().unwrap();
        let (loss, grad) = regression_loss(self.spec, &y, yhat)?;
        if !loss.is_finite() {
            return Err(DcqError::Diverged { section: self.section_index, step: self.step });
        }
        let grads = self.section_net.backward(&trace, &grad)?;
        self.opt.apply(&mut self.section_net, &grads)?;

        self.step += 1;
        if self.step % self.record_every == 0 || self.step == self.total_steps {
            self.records.push(TrainRecord {
                section: self.section_index,
                step: self.step,
                loss,
                accuracy: None,
                wall_ms: self.started.elapsed().as_millis() as u64,
            });
        }
        Ok(Some(loss))
    }

    /// Current latent weights of the section, teacher-indexed.
    pub fn section_weights(&self) -> SectionWeights<T> {
        let params = (0..self.section_net.len())
            .filter(|&i| self.section_net.layer(i).has_params())
            .map(|i| {
                let l = self.section_net.layer(i);
                (i + self.section_start, l.weight().unwrap().clone(), l.bias().unwrap().clone())
            })
            .collect();
        SectionWeights { section_index: self.section_index, quant: self.quant, params }
    }

    pub fn finish(mut self) -> Result<(SectionWeights<T>, Vec<TrainRecord>)> {
        while self.step()?.is_some() {}
        let weights = self.section_weights();
        Ok((weights, self.records))
    }
}

/// Runs a contiguous layer range on a batched input.
fn forward_sub_chain<T: Element>(
    net: &Network<T>,
    range: std::ops::Range<usize>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut current = x.clone();
    for i in range {
        current = net.layer(i).apply_batch(&current)?;
        if !current.all_finite() {
            return Err(DcqError::NonFinite { layer: i, context: "forward output".into() });
        }
    }
    Ok(current)
}

use crate::network::gather_items as gather_batch;

/// Trains one section to completion.
pub fn train_section<T: Element>(
    teacher: &Network<T>,
    subnet: &Subnet<T>,
    inputs: &Tensor<T>,
    spec: LossSpec,
    config: TrainConfig,
    seed: u64,
) -> Result<(SectionWeights<T>, Vec<TrainRecord>)> {
    SectionTrainer::new(teacher, subnet, inputs, spec, config, seed)?.finish()
}

/// The full training procedure: build one subnet per section, train each by
/// matching the teacher's section outputs on `inputs`, then merge. Parallel
/// and Sequential modes produce bit-identical results for the same seeds
/// because every section's training is a pure function of (teacher, inputs,
/// plan, section, config, seed).
pub fn dcq_train<T: Element>(
    teacher: &Network<T>,
    inputs: &Tensor<T>,
    plan: &SplitPlan,
    quant: QuantConfig,
    spec: LossSpec,
    config: TrainConfig,
    mode: TrainMode,
    base_seed: u64,
) -> Result<(Network<T>, Vec<TrainRecord>)> {
    let m = plan.section_count();
    let section_seed = |i: usize| derive_seed(base_seed, i as u64);
    let in_section = |i: usize, e: DcqError| match e {
        e @ DcqError::Diverged { .. } => e,
        e => DcqError::State(format!("section {i}: {e}")),
    };

    let mut trained: Vec<SectionWeights<T>> = Vec::with_capacity(m);
    let mut records: Vec<TrainRecord> = Vec::new();

    match mode {
        TrainMode::Parallel => {
            let results: Vec<Result<(SectionWeights<T>, Vec<TrainRecord>)>> =
                std::thread::scope(|scope| {
                    let handles: Vec<_> = (1..=m)
                        .map(|i| {
                            scope.spawn(move || {
                                let subnet = build_subnet(teacher, plan, i, quant)?;
                                train_section(teacher, &subnet, inputs, spec, config, section_seed(i))
                            })
                        })
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("section thread panicked")).collect()
                });
            for (i, result) in results.into_iter().enumerate() {
                let (weights, recs) = result.map_err(|e| in_section(i + 1, e))?;
                trained.push(weights);
                records.extend(recs);
            }
        }
        TrainMode::Sequential => {
            for i in 1..=m {
                let subnet = build_subnet(teacher, plan, i, quant).map_err(|e| in_section(i, e))?;
                let (weights, recs) =
                    train_section(teacher, &subnet, inputs, spec, config, section_seed(i))
                        .map_err(|e| in_section(i, e))?;
                trained.push(weights);
                records.extend(recs);
            }
        }
        TrainMode::SequentialChained => {
            for i in 1..=m {
                let subnet = build_subnet_chained(teacher, plan, i, quant, &trained)
                    .map_err(|e| in_section(i, e))?;
                let (weights, recs) =
                    train_section(teacher, &subnet, inputs, spec, config, section_seed(i))
                        .map_err(|e| in_section(i, e))?;
                trained.push(weights);
                records.extend(recs);
            }
        }
    }

    let merged = merge_sections(&trained, plan, teacher)?;
    Ok((merged, records))
}
