//! Feed-forward network: an ordered layer list with shape validation at
//! construction, deterministic forward evaluation, and reverse-mode gradients.

use std::collections::BTreeMap;

use crate::error::{DcqError, Result};
use crate::layer::Layer;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct Network<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

/// Gradients per parameterized, non-frozen layer index.
pub type GradMap<T> = BTreeMap<usize, (Tensor<T>, Tensor<T>)>;

/// Intermediates captured by a training forward pass: `activations[0]` is the
/// (batched) input and `activations[i + 1]` the output of layer `i`;
/// `eff_weights[i]` is the weight tensor layer `i` actually evaluated with.
pub struct ForwardTrace<T> {
    pub activations: Vec<Tensor<T>>,
    pub eff_weights: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Network<T> {
    /// Validates layer-to-layer shape compatibility; impossible geometry
    /// (e.g. a kernel larger than its input) is rejected here.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(DcqError::Config("network needs at least one layer".into()));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .out_shape(&shape)
                .map_err(|e| DcqError::Config(format!("layer {i}: {e}")))?;
        }
        Ok(Self { input_shape, layers })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Layer<T> {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Layer<T> {
        &mut self.layers[i]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Output shape of layer `i` for an unbatched input.
    pub fn shape_after(&self, i: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for layer in &self.layers[..=i] {
            shape = layer.out_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shape_after(self.len() - 1).expect("validated at construction")
    }

    /// Indices of parameterized (dense/conv) layers, in order.
    pub fn param_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, _)| i)
            .collect()
    }

    /// Attaches a quant config to every parameterized layer in `range`.
    pub fn set_quant(&mut self, range: std::ops::Range<usize>, cfg: Option<crate::quant::QuantConfig>) {
        for i in range {
            if self.layers[i].has_params() {
                self.layers[i].quant = cfg;
            }
        }
    }

    pub fn set_frozen(&mut self, range: std::ops::Range<usize>, frozen: bool) {
        for i in range {
            self.layers[i].frozen = frozen;
        }
    }

    /// Accepts either an unbatched input (`shape == input_shape`) or a batched
    /// one (`[n] ++ input_shape`); returns the batched tensor and whether the
    /// batch axis was added.
    fn batched_input(&self, x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
        if x.shape() == self.input_shape.as_slice() {
            let mut shape = vec![1];
            shape.extend_from_slice(&self.input_shape);
            Ok((x.reshaped(&shape)?, true))
        } else if x.shape().len() == self.input_shape.len() + 1
            && &x.shape()[1..] == self.input_shape.as_slice()
        {
            Ok((x.clone(), false))
        } else {
            Err(DcqError::Shape(format!(
                "input {:?} does not match network input {:?}",
                x.shape(),
                self.input_shape
            )))
        }
    }

    fn check_finite(&self, t: &Tensor<T>, layer: usize, context: &str) -> Result<()> {
        if t.all_finite() {
            Ok(())
        } else {
            Err(DcqError::NonFinite { layer, context: context.into() })
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_captured(x, &[])?.0)
    }

    /// Forward pass that also returns the post-layer outputs at the requested
    /// layer indices. Quantized layers evaluate with quantized weights.
    pub fn forward_captured(
        &self,
        x: &Tensor<T>,
        capture: &[usize],
    ) -> Result<(Tensor<T>, BTreeMap<usize, Tensor<T>>)> {
        for &c in capture {
            if c >= self.len() {
                return Err(DcqError::Config(format!(
                    "capture index {c} out of range for {} layers",
                    self.len()
                )));
            }
        }
        let (mut current, added_batch) = self.batched_input(x)?;
        self.check_finite(&current, 0, "input")?;
        let mut captured = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            current = layer.apply_batch(&current)?;
            self.check_finite(&current, i, "forward output")?;
            if capture.contains(&i) {
                captured.insert(i, maybe_unbatch(&current, added_batch)?);
            }
        }
        Ok((maybe_unbatch(&current, added_batch)?, captured))
    }

    /// Training forward: stores every intermediate activation and the
    /// effective weights each layer used, for a subsequent [`backward`].
    /// The input must be batched.
    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let (current, added_batch) = self.batched_input(x)?;
        if added_batch {
            return Err(DcqError::Shape("forward_trace requires a batched input".into()));
        }
        self.check_finite(&current, 0, "input")?;
        let mut activations = Vec::with_capacity(self.len() + 1);
        let mut eff_weights = Vec::with_capacity(self.len());
        activations.push(current);
        for (i, layer) in self.layers.iter().enumerate() {
            let w = layer.effective_weight()?;
            let out = layer.forward_with_weights(activations.last().unwrap(), w.as_ref())?;
            self.check_finite(&out, i, "forward output")?;
            activations.push(out);
            eff_weights.push(w);
        }
        Ok(ForwardTrace { activations, eff_weights })
    }

    /// Reverse-mode gradients for every non-frozen parameterized layer.
    /// `loss_grad` is dLoss/dOutput for the trace's final activation.
    pub fn backward(&self, trace: &ForwardTrace<T>, loss_grad: &Tensor<T>) -> Result<GradMap<T>> {
        if trace.activations.len() != self.len() + 1 {
            return Err(DcqError::State(format!(
                "trace has {} activations, network needs {} (was forward run on this network?)",
                trace.activations.len(),
                self.len() + 1
            )));
        }
        let output = trace.activations.last().unwrap();
        if loss_grad.shape() != output.shape() {
            return Err(DcqError::Shape(format!(
                "loss grad {:?} does not match output {:?}",
                loss_grad.shape(),
                output.shape()
            )));
        }
        // Everything below the lowest trainable layer needs no gradient.
        let lowest_trainable = self
            .layers
            .iter()
            .enumerate()
            .find(|(_, l)| l.has_params() && !l.frozen)
            .map(|(i, _)| i)
            .unwrap_or(self.len());

        let mut grads = GradMap::new();
        let mut grad = loss_grad.clone();
        for i in (lowest_trainable..self.len()).rev() {
            let layer = &self.layers[i];
            let (dx, param_grads) = layer.backward_batch(
                &trace.activations[i],
                &trace.activations[i + 1],
                &grad,
                trace.eff_weights[i].as_ref(),
            )?;
            if let Some(pg) = param_grads {
                grads.insert(i, pg);
            }
            if i == lowest_trainable {
                break;
            }
            grad = dx;
        }
        Ok(grads)
    }

    /// Classification accuracy: fraction of items whose argmax output matches
    /// the label. Ties break toward the lowest index.
    pub fn evaluate(&self, inputs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let n = inputs.batch_size();
        if n == 0 || labels.is_empty() {
            return Err(DcqError::Empty("evaluate on an empty dataset".into()));
        }
        if n != labels.len() {
            return Err(DcqError::Shape(format!("{n} inputs vs {} labels", labels.len())));
        }
        let out_dim: usize = self.output_shape().iter().product();
        for &label in labels {
            if label >= out_dim {
                return Err(DcqError::Config(format!(
                    "label {label} out of range for {out_dim} outputs"
                )));
            }
        }
        let mut correct = 0usize;
        let chunk = 256usize;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let batch = slice_batch(inputs, start, end)?;
            let out = self.forward(&batch)?;
            let od = out.data();
            for (row, &label) in (start..end).zip(&labels[start..end]) {
                let r = row - start;
                let logits = &od[r * out_dim..(r + 1) * out_dim];
                if argmax(logits) == label {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }

    pub fn to_f64(&self) -> Network<f64> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(convert_layer::<T, f64>).collect(),
        }
    }

    pub fn to_f32(&self) -> Network<f32> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(convert_layer::<T, f32>).collect(),
        }
    }
}

/// First index achieving the maximum.
pub fn argmax<T: Element>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn maybe_unbatch<T: Element>(t: &Tensor<T>, added_batch: bool) -> Result<Tensor<T>> {
    if added_batch {
        t.batch_item(0)
    } else {
        Ok(t.clone())
    }
}

/// Copies the given items of a batched tensor into a new batch.
pub fn gather_items<T: Element>(t: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let n = t.batch_size();
    if n == 0 {
        return Err(DcqError::Empty("gather from an empty batch".into()));
    }
    let item_len = t.len() / n;
    let mut data = Vec::with_capacity(indices.len() * item_len);
    for &i in indices {
        if i >= n {
            return Err(DcqError::Shape(format!("batch index {i} out of {n}")));
        }
        data.extend_from_slice(&t.data()[i * item_len..(i + 1) * item_len]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data)
}

/// Copies items [start, end) of a batched tensor.
pub fn slice_batch<T: Element>(t: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let n = t.batch_size();
    if start >= end || end > n {
        return Err(DcqError::Shape(format!("batch slice {start}..{end} out of {n}")));
    }
    let item_len = t.len() / n;
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * item_len..end * item_len].to_vec())
}

fn convert_layer<S: Element, D: Element>(layer: &Layer<S>) -> Layer<D> {
    use crate::layer::LayerOp;
    let convert = |t: &Tensor<S>| -> Tensor<D> {
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| D::from_f64(x.to_f64_())).collect())
            .expect("same shape")
    };
    let op = match &layer.op {
        LayerOp::Dense { weight, bias } => {
            LayerOp::Dense { weight: convert(weight), bias: convert(bias) }
        }
        LayerOp::Conv2d { weight, bias, stride, padding } => LayerOp::Conv2d {
            weight: convert(weight),
            bias: convert(bias),
            stride: *stride,
            padding: *padding,
        },
        LayerOp::Relu => LayerOp::Relu,
        LayerOp::Tanh => LayerOp::Tanh,
        LayerOp::MaxPool2d { kernel, stride } => {
            LayerOp::MaxPool2d { kernel: *kernel, stride: *stride }
        }
        LayerOp::Flatten => LayerOp::Flatten,
        LayerOp::Softmax => LayerOp::Softmax,
    };
    Layer { op, quant: layer.quant, frozen: layer.frozen, block: layer.block }
}
