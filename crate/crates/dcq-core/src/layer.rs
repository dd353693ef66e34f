//! Network layers: construction, shape inference, batched forward, and the
//! hand-written backward pass for each kind.
//!
//! Parameterized layers hold full-precision ("latent") weights. When a layer
//! carries a [`QuantConfig`], every forward evaluates with quantized weights
//! and the backward pass routes the weight gradient through the straight-
//! through estimator back to the latent weights.

use serde::{Deserialize, Serialize};

use crate::error::{DcqError, Result};
use crate::quant::{QuantConfig, Scheme};
use crate::rng::SplitMix64;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    Tanh,
    MaxPool2d,
    Flatten,
    Softmax,
}

#[derive(Debug, Clone)]
pub enum LayerOp<T> {
    Dense {
        /// `[out_dim, in_dim]`
        weight: Tensor<T>,
        /// `[out_dim]`
        bias: Tensor<T>,
    },
    Conv2d {
        /// `[out_ch, in_ch, kh, kw]`
        weight: Tensor<T>,
        /// `[out_ch]`
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    Relu,
    Tanh,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Softmax,
}

#[derive(Debug, Clone)]
pub struct Layer<T> {
    pub op: LayerOp<T>,
    pub quant: Option<QuantConfig>,
    pub frozen: bool,
    /// Optional block tag used by the `per_block` split policy.
    pub block: Option<usize>,
}

/// Weight init: uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) drawn from a seeded
/// splitmix64 stream, generated in f64 and cast, so the same seed produces the
/// same network in both precisions. Biases start at zero.
fn he_uniform<T: Element>(shape: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut rng = SplitMix64::new(seed);
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.uniform(-limit, limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape is valid")
}

impl<T: Element> Layer<T> {
    fn from_op(op: LayerOp<T>) -> Self {
        Self { op, quant: None, frozen: false, block: None }
    }

    pub fn dense(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(DcqError::Config("dense dims must be positive".into()));
        }
        Ok(Self::from_op(LayerOp::Dense {
            weight: he_uniform(&[out_dim, in_dim], in_dim, seed),
            bias: Tensor::zeros(&[out_dim]),
        }))
    }

    pub fn conv2d(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        seed: u64,
    ) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
            return Err(DcqError::Config("conv2d dims and stride must be positive".into()));
        }
        let fan_in = in_ch * kernel * kernel;
        Ok(Self::from_op(LayerOp::Conv2d {
            weight: he_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, seed),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }))
    }

    pub fn relu() -> Self {
        Self::from_op(LayerOp::Relu)
    }

    pub fn tanh() -> Self {
        Self::from_op(LayerOp::Tanh)
    }

    pub fn maxpool2d(kernel: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(DcqError::Config("maxpool kernel and stride must be positive".into()));
        }
        Ok(Self::from_op(LayerOp::MaxPool2d { kernel, stride }))
    }

    pub fn flatten() -> Self {
        Self::from_op(LayerOp::Flatten)
    }

    pub fn softmax() -> Self {
        Self::from_op(LayerOp::Softmax)
    }

    pub fn with_block(mut self, block: usize) -> Self {
        self.block = Some(block);
        self
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            LayerOp::Dense { .. } => LayerKind::Dense,
            LayerOp::Conv2d { .. } => LayerKind::Conv2d,
            LayerOp::Relu => LayerKind::Relu,
            LayerOp::Tanh => LayerKind::Tanh,
            LayerOp::MaxPool2d { .. } => LayerKind::MaxPool2d,
            LayerOp::Flatten => LayerKind::Flatten,
            LayerOp::Softmax => LayerKind::Softmax,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.op, LayerOp::Dense { .. } | LayerOp::Conv2d { .. })
    }

    pub fn weight(&self) -> Option<&Tensor<T>> {
        match &self.op {
            LayerOp::Dense { weight, .. } | LayerOp::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        match &self.op {
            LayerOp::Dense { bias, .. } | LayerOp::Conv2d { bias, .. } => Some(bias),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut Tensor<T>, &mut Tensor<T>)> {
        match &mut self.op {
            LayerOp::Dense { weight, bias } | LayerOp::Conv2d { weight, bias, .. } => {
                Some((weight, bias))
            }
            _ => None,
        }
    }

    pub fn set_params(&mut self, weight: Tensor<T>, bias: Tensor<T>) -> Result<()> {
        match &mut self.op {
            LayerOp::Dense { weight: w, bias: b } | LayerOp::Conv2d { weight: w, bias: b, .. } => {
                if w.shape() != weight.shape() || b.shape() != bias.shape() {
                    return Err(DcqError::Shape(format!(
                        "set_params: expected {:?}/{:?}, got {:?}/{:?}",
                        w.shape(),
                        b.shape(),
                        weight.shape(),
                        bias.shape()
                    )));
                }
                *w = weight;
                *b = bias;
                Ok(())
            }
            _ => Err(DcqError::State("set_params on a parameterless layer".into())),
        }
    }

    /// The weights actually used by forward: quantized when a quant config is
    /// attached, the latent weights otherwise.
    pub fn effective_weight(&self) -> Result<Option<Tensor<T>>> {
        match (self.weight(), self.quant) {
            (Some(w), Some(cfg)) => Ok(Some(cfg.apply(w)?)),
            (Some(w), None) => Ok(Some(w.clone())),
            (None, _) => Ok(None),
        }
    }

    /// Output shape for an unbatched input shape; errors on impossible
    /// geometry, which is how invalid constructions are rejected.
    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match &self.op {
            LayerOp::Dense { weight, .. } => {
                let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
                if in_shape != [in_dim] {
                    return Err(DcqError::Shape(format!(
                        "dense expects input [{in_dim}], got {in_shape:?}"
                    )));
                }
                Ok(vec![out_dim])
            }
            LayerOp::Conv2d { weight, stride, padding, .. } => {
                let (out_ch, in_ch, kh, kw) =
                    (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
                if in_shape.len() != 3 || in_shape[0] != in_ch {
                    return Err(DcqError::Shape(format!(
                        "conv2d expects input [{in_ch}, h, w], got {in_shape:?}"
                    )));
                }
                let (h, w) = (in_shape[1] + 2 * padding, in_shape[2] + 2 * padding);
                if h < kh || w < kw {
                    return Err(DcqError::Config(format!(
                        "conv2d kernel {kh}x{kw} larger than padded input {h}x{w}"
                    )));
                }
                Ok(vec![out_ch, (h - kh) / stride + 1, (w - kw) / stride + 1])
            }
            LayerOp::Relu | LayerOp::Tanh => Ok(in_shape.to_vec()),
            LayerOp::MaxPool2d { kernel, stride } => {
                if in_shape.len() != 3 {
                    return Err(DcqError::Shape(format!(
                        "maxpool2d expects input [c, h, w], got {in_shape:?}"
                    )));
                }
                let (h, w) = (in_shape[1], in_shape[2]);
                if h < *kernel || w < *kernel {
                    return Err(DcqError::Config(format!(
                        "maxpool2d kernel {kernel} larger than input {h}x{w}"
                    )));
                }
                Ok(vec![in_shape[0], (h - kernel) / stride + 1, (w - kernel) / stride + 1])
            }
            LayerOp::Flatten => Ok(vec![in_shape.iter().product()]),
            LayerOp::Softmax => {
                if in_shape.is_empty() {
                    return Err(DcqError::Shape("softmax needs at least one axis".into()));
                }
                Ok(in_shape.to_vec())
            }
        }
    }

    /// Forward on a batched input (leading batch axis), quant-aware.
    pub fn apply_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = self.effective_weight()?;
        self.forward_with_weights(x, w.as_ref())
    }

    /// Forward with the given effective weights (already quantized if needed).
    pub(crate) fn forward_with_weights(
        &self,
        x: &Tensor<T>,
        weights: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let n = x.batch_size();
        if n == 0 {
            return Err(DcqError::Shape("forward on an unbatched tensor".into()));
        }
        let in_shape = &x.shape()[1..];
        let out_item_shape = self.out_shape(in_shape)?;
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&out_item_shape);

        match &self.op {
            LayerOp::Dense { bias, .. } => {
                let w = weights.expect("dense has weights");
                let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
                let mut out = vec![T::zero(); n * out_dim];
                let wd = w.data();
                let bd = bias.data();
                let xd = x.data();
                for i in 0..n {
                    let x_row = &xd[i * in_dim..(i + 1) * in_dim];
                    let o_row = &mut out[i * out_dim..(i + 1) * out_dim];
                    for (o, out_val) in o_row.iter_mut().enumerate() {
                        let w_row = &wd[o * in_dim..(o + 1) * in_dim];
                        let mut acc = bd[o];
                        for (wk, xk) in w_row.iter().zip(x_row) {
                            acc = acc + *wk * *xk;
                        }
                        *out_val = acc;
                    }
                }
                Tensor::new(out_shape, out)
            }
            LayerOp::Conv2d { bias, stride, padding, .. } => {
                let w = weights.expect("conv2d has weights");
                conv2d_forward(x, w, bias, *stride, *padding, &out_shape)
            }
            LayerOp::Relu => Ok(x.map(|v| v.max(T::zero()))),
            LayerOp::Tanh => Ok(x.map(|v| v.tanh())),
            LayerOp::MaxPool2d { kernel, stride } => {
                maxpool_forward(x, *kernel, *stride, &out_shape)
            }
            LayerOp::Flatten => x.reshaped(&out_shape),
            LayerOp::Softmax => softmax_forward(x),
        }
    }

    /// Backward on a batched pair. `input`/`output` are the tensors seen and
    /// produced by forward; `effective_w` is the weight tensor forward used.
    /// Returns the input gradient and, for non-frozen parameterized layers,
    /// the latent-weight and bias gradients (STE applied).
    pub(crate) fn backward_batch(
        &self,
        input: &Tensor<T>,
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
        effective_w: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, Option<(Tensor<T>, Tensor<T>)>)> {
        if grad_out.shape() != output.shape() {
            return Err(DcqError::Shape(format!(
                "grad shape {:?} does not match output {:?}",
                grad_out.shape(),
                output.shape()
            )));
        }
        match &self.op {
            LayerOp::Dense { weight, .. } => {
                let w = effective_w.expect("dense has weights");
                let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
                let n = input.batch_size();
                let (xd, gd, wd) = (input.data(), grad_out.data(), w.data());
                let mut dx = vec![T::zero(); n * in_dim];
                let mut dw = vec![T::zero(); out_dim * in_dim];
                let mut db = vec![T::zero(); out_dim];
                for i in 0..n {
                    let x_row = &xd[i * in_dim..(i + 1) * in_dim];
                    let g_row = &gd[i * out_dim..(i + 1) * out_dim];
                    let dx_row = &mut dx[i * in_dim..(i + 1) * in_dim];
                    for o in 0..out_dim {
                        let g = g_row[o];
                        db[o] = db[o] + g;
                        let w_row = &wd[o * in_dim..(o + 1) * in_dim];
                        let dw_row = &mut dw[o * in_dim..(o + 1) * in_dim];
                        for k in 0..in_dim {
                            dx_row[k] = dx_row[k] + g * w_row[k];
                            dw_row[k] = dw_row[k] + g * x_row[k];
                        }
                    }
                }
                let dx = Tensor::new(input.shape().to_vec(), dx)?;
                let grads = if self.frozen {
                    None
                } else {
                    let dw = Tensor::new(weight.shape().to_vec(), dw)?;
                    let dw = self.apply_ste(dw, weight);
                    Some((dw, Tensor::new(vec![out_dim], db)?))
                };
                Ok((dx, grads))
            }
            LayerOp::Conv2d { weight, stride, padding, .. } => {
                let w = effective_w.expect("conv2d has weights");
                let (dx, dw, db) = conv2d_backward(input, w, grad_out, *stride, *padding)?;
                let grads = if self.frozen {
                    None
                } else {
                    let dw = self.apply_ste(dw, weight);
                    Some((dw, db))
                };
                Ok((dx, grads))
            }
            LayerOp::Relu => {
                let dx: Vec<T> = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                Ok((Tensor::new(input.shape().to_vec(), dx)?, None))
            }
            LayerOp::Tanh => {
                let dx: Vec<T> = output
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&y, &g)| g * (T::one() - y * y))
                    .collect();
                Ok((Tensor::new(input.shape().to_vec(), dx)?, None))
            }
            LayerOp::MaxPool2d { kernel, stride } => {
                Ok((maxpool_backward(input, grad_out, *kernel, *stride)?, None))
            }
            LayerOp::Flatten => Ok((grad_out.reshaped(input.shape())?, None)),
            LayerOp::Softmax => Ok((softmax_backward(output, grad_out)?, None)),
        }
    }

    /// Straight-through estimator on the weight gradient: identity for all
    /// schemes, clipped to zero where |latent w| > 1 for binary.
    fn apply_ste(&self, mut dw: Tensor<T>, latent: &Tensor<T>) -> Tensor<T> {
        if let Some(cfg) = &self.quant {
            if cfg.scheme == Scheme::Binary {
                for (g, &w) in dw.data_mut().iter_mut().zip(latent.data()) {
                    if w.abs() > T::one() {
                        *g = T::zero();
                    }
                }
            }
        }
        dw
    }
}

/// Unfolds one image into the [ci*kh*kw, ho*wo] patch matrix. Out-of-bounds
/// (padding) positions are zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x_item: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let spatial = ho * wo;
    for ic in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ic * kh + ky) * kw + kx) * spatial;
                for oy in 0..ho {
                    let iy = oy * stride + ky;
                    let out_row = row + oy * wo;
                    if iy < padding || iy - padding >= h {
                        cols[out_row..out_row + wo].fill(T::zero());
                        continue;
                    }
                    let x_row = (ic * h + (iy - padding)) * w;
                    for ox in 0..wo {
                        let ix = ox * stride + kx;
                        cols[out_row + ox] = if ix < padding || ix - padding >= w {
                            T::zero()
                        } else {
                            x_item[x_row + ix - padding]
                        };
                    }
                }
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[k,n], all row-major.
fn gemm_acc<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aik * bv;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Result<Tensor<T>> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let (patch, spatial) = (ci * kh * kw, ho * wo);
    let xd = x.data();
    let bd = bias.data();
    let item_in = ci * h * wd;
    let item_out = co * spatial;
    let mut out = vec![T::zero(); n * item_out];
    let mut cols = vec![T::zero(); patch * spatial];

    for i in 0..n {
        im2col(&xd[i * item_in..(i + 1) * item_in], ci, h, wd, kh, kw, stride, padding, ho, wo, &mut cols);
        let out_item = &mut out[i * item_out..(i + 1) * item_out];
        for oc in 0..co {
            out_item[oc * spatial..(oc + 1) * spatial].fill(bd[oc]);
        }
        gemm_acc(w.data(), &cols, out_item, co, patch, spatial);
    }
    Tensor::new(out_shape.to_vec(), out)
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (grad_out.shape()[2], grad_out.shape()[3]);
    let (patch, spatial) = (ci * kh * kw, ho * wo);
    let xd = x.data();
    let wv = w.data();
    let gd = grad_out.data();
    let item_in = ci * h * wd;
    let item_out = co * spatial;

    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); co];
    let mut cols = vec![T::zero(); patch * spatial];
    let mut dcols = vec![T::zero(); patch * spatial];

    for i in 0..n {
        let g_item = &gd[i * item_out..(i + 1) * item_out];
        for oc in 0..co {
            for g in &g_item[oc * spatial..(oc + 1) * spatial] {
                db[oc] = db[oc] + *g;
            }
        }

        im2col(&xd[i * item_in..(i + 1) * item_in], ci, h, wd, kh, kw, stride, padding, ho, wo, &mut cols);
        // dW[oc, r] += sum_s g[oc, s] * cols[r, s]
        for oc in 0..co {
            let g_row = &g_item[oc * spatial..(oc + 1) * spatial];
            let dw_row = &mut dw[oc * patch..(oc + 1) * patch];
            for (r, dwv) in dw_row.iter_mut().enumerate() {
                let col_row = &cols[r * spatial..(r + 1) * spatial];
                let mut acc = T::zero();
                for (g, c) in g_row.iter().zip(col_row) {
                    acc = acc + *g * *c;
                }
                *dwv = *dwv + acc;
            }
        }

        // dcols[r, s] = sum_oc w[oc, r] * g[oc, s], then fold back into dx
        dcols.fill(T::zero());
        for oc in 0..co {
            let g_row = &g_item[oc * spatial..(oc + 1) * spatial];
            let w_row = &wv[oc * patch..(oc + 1) * patch];
            for (r, &wr) in w_row.iter().enumerate() {
                let d_row = &mut dcols[r * spatial..(r + 1) * spatial];
                for (dv, &g) in d_row.iter_mut().zip(g_row) {
                    *dv = *dv + wr * g;
                }
            }
        }
        let dx_item = &mut dx[i * item_in..(i + 1) * item_in];
        for ic in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((ic * kh + ky) * kw + kx) * spatial;
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy < padding || iy - padding >= h {
                            continue;
                        }
                        let x_row = (ic * h + (iy - padding)) * wd;
                        for ox in 0..wo {
                            let ix = ox * stride + kx;
                            if ix < padding || ix - padding >= wd {
                                continue;
                            }
                            dx_item[x_row + ix - padding] =
                                dx_item[x_row + ix - padding] + dcols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![co], db)?,
    ))
}

fn maxpool_forward<T: Element>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    out_shape: &[usize],
) -> Result<Tensor<T>> {
    let (nc, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let xd = x.data();
    let mut out = vec![T::zero(); nc * ho * wo];
    for p in 0..nc {
        let x_base = p * h * w;
        let o_base = p * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = xd[x_base + (oy * stride) * w + ox * stride];
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let v = xd[x_base + (oy * stride + ky) * w + (ox * stride + kx)];
                        if v > m {
                            m = v;
                        }
                    }
                }
                out[o_base + oy * wo + ox] = m;
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out)
}

/// Routes each pooled gradient to the first maximum in scan order, matching
/// the forward tie-break.
fn maxpool_backward<T: Element>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (nc, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (grad_out.shape()[2], grad_out.shape()[3]);
    let xd = x.data();
    let gd = grad_out.data();
    let mut dx = vec![T::zero(); x.len()];
    for p in 0..nc {
        let x_base = p * h * w;
        let g_base = p * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = x_base + (oy * stride) * w + ox * stride;
                let mut m = xd[best];
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = x_base + (oy * stride + ky) * w + (ox * stride + kx);
                        if xd[idx] > m {
                            m = xd[idx];
                            best = idx;
                        }
                    }
                }
                dx[best] = dx[best] + gd[g_base + oy * wo + ox];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

fn softmax_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let row = *x.shape().last().expect("softmax input has axes");
    let mut out = x.data().to_vec();
    for chunk in out.chunks_mut(row) {
        let m = chunk.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in chunk.iter_mut() {
            *v = (*v - m).exp();
            sum = sum + *v;
        }
        for v in chunk.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn softmax_backward<T: Element>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let row = *output.shape().last().expect("softmax output has axes");
    let yd = output.data();
    let gd = grad_out.data();
    let mut dx = vec![T::zero(); yd.len()];
    for r in 0..yd.len() / row {
        let y_row = &yd[r * row..(r + 1) * row];
        let g_row = &gd[r * row..(r + 1) * row];
        let mut dot = T::zero();
        for (y, g) in y_row.iter().zip(g_row) {
            dot = dot + *y * *g;
        }
        for k in 0..row {
            dx[r * row + k] = y_row[k] * (g_row[k] - dot);
        }
    }
    Tensor::new(output.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_init_is_seeded_and_bounded() {
        let a = Layer::<f32>::dense(2, 2, 0).unwrap();
        let b = Layer::<f32>::dense(2, 2, 0).unwrap();
        assert_eq!(a.weight().unwrap(), b.weight().unwrap());
        assert_eq!(a.bias().unwrap().data(), &[0.0, 0.0]);
        let limit = (6.0f32 / 2.0).sqrt();
        for &w in a.weight().unwrap().data() {
            assert!(w.abs() < limit);
        }
        let c = Layer::<f32>::dense(2, 2, 1).unwrap();
        assert_ne!(a.weight().unwrap(), c.weight().unwrap());
    }

    #[test]
    fn relu_is_parameterless() {
        let l = Layer::<f32>::relu();
        assert!(!l.has_params());
        assert!(l.weight().is_none());
    }

    #[test]
    fn conv_kernel_larger_than_input_is_rejected() {
        let l = Layer::<f32>::conv2d(1, 1, 3, 1, 0, 0).unwrap();
        assert!(l.out_shape(&[1, 2, 2]).is_err());
        assert!(l.out_shape(&[1, 3, 3]).is_ok());
    }

    #[test]
    fn dense_identity_forward() {
        let mut l = Layer::<f32>::dense(2, 2, 0).unwrap();
        l.set_params(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let y = l.apply_batch(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_forward() {
        let l = Layer::<f32>::relu();
        let x = Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(l.apply_batch(&x).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn dense_backward_hand_checked() {
        // y = Wx, W = [[2]], x = [3], upstream grad 1 -> dW = 3, dx = 2
        let mut l = Layer::<f64>::dense(1, 1, 0).unwrap();
        l.set_params(Tensor::new(vec![1, 1], vec![2.0]).unwrap(), Tensor::zeros(&[1])).unwrap();
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let y = l.apply_batch(&x).unwrap();
        let g = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (dx, grads) = l.backward_batch(&x, &y, &g, l.effective_weight().unwrap().as_ref()).unwrap();
        let (dw, db) = grads.unwrap();
        assert_eq!(dx.data(), &[2.0]);
        assert_eq!(dw.data(), &[3.0]);
        assert_eq!(db.data(), &[1.0]);
    }

    #[test]
    fn frozen_layer_yields_no_param_grads() {
        let mut l = Layer::<f64>::dense(2, 2, 7).unwrap();
        l.frozen = true;
        let x = Tensor::new(vec![1, 2], vec![0.5, -0.2]).unwrap();
        let y = l.apply_batch(&x).unwrap();
        let g = Tensor::filled(&[1, 2], 1.0);
        let (_, grads) = l.backward_batch(&x, &y, &g, l.effective_weight().unwrap().as_ref()).unwrap();
        assert!(grads.is_none());
    }

    #[test]
    fn binary_ste_clips_large_latents() {
        let mut l = Layer::<f64>::dense(2, 1, 0).unwrap();
        l.set_params(Tensor::new(vec![1, 2], vec![1.5, 0.5]).unwrap(), Tensor::zeros(&[1]))
            .unwrap();
        l.quant = Some(QuantConfig::binary());
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let y = l.apply_batch(&x).unwrap();
        // alpha = 1.0 -> y = 1 + 1 = 2
        assert_eq!(y.data(), &[2.0]);
        let g = Tensor::filled(&[1, 1], 1.0);
        let (_, grads) = l.backward_batch(&x, &y, &g, l.effective_weight().unwrap().as_ref()).unwrap();
        let (dw, _) = grads.unwrap();
        // |1.5| > 1 clips; |0.5| passes through
        assert_eq!(dw.data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = Layer::<f64>::softmax();
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let y = l.apply_batch(&x).unwrap();
        for row in y.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_forward_and_tie_break() {
        let l = Layer::<f64>::maxpool2d(2, 2).unwrap();
        // one channel, 2x2 of equal values: first element wins the gradient
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let y = l.apply_batch(&x).unwrap();
        assert_eq!(y.data(), &[1.0]);
        let g = Tensor::filled(&[1, 1, 1, 1], 1.0);
        let (dx, _) = l.backward_batch(&x, &y, &g, None).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
