//! N-dimensional row-major float tensor.
//!
//! The engine runs in `f32` for training and `f64` for gradient checking and
//! bound verification; everything numeric is generic over [`Element`].

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{DcqError, Result};

/// Scalar element type of the engine (`f32` or `f64`).
pub trait Element: Float + Sum + Debug + Default + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Element for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
}

/// Row-major tensor: `shape` dimension sizes, `data.len() == product(shape)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DcqError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_f64s(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[T]) -> Self {
        Self { shape: vec![values.len()], data: values.to_vec() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of equal size.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn l2_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn mean_abs(&self) -> T {
        compensated_mean(self.data.iter().map(|&x| x.abs()), self.data.len())
    }

    /// Euclidean distance between equally-shaped tensors.
    pub fn l2_distance(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(DcqError::Shape(format!(
                "l2_distance: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let d = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>();
        Ok(d.sqrt())
    }

    /// Stacks equally-shaped tensors along a new leading batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| DcqError::Empty("stack of no tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(DcqError::Shape("stack of unequal shapes".into()));
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Extracts item `i` of a batched tensor (leading axis), dropping the axis.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        if self.shape.is_empty() || i >= self.shape[0] {
            return Err(DcqError::Shape(format!(
                "batch_item {i} out of range for {:?}",
                self.shape
            )));
        }
        let item_len = self.len() / self.shape[0];
        let data = self.data[i * item_len..(i + 1) * item_len].to_vec();
        Ok(Self { shape: self.shape[1..].to_vec(), data })
    }

    /// Number of items along the leading axis.
    pub fn batch_size(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| x.to_f64_()).collect() }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.to_f64_() as f32).collect(),
        }
    }
}

/// Neumaier-compensated mean with a corrected division. When the exact mean
/// is representable (all inputs equal, in particular) the result is exact,
/// which is what makes re-quantizing an already-quantized tensor a true
/// fixed point.
pub fn compensated_mean<T: Element>(values: impl Iterator<Item = T>, count: usize) -> T {
    if count == 0 {
        return T::zero();
    }
    let mut sum = T::zero();
    let mut compensation = T::zero();
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            compensation = compensation + ((sum - t) + x);
        } else {
            compensation = compensation + ((x - t) + sum);
        }
        sum = t;
    }
    let n = T::from_f64(count as f64);
    let q = sum / n;
    let remainder = (-q).mul_add(n, sum) + compensation;
    q + remainder / n
}
