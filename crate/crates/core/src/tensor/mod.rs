//! Dense row-major tensors and the primitive operations the pipeline composes.
//!
//! Storage is a flat `Vec` in row-major order plus a shape. Tensors are
//! treated as values: every operation returns a new tensor and never mutates
//! its inputs, so they can be shared read-only across worker threads.
//!
//! Reductions accumulate in `f64` and store the result as `f32`.

mod io;
mod ops;

pub use io::{read_tensor, write_tensor, Archive, ARCHIVE_MAGIC, TENSOR_MAGIC};
pub use ops::{
    concat, conv2d, conv2d_strided, matmul, matvec, max_pool2d, relu, resize_bilinear, sigmoid,
    softmax, tanh, transposed_conv2d,
};

use crate::error::{Error, Result};

/// Dense n-dimensional array. `f32` is the working precision; `Tensor64` is
/// used where finite-difference checks need the extra headroom.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub type Tensor64 = Tensor<f64>;

impl<T: Copy + Default> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::default())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Errors unless `self` has exactly the given shape.
    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Errors unless the tensor has the given rank; returns the shape.
    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<&[usize]> {
        if self.shape.len() != rank {
            return Err(Error::shape(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(&self.shape)
    }

    /// `[C,H,W]` dimensions of a rank-3 tensor.
    pub fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.expect_rank(3, what)?;
        Ok((s[0], s[1], s[2]))
    }

    /// `[H,W]` dimensions of a rank-2 tensor.
    pub fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        let s = self.expect_rank(2, what)?;
        Ok((s[0], s[1]))
    }

    /// Channel `c` of a `[C,H,W]` tensor as an `[H,W]` tensor.
    pub fn channel(&self, c: usize) -> Result<Self> {
        let (ch, h, w) = self.dims3("channel")?;
        if c >= ch {
            return Err(Error::shape(format!("channel {c} out of range for {ch}")));
        }
        Ok(Self {
            shape: vec![h, w],
            data: self.data[c * h * w..(c + 1) * h * w].to_vec(),
        })
    }
}

impl Tensor<f32> {
    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(v: Vec<f32>) -> Self {
        Self {
            shape: vec![v.len()],
            data: v,
        }
    }

    pub fn scale(&self, k: f32) -> Self {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn min_max(&self) -> Option<(f32, f32)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Tensor64 {
        self.map(|v| v as f64)
    }
}

impl Tensor64 {
    pub fn to_f32(&self) -> Tensor {
        self.map(|v| v as f32)
    }
}
