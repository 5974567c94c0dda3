//! Dense rank-4 tensors and the differentiable neural primitives built on
//! them. Every primitive here is a pure function with a matching analytic
//! backward function; the graph module composes them into a tape.

mod activation;
mod concat;
mod conv;
pub mod gradcheck;
pub(crate) mod linalg;
mod pool;
mod scalar;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same, Error, Result};

pub use activation::{leaky_relu, leaky_relu_backward, DEFAULT_LEAKY_SLOPE};
pub use concat::{concat_channels, concat_channels_backward};
pub use conv::{
    conv2d, conv2d_backward, conv_out_extent, conv_transpose2d, conv_transpose2d_backward,
    conv_transpose_out_extent, ConvGeom, ConvGrads, ConvParams,
};
pub(crate) use conv::conv2d_backward_masked;
pub use pool::{avg_pool2, avg_pool2_backward};
pub use scalar::Scalar;

/// Extents of a batch-channel-height-width tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Shape4 { c, ..self }
    }

    pub const fn with_spatial(self, h: usize, w: usize) -> Self {
        Shape4 { h, w, ..self }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}×{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major (n, c, h, w) tensor in a single contiguous buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::invalid("tensor", format!("zero extent in {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "buffer of {} elements does not fill {shape}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn random_uniform(shape: Shape4, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len())
            .map(|_| T::lit(rng.gen_range(lo..hi)))
            .collect();
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let i = self.index(n, c, y, x);
        &mut self.data[i]
    }

    /// The h×w plane of channel `c` in batch item `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of batch item `n`, as one c·h·w slice.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure_same("zip_map", self.shape, other.shape)?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        ensure_same("add_assign", self.shape, other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        ensure_same("dot", self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Copies channels `start..start + len` into a new tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.c {
            return Err(Error::invalid(
                "narrow_channels",
                format!("channels {start}..{} out of {}", start + len, self.shape.c),
            ));
        }
        let shape = self.shape.with_channels(len);
        let p = shape.plane();
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            let base = (n * self.shape.c + start) * p;
            data.extend_from_slice(&self.data[base..base + len * p]);
        }
        Ok(Tensor4 { shape, data })
    }

    /// Batch items `start..start + len`.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.shape.n {
            return Err(Error::invalid(
                "narrow_batch",
                format!("items {start}..{} out of {}", start + len, self.shape.n),
            ));
        }
        let item = self.shape.c * self.shape.plane();
        Ok(Tensor4 {
            shape: Shape4 { n: len, ..self.shape },
            data: self.data[start * item..(start + len) * item].to_vec(),
        })
    }

    /// Stacks tensors of identical (c, h, w) along the batch dimension.
    pub fn stack_batch(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch", "no tensors"))?;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            ensure_same("stack_batch", first.shape, Shape4 { n: first.shape.n, ..t.shape })?;
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            shape: Shape4 { n, ..first.shape },
            data,
        })
    }
}

/// A value together with its accumulated gradient ∂Loss/∂value.
#[derive(Clone, Debug)]
pub struct GradPair<T> {
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
}

impl<T: Scalar> GradPair<T> {
    /// Wraps a value with a zero-filled gradient.
    pub fn new(value: Tensor4<T>) -> Self {
        let grad = Tensor4::zeros(value.shape());
        GradPair { value, grad }
    }

    pub fn accumulate(&mut self, g: &Tensor4<T>) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor4::<f32>::new(Shape4::new(1, 2, 2, 2), vec![0.0; 7]).unwrap_err();
        assert!(err.to_string().contains("1×2×2×2"));
    }

    #[test]
    fn narrow_channels_round_trips_concat_layout() {
        let t = Tensor4::<f64>::from_fn(Shape4::new(2, 3, 2, 2), |n, c, y, x| {
            (n * 1000 + c * 100 + y * 10 + x) as f64
        });
        let mid = t.narrow_channels(1, 1).unwrap();
        assert_eq!(mid.shape(), Shape4::new(2, 1, 2, 2));
        assert_eq!(mid.at(1, 0, 1, 0), 1110.0);
    }

    #[test]
    fn grad_pair_starts_zeroed() {
        let mut p = GradPair::new(Tensor4::<f32>::full(Shape4::new(1, 1, 2, 2), 3.0));
        assert_eq!(p.grad.sum(), 0.0);
        p.accumulate(&Tensor4::full(Shape4::new(1, 1, 2, 2), 1.0)).unwrap();
        assert_eq!(p.grad.sum(), 4.0);
        p.zero_grad();
        assert_eq!(p.grad.sum(), 0.0);
    }
}
