//! Dense rank-4 tensors with reverse-mode differentiation.
//!
//! Shapes are `(batch, channels, height, width)`, data row-major in that
//! order. All learned computation in this crate runs through [`Tape`], which
//! records ops and replays them backwards for gradients. Element type is
//! generic: `f32` for production, `f64` for strict numeric tests.

mod adam;
pub mod kernels;
#[cfg(target_arch = "x86_64")]
mod simd;
mod tape;

pub use adam::AdamState;
pub use tape::{Grads, Tape, Var};

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;

/// Tensor element: the arithmetic surface shared by `f32` and `f64`.
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + PartialEq
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    /// Largest value strictly below one: saturation bound keeping tanh inside
    /// the open interval (-1, 1) even where the libm result rounds to 1.
    const BELOW_ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;
    fn min(self, other: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BELOW_ONE: Self = 1.0 - f32::EPSILON / 2.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn max(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn min(self, other: Self) -> Self {
        f32::min(self, other)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BELOW_ONE: Self = 1.0 - f64::EPSILON / 2.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn min(self, other: Self) -> Self {
        f64::min(self, other)
    }
}

/// Rank-4 dense array, shape `(batch, channels, height, width)`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    /// 1x1x1x1 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// Uniform draw in `[lo, hi)`. Values are drawn in f64 and narrowed, so
    /// the same seed yields the same parameters in both precisions.
    pub fn uniform<R: Rng>(shape: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        let [_, cs, hs, ws] = self.shape;
        self.data[((b * cs + c) * hs + y) * ws + x]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let [_, cs, hs, ws] = self.shape;
        self.data[((b * cs + c) * hs + y) * ws + x] = v;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean in f64 accumulation, summed in a fixed chunked order so the
    /// result is bit-stable regardless of how the tensor was produced.
    pub fn mean_f64(&self) -> f64 {
        assert!(self.numel() > 0, "mean of empty tensor");
        stable_sum(self.data.iter().map(|v| v.to_f64())) / self.numel() as f64
    }
}

/// Chunked pairwise-ish summation: accumulates runs of 256 then folds the
/// partials. Fixed order, deterministic, and much more accurate than a single
/// running sum on long inputs.
pub fn stable_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut partials = Vec::new();
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for v in values {
        acc += v;
        n += 1;
        if n == 256 {
            partials.push(acc);
            acc = 0.0;
            n = 0;
        }
    }
    partials.push(acc);
    while partials.len() > 1 {
        let mut folded = Vec::with_capacity(partials.len() / 2 + 1);
        for pair in partials.chunks(2) {
            folded.push(pair.iter().sum());
        }
        partials = folded;
    }
    partials[0]
}
