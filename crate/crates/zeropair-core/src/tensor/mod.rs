//! Dense 4-D tensors and the scalar element abstraction.
//!
//! All network arithmetic runs on [`Tensor`] values laid out as
//! `(batch, channels, height, width)` in row-major order. Training uses
//! `f32`; the gradient checker replays the same graph in `f64`, so every
//! operation is generic over [`Elem`].

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use gradcheck::grad_check;
pub use ops::PoolingIndices;
pub use tape::{Tape, Val};

/// Scalar element type of a tensor: `f32` for training, `f64` for oracles.
pub trait Elem:
    Copy
    + Send
    + Sync
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Dtype tag used by the checkpoint container.
    const DTYPE_TAG: u8;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;
    fn max_of(self, other: Self) -> Self;
    fn min_of(self, other: Self) -> Self;

    /// `c := alpha * op_a(a) * op_b(b) + beta * c` on row-major buffers with
    /// explicit strides, dispatched to a cache-blocked SIMD kernel.
    ///
    /// # Safety
    /// The stride/extent combinations must stay in bounds of the slices;
    /// callers go through [`gemm_strided`] which asserts bounds.
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Elem for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE_TAG: u8 = 1;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn max_of(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn min_of(self, other: Self) -> Self {
        f32::min(self, other)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Elem for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const DTYPE_TAG: u8 = 2;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn max_of(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn min_of(self, other: Self) -> Self {
        f64::min(self, other)
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Checked strided GEMM over slices: `c := alpha * A * B + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided<T: Elem>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (isize, isize),
) {
    let max_index = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        let r = (rows as isize - 1).max(0) * rs;
        let col = (cols as isize - 1).max(0) * cs;
        (r + col) as usize
    };
    if m == 0 || n == 0 {
        return;
    }
    assert!(max_index(m, k, rsa, csa) < a.len());
    assert!(max_index(k, n, rsb, csb) < b.len());
    assert!(max_index(m, n, rsc, csc) < c.len());
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Row-major `c := alpha * A(m×k) * B(k×n) + beta * c`.
pub fn gemm<T: Elem>(m: usize, k: usize, n: usize, alpha: T, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    gemm_strided(
        m,
        k,
        n,
        alpha,
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        beta,
        c,
        (n as isize, 1),
    );
}

/// `(batch, channels, height, width)` extents of a dense tensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat offset of `(n, c, h, w)`.
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array. Immutable after construction; clones share storage.
#[derive(Clone)]
pub struct Tensor<T: Elem = f32> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Elem> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![T::ZERO; shape.numel()]),
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: Arc::new(vec![value; shape.numel()]),
        }
    }

    /// Wraps `data` as a tensor of `shape`; the lengths must agree.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dimension(
                "Tensor::from_vec",
                format!("shape {shape} needs {} values, got {}", shape.numel(), data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Single-element tensor of shape 1x1x1x1.
    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Value at `(n, c, h, w)`.
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// The scalar value of a 1-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Stable identity of the underlying storage; used to recognise the
    /// same parameter tensor across multiple uses within one tape.
    pub fn storage_id(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Elementwise sum; shapes must already agree.
    pub fn add_elem(&self, other: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(self.shape, other.shape);
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Tensor {
            shape: self.shape,
            data: Arc::new(data),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy cast to another element type (used by f64 oracles).
    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| U::from_f64(v.to_f64())).collect()),
        }
    }

    /// Copy of the data with one element replaced; for finite differences.
    pub fn with_element(&self, flat_index: usize, value: T) -> Tensor<T> {
        let mut data = self.data.as_ref().clone();
        data[flat_index] = value;
        Tensor {
            shape: self.shape,
            data: Arc::new(data),
        }
    }
}

impl<T: Elem> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}, {} values)", self.shape, self.numel())
    }
}

/// Dense per-pixel class-id map of shape `(batch, height, width)`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct ClassMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl ClassMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::dimension(
                "ClassMap::new",
                format!("{n}x{h}x{w} needs {} values, got {}", n * h * w, data.len()),
            ));
        }
        Ok(ClassMap { n, h, w, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        ClassMap {
            n,
            h,
            w,
            data: vec![0; n * h * w],
        }
    }

    pub fn numel(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn at(&self, n: usize, h: usize, w: usize) -> u8 {
        self.data[(n * self.h + h) * self.w + w]
    }

    /// One-hot encoding as a float tensor of `(n, num_classes, h, w)`.
    pub fn one_hot<T: Elem>(&self, num_classes: usize) -> Result<Tensor<T>> {
        let shape = Shape::new(self.n, num_classes, self.h, self.w);
        let mut data = vec![T::ZERO; shape.numel()];
        for n in 0..self.n {
            for h in 0..self.h {
                for w in 0..self.w {
                    let class = self.at(n, h, w) as usize;
                    if class >= num_classes {
                        return Err(Error::contract(
                            "ClassMap::one_hot",
                            format!("class id {class} out of range [0, {num_classes})"),
                        ));
                    }
                    data[shape.index(n, class, h, w)] = T::ONE;
                }
            }
        }
        Tensor::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_indexing_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.numel(), 120);
        assert_eq!(s.index(0, 0, 0, 0), 0);
        assert_eq!(s.index(0, 0, 0, 1), 1);
        assert_eq!(s.index(0, 0, 1, 0), 5);
        assert_eq!(s.index(0, 1, 0, 0), 20);
        assert_eq!(s.index(1, 0, 0, 0), 60);
        assert_eq!(s.index(1, 2, 3, 4), 119);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("dimension error"));
    }

    #[test]
    fn gemm_matches_hand_product() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        gemm(2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn one_hot_marks_single_channel() {
        let m = ClassMap::new(1, 1, 2, vec![0, 2]).unwrap();
        let t: Tensor<f32> = m.one_hot(3).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(t.at(0, 0, 0, 0), 1.0);
        assert_eq!(t.at(0, 2, 0, 1), 1.0);
        assert_eq!(t.data().iter().sum::<f32>(), 2.0);
    }

    #[test]
    fn one_hot_rejects_out_of_range_class() {
        let m = ClassMap::new(1, 1, 1, vec![5]).unwrap();
        assert!(m.one_hot::<f32>(3).is_err());
    }
}
