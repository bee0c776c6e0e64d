//! Dense rank-4 tensors in NCHW layout, generic over the element type.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LcError, Result};

/// Element dtype tag, also used in the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element type of a tensor. Implemented for `f32` and `f64`.
pub trait Elem:
    Copy
    + Clone
    + Send
    + Sync
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::iter::Sum
    + 'static
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn max_elem(self, other: Self) -> Self;
    fn is_nan(self) -> bool;
    fn is_finite(self) -> bool;

    /// Append the little-endian byte representation of `v` to `out`.
    fn write_le(v: Self, out: &mut Vec<u8>);
    /// Read one element from the front of `bytes` (little-endian).
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_elem {
    ($t:ty, $dtype:expr) => {
        impl Elem for $t {
            const DTYPE: Dtype = $dtype;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn max_elem(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn is_nan(self) -> bool {
                <$t>::is_nan(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn write_le(v: Self, out: &mut Vec<u8>) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_elem!(f32, Dtype::F32);
impl_elem!(f64, Dtype::F64);

/// Shape of a rank-4 tensor: (batch, channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4 { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense NCHW tensor with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Elem> {
    shape: Shape4,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Elem> Tensor<T> {
    pub fn zeros(shape: Shape4) -> Tensor<T> {
        Tensor {
            shape,
            data: vec![T::ZERO; shape.len()],
            grad: None,
        }
    }

    pub fn filled(shape: Shape4, v: T) -> Tensor<T> {
        Tensor {
            shape,
            data: vec![v; shape.len()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Tensor<T>> {
        if data.len() != shape.len() {
            return Err(LcError::shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Tensor with elements drawn from N(0, std^2).
    pub fn randn(shape: Shape4, std: f64, rng: &mut impl Rng) -> Tensor<T> {
        let normal = Normal::new(0.0f64, std).expect("std must be finite and positive");
        let data = (0..shape.len())
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    /// Flat index of (n, c, y, x).
    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous (h*w) plane of one (n, c) slice.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let off = self.idx(n, c, 0, 0);
        &self.data[off..off + self.shape.h * self.shape.w]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let off = self.idx(n, c, 0, 0);
        let hw = self.shape.h * self.shape.w;
        &mut self.data[off..off + hw]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::ZERO; self.shape.len()]);
        }
        self.grad.as_mut().unwrap().as_mut_slice()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::ZERO);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// True when the gradient buffer is absent or holds only exact zeros.
    pub fn grad_is_zero(&self) -> bool {
        match &self.grad {
            None => true,
            Some(g) => g.iter().all(|v| *v == T::ZERO),
        }
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    /// Largest absolute element difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Mirror along the width axis.
    pub fn hflip(&self) -> Tensor<T> {
        let s = self.shape;
        let mut out = self.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        out.set(n, c, y, x, self.at(n, c, y, s.w - 1 - x));
                    }
                }
            }
        }
        out
    }

    /// Convert every element (used to move between f32 and f64 precision).
    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }
}
