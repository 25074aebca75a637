//! Dense rank-3 tensors in `(height, width, channels)` row-major order.
//!
//! Channels are the innermost axis, so the feature vector of one pixel is a
//! contiguous slice. Every layer in [`crate::layers`] reads and writes this
//! layout directly.

use std::fmt;
use std::ops::{AddAssign, MulAssign, Range, SubAssign};

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

/// Floating-point element type. Production paths use `f32`; gradient checks
/// run the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("invalid shape {0}: every dimension must be positive")]
    InvalidShape(Shape),
    #[error("shape {0} overflows the addressable element count")]
    Overflow(Shape),
    #[error("index ({y}, {x}, {c}) out of bounds for shape {shape}")]
    OutOfBounds { y: usize, x: usize, c: usize, shape: Shape },
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: Shape, found: Shape },
    #[error("data length {found} does not match shape {shape}")]
    LengthMismatch { shape: Shape, found: usize },
    #[error("non-finite value at flat offset {0}")]
    NonFinite(usize),
    #[error("cannot concatenate an empty list of tensors")]
    EmptyConcat,
    #[error("spatial mismatch in concatenation: {expected} vs {found}")]
    SpatialMismatch { expected: Shape, found: Shape },
    #[error("channel range {start}..{end} invalid for {channels} channels")]
    ChannelRange { start: usize, end: usize, channels: usize },
}

/// Height × width × channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Shape { height, width, channels }
    }

    pub fn validate(&self) -> Result<usize, TensorError> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(TensorError::InvalidShape(*self));
        }
        self.height
            .checked_mul(self.width)
            .and_then(|n| n.checked_mul(self.channels))
            .filter(|&n| n <= isize::MAX as usize / 8)
            .ok_or(TensorError::Overflow(*self))
    }

    /// Element count; only meaningful for validated shapes.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }

    pub fn same_spatial(&self, other: &Shape) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, fill: T) -> Result<Self, TensorError> {
        let len = shape.validate()?;
        if !fill.is_finite() {
            return Err(TensorError::NonFinite(0));
        }
        Ok(Tensor { shape, data: vec![fill; len] })
    }

    pub fn zeros(shape: Shape) -> Result<Self, TensorError> {
        Self::new(shape, T::zero())
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        let len = shape.validate()?;
        if data.len() != len {
            return Err(TensorError::LengthMismatch { shape, found: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor by evaluating `f(y, x, c)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self, TensorError> {
        let len = shape.validate()?;
        let mut data = Vec::with_capacity(len);
        for y in 0..shape.height {
            for x in 0..shape.width {
                for c in 0..shape.channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::from_vec(shape, data)
    }

    /// Internal constructor for kernels that guarantee finiteness by construction.
    pub(crate) fn from_raw(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    fn offset(&self, y: usize, x: usize, c: usize) -> Result<usize, TensorError> {
        let s = self.shape;
        if y >= s.height || x >= s.width || c >= s.channels {
            return Err(TensorError::OutOfBounds { y, x, c, shape: s });
        }
        Ok((y * s.width + x) * s.channels + c)
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> Result<T, TensorError> {
        Ok(self.data[self.offset(y, x, c)?])
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) -> Result<(), TensorError> {
        let i = self.offset(y, x, c)?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite(i));
        }
        self.data[i] = v;
        Ok(())
    }

    /// Unchecked-by-contract accessor for hot loops; panics when out of range.
    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.shape.width + x) * self.shape.channels + c]
    }

    /// Channel vector of pixel `(y, x)`.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let c = self.shape.channels;
        let o = (y * self.shape.width + x) * c;
        &self.data[o..o + c]
    }

    #[inline]
    pub(crate) fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let c = self.shape.channels;
        let o = (y * self.shape.width + x) * c;
        &mut self.data[o..o + c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self, TensorError> {
        Self::from_vec(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        self.expect_shape(other.shape)?;
        Self::from_vec(
            self.shape,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn expect_shape(&self, expected: Shape) -> Result<(), TensorError> {
        if self.shape != expected {
            return Err(TensorError::ShapeMismatch { expected, found: self.shape });
        }
        Ok(())
    }

    /// Stacks tensors along the channel axis, preserving order.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self, TensorError> {
        let first = parts.first().ok_or(TensorError::EmptyConcat)?;
        let base = first.shape;
        let mut channels = 0usize;
        for p in parts {
            if !p.shape.same_spatial(&base) {
                return Err(TensorError::SpatialMismatch { expected: base, found: p.shape });
            }
            channels += p.shape.channels;
        }
        let shape = base.with_channels(channels);
        let mut data = Vec::with_capacity(shape.validate()?);
        for px in 0..base.pixels() {
            for p in parts {
                let c = p.shape.channels;
                data.extend_from_slice(&p.data[px * c..(px + 1) * c]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Copies channels `range` into a new tensor.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Self, TensorError> {
        let channels = self.shape.channels;
        if range.start >= range.end || range.end > channels {
            return Err(TensorError::ChannelRange { start: range.start, end: range.end, channels });
        }
        let shape = self.shape.with_channels(range.len());
        let mut data = Vec::with_capacity(shape.len());
        for px in self.data.chunks_exact(channels) {
            data.extend_from_slice(&px[range.clone()]);
        }
        Ok(Tensor { shape, data })
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b)
    }

    pub fn dot(&self, other: &Self) -> Result<T, TensorError> {
        self.expect_shape(other.shape)?;
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |a, (&x, &y)| a + x * y))
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a.max(b.abs()))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from(*v).expect("finite cast")).collect(),
        }
    }
}
