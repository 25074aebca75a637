//! Differentiable layer primitives.
//!
//! Each layer is a pair of free functions: a forward pass and a backward pass
//! that returns the gradient with respect to the input (and, for convolutions,
//! the parameters). Backward passes take the cached forward input/output
//! explicitly, so any number of samples can run concurrently against one
//! shared, read-only [`ConvParams`].

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Real, Shape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input has {found} channels, layer expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("max-pooling needs even spatial dimensions, got {0}")]
    OddDimension(Shape),
    #[error("unsupported upsampling factor {0} (expected 2 or 4)")]
    UnsupportedFactor(usize),
    #[error("gradient shape {shape} is not divisible by upsampling factor {factor}")]
    NotDivisible { shape: Shape, factor: usize },
    #[error("gradient shape mismatch: expected {expected}, found {found}")]
    GradShape { expected: Shape, found: Shape },
    #[error("invalid convolution geometry: {0}")]
    Geometry(String),
}

/// Parameters of one convolution (or transposed convolution).
///
/// Weights are stored as `(filters, kernel_h, kernel_w, in_channels)`, so the
/// taps of one filter at one kernel position are contiguous over input
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Real = f32> {
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(filters: usize, kernel_h: usize, kernel_w: usize, in_channels: usize) -> Result<Self, LayerError> {
        if filters == 0 || kernel_h == 0 || kernel_w == 0 || in_channels == 0 {
            return Err(LayerError::Geometry(format!(
                "{filters} filters of {kernel_h}x{kernel_w}x{in_channels}"
            )));
        }
        Ok(ConvParams {
            filters,
            kernel_h,
            kernel_w,
            in_channels,
            weights: vec![T::zero(); filters * kernel_h * kernel_w * in_channels],
            bias: vec![T::zero(); filters],
        })
    }

    pub fn from_parts(
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self, LayerError> {
        let mut p = Self::zeros(filters, kernel_h, kernel_w, in_channels)?;
        if weights.len() != p.weights.len() || bias.len() != p.bias.len() {
            return Err(LayerError::Geometry(format!(
                "expected {} weights and {} biases, got {} and {}",
                p.weights.len(),
                p.bias.len(),
                weights.len(),
                bias.len()
            )));
        }
        if let Some(i) = weights.iter().chain(&bias).position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i).into());
        }
        p.weights = weights;
        p.bias = bias;
        Ok(p)
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn fan_balanced<R: Rng + ?Sized>(
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        rng: &mut R,
    ) -> Result<Self, LayerError> {
        let mut p = Self::zeros(filters, kernel_h, kernel_w, in_channels)?;
        let area = (kernel_h * kernel_w) as f64;
        let limit = (6.0 / (area * in_channels as f64 + area * filters as f64)).sqrt();
        for w in &mut p.weights {
            *w = T::lit(rng.gen_range(-limit..limit));
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        ConvParams {
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.filters == other.filters
            && self.kernel_h == other.kernel_h
            && self.kernel_w == other.kernel_w
            && self.in_channels == other.in_channels
    }

    #[inline]
    pub fn weight_index(&self, f: usize, dy: usize, dx: usize, c: usize) -> usize {
        ((f * self.kernel_h + dy) * self.kernel_w + dx) * self.in_channels + c
    }

    /// Adds `other` into `self` elementwise.
    pub fn accumulate(&mut self, other: &Self) {
        debug_assert!(self.same_geometry(other));
        axpy(&mut self.weights, T::one(), &other.weights);
        axpy(&mut self.bias, T::one(), &other.bias);
    }

    pub fn scale(&mut self, k: T) {
        self.weights.iter_mut().chain(self.bias.iter_mut()).for_each(|v| *v *= k);
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from(*x).expect("finite cast")).collect();
        ConvParams {
            filters: self.filters,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            in_channels: self.in_channels,
            weights: conv(&self.weights),
            bias: conv(&self.bias),
        }
    }

    /// Kernel rotated by 180° in the spatial plane.
    fn flipped(&self) -> Self {
        let mut out = self.clone();
        let (kh, kw, c) = (self.kernel_h, self.kernel_w, self.in_channels);
        for f in 0..self.filters {
            for dy in 0..kh {
                for dx in 0..kw {
                    let src = self.weight_index(f, kh - 1 - dy, kw - 1 - dx, 0);
                    let dst = self.weight_index(f, dy, dx, 0);
                    out.weights[dst..dst + c].copy_from_slice(&self.weights[src..src + c]);
                }
            }
        }
        out
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), LayerError> {
        if input.channels() != self.in_channels {
            return Err(LayerError::ChannelMismatch { expected: self.in_channels, found: input.channels() });
        }
        Ok(())
    }
}

const LANES: usize = 32;

#[inline(always)]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let b = &b[..a.len()];
    let mut acc = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for k in 0..width {
            acc[k] = acc[k] + acc[k + width];
        }
    }
    acc[0] + tail
}

#[inline(always)]
fn axpy<T: Real>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Placement of the receptive window: output `(a, b)` at kernel tap
/// `(dy, dx)` reads input `(a + row + dy, b + col + dx)`.
#[derive(Clone, Copy)]
struct Window {
    row: isize,
    col: isize,
}

impl Window {
    /// Same-padded correlation. Even kernels put the extra zero row/column
    /// at the bottom/right.
    fn same(kh: usize, kw: usize) -> Self {
        Window { row: -(((kh - 1) / 2) as isize), col: -(((kw - 1) / 2) as isize) }
    }

    /// Stride-1 transposed convolution expressed as a correlation with the
    /// spatially flipped kernel. The full scatter result has size
    /// `in + k - 1`; the kept window starts at `s = floor((full - target) / 2)`.
    fn transposed(kh: usize, kw: usize, input: Shape, target: (usize, usize)) -> Self {
        let start = |n: usize, k: usize, t: usize| (n as isize + k as isize - 1 - t as isize).div_euclid(2);
        Window {
            row: start(input.height, kh, target.0) - (kh as isize - 1),
            col: start(input.width, kw, target.1) - (kw as isize - 1),
        }
    }
}

/// Row-wise copy plan between one receptive window and the input tensor.
/// Each entry is `(patch offset, input offset, len)` in scalar units.
struct PatchPlan {
    segments: Vec<(usize, usize, usize)>,
}

impl PatchPlan {
    fn new() -> Self {
        PatchPlan { segments: Vec::new() }
    }

    #[inline(always)]
    fn build(&mut self, input: Shape, kh: usize, kw: usize, win: Window, a: usize, b: usize) {
        self.segments.clear();
        let (h, w, c) = (input.height as isize, input.width as isize, input.channels);
        let x0 = b as isize + win.col;
        let lo = (-x0).clamp(0, kw as isize);
        let hi = (w - x0).clamp(0, kw as isize);
        if lo >= hi {
            return;
        }
        for dy in 0..kh {
            let iy = a as isize + win.row + dy as isize;
            if iy < 0 || iy >= h {
                continue;
            }
            let src = ((iy * w + x0 + lo) as usize) * c;
            let dst = (dy * kw + lo as usize) * c;
            self.segments.push((dst, src, (hi - lo) as usize * c));
        }
    }

    #[inline(always)]
    fn gather<T: Real>(&self, input: &[T], patch: &mut [T]) {
        patch.fill(T::zero());
        for &(dst, src, len) in &self.segments {
            patch[dst..dst + len].copy_from_slice(&input[src..src + len]);
        }
    }

    #[inline(always)]
    fn scatter_add<T: Real>(&self, patch: &[T], target: &mut [T]) {
        for &(dst, src, len) in &self.segments {
            axpy(&mut target[src..src + len], T::one(), &patch[dst..dst + len]);
        }
    }
}

/// Runs `$body` through a copy compiled with AVX2 enabled when the CPU has
/// it. Summation order is fixed in source, so both copies give bit-identical
/// results.
macro_rules! dispatch_simd {
    ($name:ident, $inner:ident, ($($arg:ident: $ty:ty),*) -> $ret:ty) => {
        fn $name<T: Real>($($arg: $ty),*) -> $ret {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide<T: Real>($($arg: $ty),*) -> $ret {
                    $inner($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { wide($($arg),*) };
                }
            }
            $inner($($arg),*)
        }
    };
}

dispatch_simd!(correlate, correlate_impl,
    (input: &Tensor<T>, p: &ConvParams<T>, out_h: usize, out_w: usize, win: Window) -> Tensor<T>);
dispatch_simd!(correlate_backward, correlate_backward_impl,
    (input: &Tensor<T>, p: &ConvParams<T>, grad_out: &Tensor<T>, win: Window) -> (Tensor<T>, ConvParams<T>));

/// Direct correlation: every filter is one contiguous `kh·kw·c` vector, dotted
/// against the gathered receptive window of each output pixel.
#[inline(always)]
fn correlate_impl<T: Real>(input: &Tensor<T>, p: &ConvParams<T>, out_h: usize, out_w: usize, win: Window) -> Tensor<T> {
    let k = p.kernel_h * p.kernel_w * p.in_channels;
    let f_n = p.filters;
    let mut out = vec![T::zero(); out_h * out_w * f_n];
    let mut patch = vec![T::zero(); k];
    let mut plan = PatchPlan::new();
    for a in 0..out_h {
        for b in 0..out_w {
            plan.build(input.shape(), p.kernel_h, p.kernel_w, win, a, b);
            plan.gather(input.data(), &mut patch);
            let o = &mut out[(a * out_w + b) * f_n..][..f_n];
            for ((o, w), &bias) in o.iter_mut().zip(p.weights.chunks_exact(k)).zip(&p.bias) {
                *o = bias + dot(w, &patch);
            }
        }
    }
    Tensor::from_raw(Shape::new(out_h, out_w, f_n), out)
}

#[inline(always)]
fn correlate_backward_impl<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
    win: Window,
) -> (Tensor<T>, ConvParams<T>) {
    let k = p.kernel_h * p.kernel_w * p.in_channels;
    let mut grad_in = vec![T::zero(); input.shape().len()];
    let mut grads = p.zeros_like();
    let mut patch = vec![T::zero(); k];
    let mut grad_patch = vec![T::zero(); k];
    let mut plan = PatchPlan::new();
    for a in 0..grad_out.height() {
        for b in 0..grad_out.width() {
            let g = grad_out.pixel(a, b);
            if g.iter().all(|v| v.is_zero()) {
                continue;
            }
            plan.build(input.shape(), p.kernel_h, p.kernel_w, win, a, b);
            plan.gather(input.data(), &mut patch);
            grad_patch.fill(T::zero());
            axpy(&mut grads.bias, T::one(), g);
            let filters = p.weights.chunks_exact(k).zip(grads.weights.chunks_exact_mut(k));
            for ((w, gw), &gf) in filters.zip(g) {
                if gf.is_zero() {
                    continue;
                }
                axpy(gw, gf, &patch);
                axpy(&mut grad_patch, gf, w);
            }
            plan.scatter_add(&grad_patch, &mut grad_in);
        }
    }
    (Tensor::from_raw(input.shape(), grad_in), grads)
}

fn check_grad(grad_out: &Tensor<impl Real>, expected: Shape) -> Result<(), LayerError> {
    if grad_out.shape() != expected {
        return Err(LayerError::GradShape { expected, found: grad_out.shape() });
    }
    Ok(())
}

/// Stride-1 same-padded convolution; output keeps the input's spatial size.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>, LayerError> {
    p.check_input(input)?;
    let win = Window::same(p.kernel_h, p.kernel_w);
    Ok(correlate(input, p, input.height(), input.width(), win))
}

/// Gradients of `Σ grad_out ⊙ conv2d_forward(input)` with respect to the
/// input and the parameters.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvParams<T>), LayerError> {
    p.check_input(input)?;
    check_grad(grad_out, input.shape().with_channels(p.filters))?;
    let win = Window::same(p.kernel_h, p.kernel_w);
    Ok(correlate_backward(input, p, grad_out, win))
}

/// Stride-1 transposed convolution, center-cropped (or zero-padded) to
/// `target = (height, width)`.
///
/// Each input element scatters a kernel-shaped patch into the full
/// `(h + kh - 1) × (w + kw - 1)` result. When the target equals the input size
/// this is exactly the adjoint of [`conv2d_forward`] with the filter and
/// channel axes of the weights swapped.
pub fn conv2d_transpose_forward<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    target: (usize, usize),
) -> Result<Tensor<T>, LayerError> {
    p.check_input(input)?;
    if target.0 == 0 || target.1 == 0 {
        return Err(LayerError::Geometry(format!("target {}x{} is empty", target.0, target.1)));
    }
    let win = Window::transposed(p.kernel_h, p.kernel_w, input.shape(), target);
    Ok(correlate(input, &p.flipped(), target.0, target.1, win))
}

pub fn conv2d_transpose_backward<T: Real>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvParams<T>), LayerError> {
    p.check_input(input)?;
    let target = (grad_out.height(), grad_out.width());
    check_grad(grad_out, Shape::new(target.0, target.1, p.filters))?;
    let win = Window::transposed(p.kernel_h, p.kernel_w, input.shape(), target);
    let (grad_in, grads) = correlate_backward(input, &p.flipped(), grad_out, win);
    Ok((grad_in, grads.flipped()))
}

/// Argmax offsets of a 2×2 max-pool, one `(dy, dx)` pair in `{0,1}²` per
/// output element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    input: Shape,
    offsets: Vec<[u8; 2]>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(self.input.height / 2, self.input.width / 2, self.input.channels)
    }

    /// Position of the maximum inside the window of output `(y, x, c)`.
    pub fn argmax(&self, y: usize, x: usize, c: usize) -> (usize, usize) {
        let o = self.output_shape();
        let [dy, dx] = self.offsets[(y * o.width + x) * o.channels + c];
        (dy as usize, dx as usize)
    }

    /// Input coordinate that produced output `(y, x, c)`.
    pub fn source(&self, y: usize, x: usize, c: usize) -> (usize, usize) {
        let (dy, dx) = self.argmax(y, x, c);
        (2 * y + dy, 2 * x + dx)
    }
}

/// Disjoint 2×2 max-pooling. Ties resolve to the first maximum in row-major
/// window order.
pub fn maxpool2x2_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices), LayerError> {
    let s = input.shape();
    if s.height % 2 != 0 || s.width % 2 != 0 {
        return Err(LayerError::OddDimension(s));
    }
    let o = Shape::new(s.height / 2, s.width / 2, s.channels);
    let mut out = Vec::with_capacity(o.len());
    let mut offsets = Vec::with_capacity(o.len());
    for y in 0..o.height {
        for x in 0..o.width {
            for c in 0..o.channels {
                let mut best = input.at(2 * y, 2 * x, c);
                let mut arg = [0u8, 0u8];
                for (dy, dx) in [(0u8, 1u8), (1, 0), (1, 1)] {
                    let v = input.at(2 * y + dy as usize, 2 * x + dx as usize, c);
                    if v > best {
                        best = v;
                        arg = [dy, dx];
                    }
                }
                out.push(best);
                offsets.push(arg);
            }
        }
    }
    Ok((Tensor::from_raw(o, out), PoolIndices { input: s, offsets }))
}

pub fn maxpool2x2_backward<T: Real>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    let o = indices.output_shape();
    check_grad(grad_out, o)?;
    let mut grad_in = Tensor::zeros(indices.input)?;
    let s = indices.input;
    let data = grad_in.data_mut();
    for y in 0..o.height {
        for x in 0..o.width {
            for c in 0..o.channels {
                let (sy, sx) = indices.source(y, x, c);
                data[(sy * s.width + sx) * s.channels + c] = grad_out.at(y, x, c);
            }
        }
    }
    Ok(grad_in)
}

fn check_factor(factor: usize) -> Result<(), LayerError> {
    match factor {
        2 | 4 => Ok(()),
        f => Err(LayerError::UnsupportedFactor(f)),
    }
}

/// Zero-insertion upsampling: input values land on the stride-`factor` grid,
/// everything else is zero.
pub fn zero_upsample<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>, LayerError> {
    check_factor(factor)?;
    let s = input.shape();
    let o = Shape::new(s.height * factor, s.width * factor, s.channels);
    let mut out = Tensor::zeros(o)?;
    for y in 0..s.height {
        for x in 0..s.width {
            out.pixel_mut(y * factor, x * factor).copy_from_slice(input.pixel(y, x));
        }
    }
    Ok(out)
}

pub fn zero_upsample_backward<T: Real>(grad_out: &Tensor<T>, factor: usize) -> Result<Tensor<T>, LayerError> {
    check_factor(factor)?;
    let s = grad_out.shape();
    if s.height % factor != 0 || s.width % factor != 0 {
        return Err(LayerError::NotDivisible { shape: s, factor });
    }
    let o = Shape::new(s.height / factor, s.width / factor, s.channels);
    let mut out = Tensor::zeros(o)?;
    for y in 0..o.height {
        for x in 0..o.width {
            out.pixel_mut(y, x).copy_from_slice(grad_out.pixel(y * factor, x * factor));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where the exact value rounds to an endpoint.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    s.max(T::min_positive_value()).min(hi)
}

pub fn activation_forward<T: Real>(t: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let data = match kind {
        Activation::Relu => t.data().iter().map(|&v| v.max(T::zero())).collect(),
        Activation::Sigmoid => t.data().iter().map(|&v| sigmoid(v)).collect(),
    };
    Tensor::from_raw(t.shape(), data)
}

/// `input` and `output` are the cached forward pair of this activation.
pub fn activation_backward<T: Real>(
    kind: Activation,
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, LayerError> {
    check_grad(grad_out, input.shape())?;
    check_grad(output, input.shape())?;
    let g = grad_out.data();
    let data = match kind {
        Activation::Relu => input
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect(),
        Activation::Sigmoid => output.data().iter().zip(g).map(|(&s, &g)| g * s * (T::one() - s)).collect(),
    };
    Ok(Tensor::from_raw(input.shape(), data))
}
