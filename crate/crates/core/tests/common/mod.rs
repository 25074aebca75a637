//! Independent reference implementations used by the integration tests and
//! the acceptance suite. Nothing here calls into the code under test except
//! for the plain data types.
#![allow(dead_code)]

use rand::Rng;
use triseg::layers::ConvParams;
use triseg::{Shape, Tensor};

pub mod grad;
pub mod props;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn random_params<R: Rng>(rng: &mut R, filters: usize, kh: usize, kw: usize, c: usize) -> ConvParams<f64> {
    let w = (0..filters * kh * kw * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = (0..filters).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ConvParams::from_parts(filters, kh, kw, c, w, b).unwrap()
}

/// Same-padded correlation by direct summation, top/left padding
/// `(k - 1) / 2`.
pub fn brute_conv(input: &Tensor<f64>, p: &ConvParams<f64>) -> Vec<f64> {
    let (h, w, c) = (input.height(), input.width(), input.channels());
    let (pt, pl) = ((p.kernel_h - 1) / 2, (p.kernel_w - 1) / 2);
    let mut out = vec![0.0; h * w * p.filters];
    for y in 0..h {
        for x in 0..w {
            for f in 0..p.filters {
                let mut s = p.bias[f];
                for dy in 0..p.kernel_h {
                    for dx in 0..p.kernel_w {
                        let sy = y as isize + dy as isize - pt as isize;
                        let sx = x as isize + dx as isize - pl as isize;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        for ch in 0..c {
                            let wi = ((f * p.kernel_h + dy) * p.kernel_w + dx) * c + ch;
                            s += p.weights[wi] * input.data()[(sy as usize * w + sx as usize) * c + ch];
                        }
                    }
                }
                out[(y * w + x) * p.filters + f] = s;
            }
        }
    }
    out
}

/// Full scatter transposed convolution, then cropped (or zero-padded) to
/// `target` starting at `floor((in + k - 1 - target) / 2)`; bias added once per
/// output element.
pub fn brute_conv_transpose(input: &Tensor<f64>, p: &ConvParams<f64>, target: (usize, usize)) -> Vec<f64> {
    let (h, w, c) = (input.height(), input.width(), input.channels());
    let (fh, fw) = (h + p.kernel_h - 1, w + p.kernel_w - 1);
    let mut full = vec![0.0; fh * fw * p.filters];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = input.data()[(y * w + x) * c + ch];
                for f in 0..p.filters {
                    for dy in 0..p.kernel_h {
                        for dx in 0..p.kernel_w {
                            let wi = ((f * p.kernel_h + dy) * p.kernel_w + dx) * c + ch;
                            full[((y + dy) * fw + x + dx) * p.filters + f] += v * p.weights[wi];
                        }
                    }
                }
            }
        }
    }
    let start = |full: usize, t: usize| (full as f64 - t as f64) / 2.0;
    let (sy, sx) = (start(fh, target.0).floor() as isize, start(fw, target.1).floor() as isize);
    let mut out = vec![0.0; target.0 * target.1 * p.filters];
    for y in 0..target.0 {
        for x in 0..target.1 {
            let (fy, fx) = (y as isize + sy, x as isize + sx);
            let inside = fy >= 0 && fx >= 0 && (fy as usize) < fh && (fx as usize) < fw;
            for f in 0..p.filters {
                let v = if inside { full[(fy as usize * fw + fx as usize) * p.filters + f] } else { 0.0 };
                out[(y * target.1 + x) * p.filters + f] = v + p.bias[f];
            }
        }
    }
    out
}

/// Parameters of the transposed convolution that is the adjoint of a
/// bias-free convolution with `p`: filter and channel axes swapped.
pub fn adjoint_params(p: &ConvParams<f64>) -> ConvParams<f64> {
    let (f, kh, kw, c) = (p.filters, p.kernel_h, p.kernel_w, p.in_channels);
    let mut w = vec![0.0; p.weights.len()];
    for fi in 0..f {
        for dy in 0..kh {
            for dx in 0..kw {
                for ci in 0..c {
                    w[((ci * kh + dy) * kw + dx) * f + fi] = p.weights[((fi * kh + dy) * kw + dx) * c + ci];
                }
            }
        }
    }
    ConvParams::from_parts(c, kh, kw, f, w, vec![0.0; c]).unwrap()
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Relative error with a small absolute floor so that entries whose true
/// value is zero do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Sort-and-index quantile with linear interpolation between closest ranks.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Point-in-rotated-ellipse rasterizer, written from the geometric
/// definition: rotate the offset into the ellipse frame and test the
/// normalized radius.
pub fn rasterize_ellipse(size: usize, cy: f64, cx: f64, a: f64, b: f64, angle: f64) -> Vec<bool> {
    let (cos, sin) = (angle.cos(), angle.sin());
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 - cy, x as f64 - cx);
            let along = px * cos + py * sin;
            let across = py * cos - px * sin;
            out.push(along * along / (a * a) + across * across / (b * b) <= 1.0);
        }
    }
    out
}

/// Pixel-class counts in a rendered overlay, independent of the confusion
/// code: (green, red, blue, gray).
pub fn count_overlay(pixels: &[[u8; 3]]) -> (u64, u64, u64, u64) {
    let mut n = (0, 0, 0, 0);
    for p in pixels {
        match p {
            [0, 255, 0] => n.0 += 1,
            [255, 0, 0] => n.1 += 1,
            [0, 0, 255] => n.2 += 1,
            [r, g, b] if r == g && g == b => n.3 += 1,
            other => panic!("unexpected overlay colour {other:?}"),
        }
    }
    n
}
