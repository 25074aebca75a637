//! Finite-difference gradient checks, one randomized instance per call.
//! Each returns the largest relative error seen over every checked entry.

use rand::seq::SliceRandom;
use rand::Rng;
use triseg::layers::{self, Activation, ConvParams};
use triseg::loss;
use triseg::{Shape, Tensor};

use super::{random_params, random_tensor, rel_err};

pub const STEP: f64 = 1e-5;

/// Checks every coordinate of `x` against `analytic`.
fn sweep(x: &mut [f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let numeric = super::central_difference(x, i, STEP, &mut f);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

fn tensor(shape: Shape, v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

fn with_weights(p: &ConvParams<f64>, w: &[f64]) -> ConvParams<f64> {
    ConvParams::from_parts(p.filters, p.kernel_h, p.kernel_w, p.in_channels, w.to_vec(), p.bias.clone()).unwrap()
}

fn with_bias(p: &ConvParams<f64>, b: &[f64]) -> ConvParams<f64> {
    ConvParams::from_parts(p.filters, p.kernel_h, p.kernel_w, p.in_channels, p.weights.clone(), b.to_vec()).unwrap()
}

/// Projects `out` onto the fixed random direction `r`, giving a scalar loss
/// whose output gradient is `r`.
fn project(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub fn conv<R: Rng>(rng: &mut R) -> f64 {
    let shape = Shape::new(rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=3));
    let (f, kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let p = random_params(rng, f, kh, kw, shape.channels);
    let x = random_tensor(rng, shape);
    let r = random_tensor(rng, Shape::new(shape.height, shape.width, p.filters));
    let (gx, gp) = layers::conv2d_backward(&x, &p, &r).unwrap();
    let loss = |x: &Tensor<f64>, p: &ConvParams<f64>| project(&layers::conv2d_forward(x, p).unwrap(), &r);

    let mut xv = x.data().to_vec();
    let mut worst = sweep(&mut xv, gx.data(), |v| loss(&tensor(shape, v), &p));
    let mut w = p.weights.clone();
    worst = worst.max(sweep(&mut w, &gp.weights, |v| loss(&x, &with_weights(&p, v))));
    let mut b = p.bias.clone();
    worst.max(sweep(&mut b, &gp.bias, |v| loss(&x, &with_bias(&p, v))))
}

pub fn conv_transpose<R: Rng>(rng: &mut R) -> f64 {
    let shape = Shape::new(rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=3));
    let (f, kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let p = random_params(rng, f, kh, kw, shape.channels);
    let target = (rng.gen_range(1..=8), rng.gen_range(1..=8));
    let x = random_tensor(rng, shape);
    let r = random_tensor(rng, Shape::new(target.0, target.1, p.filters));
    let (gx, gp) = layers::conv2d_transpose_backward(&x, &p, &r).unwrap();
    let loss =
        |x: &Tensor<f64>, p: &ConvParams<f64>| project(&layers::conv2d_transpose_forward(x, p, target).unwrap(), &r);

    let mut xv = x.data().to_vec();
    let mut worst = sweep(&mut xv, gx.data(), |v| loss(&tensor(shape, v), &p));
    let mut w = p.weights.clone();
    worst = worst.max(sweep(&mut w, &gp.weights, |v| loss(&x, &with_weights(&p, v))));
    let mut b = p.bias.clone();
    worst.max(sweep(&mut b, &gp.bias, |v| loss(&x, &with_bias(&p, v))))
}

/// Inputs are a shuffled ladder with rungs 0.01 apart, so no window is within
/// a finite-difference step of a tie.
pub fn maxpool<R: Rng>(rng: &mut R) -> f64 {
    let shape = Shape::new(2 * rng.gen_range(1..=3), 2 * rng.gen_range(1..=3), rng.gen_range(1..=3));
    let mut v: Vec<f64> = (0..shape.len()).map(|i| i as f64 * 0.01 - 0.5).collect();
    v.shuffle(rng);
    let x = tensor(shape, &v);
    let (y, idx) = layers::maxpool2x2_forward(&x).unwrap();
    let r = random_tensor(rng, y.shape());
    let gx = layers::maxpool2x2_backward(&idx, &r).unwrap();
    sweep(&mut v, gx.data(), |v| project(&layers::maxpool2x2_forward(&tensor(shape, v)).unwrap().0, &r))
}

pub fn upsample<R: Rng>(rng: &mut R) -> f64 {
    let factor = if rng.gen_bool(0.5) { 2 } else { 4 };
    let shape = Shape::new(rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=3));
    let x = random_tensor(rng, shape);
    let r = random_tensor(rng, Shape::new(shape.height * factor, shape.width * factor, shape.channels));
    let gx = layers::zero_upsample_backward(&r, factor).unwrap();
    let mut v = x.data().to_vec();
    sweep(&mut v, gx.data(), |v| project(&layers::zero_upsample(&tensor(shape, v), factor).unwrap(), &r))
}

/// ReLU inputs are kept at least 1e-3 away from the kink.
pub fn activation<R: Rng>(rng: &mut R, kind: Activation) -> f64 {
    let shape = Shape::new(rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=3));
    let x = Tensor::from_fn(shape, |_, _, _| {
        let m = rng.gen_range(1e-3..4.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .unwrap();
    let y = layers::activation_forward(&x, kind);
    let r = random_tensor(rng, shape);
    let gx = layers::activation_backward(kind, &x, &y, &r).unwrap();
    let mut v = x.data().to_vec();
    sweep(&mut v, gx.data(), |v| project(&layers::activation_forward(&tensor(shape, v), kind), &r))
}

fn binary_target<R: Rng>(rng: &mut R, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).unwrap()
}

pub fn bce<R: Rng>(rng: &mut R) -> f64 {
    let shape = Shape::new(rng.gen_range(1..=6), rng.gen_range(1..=6), 1);
    let p = Tensor::from_fn(shape, |_, _, _| rng.gen_range(0.05..0.95)).unwrap();
    let t = binary_target(rng, shape);
    let (_, g) = loss::bce_loss(&p, &t).unwrap();
    let mut v = p.data().to_vec();
    sweep(&mut v, g.data(), |v| loss::bce_loss(&tensor(shape, v), &t).unwrap().0)
}

pub fn bce_logits<R: Rng>(rng: &mut R) -> f64 {
    let shape = Shape::new(rng.gen_range(1..=6), rng.gen_range(1..=6), 1);
    let z = Tensor::from_fn(shape, |_, _, _| rng.gen_range(-5.0..5.0)).unwrap();
    let t = binary_target(rng, shape);
    let (_, g) = loss::bce_with_logits(&z, &t).unwrap();
    let mut v = z.data().to_vec();
    sweep(&mut v, g.data(), |v| loss::bce_with_logits(&tensor(shape, v), &t).unwrap().0)
}

pub fn dice<R: Rng>(rng: &mut R) -> f64 {
    let shape = Shape::new(rng.gen_range(1..=6), rng.gen_range(1..=6), 1);
    let p = Tensor::from_fn(shape, |_, _, _| rng.gen_range(0.0..1.0)).unwrap();
    let t = binary_target(rng, shape);
    let (_, g) = loss::dice_loss(&p, &t).unwrap();
    let mut v = p.data().to_vec();
    sweep(&mut v, g.data(), |v| loss::dice_loss(&tensor(shape, v), &t).unwrap().0)
}

/// Whole-network check on a reduced geometry with random weights and
/// non-zero biases (zero biases leave pre-activations sitting exactly on the
/// ReLU kink wherever an upsampled map is zero). Checks `samples` randomly
/// chosen parameters from every layer plus `samples` input pixels.
pub fn whole_network<R: Rng>(rng: &mut R, side: usize, samples: usize) -> f64 {
    use triseg::model::{Geometry, TriChannelNet};
    let geometry = Geometry::new(side, side).unwrap();
    let template = TriChannelNet::<f64>::zeroed(geometry);
    let params: Vec<ConvParams<f64>> = template
        .params()
        .iter()
        .map(|t| {
            let scale = (3.0 / (t.kernel_h * t.kernel_w * t.in_channels) as f64).sqrt();
            let w = (0..t.weights.len()).map(|_| rng.gen_range(-scale..scale)).collect();
            let b = (0..t.filters).map(|_| rng.gen_range(-0.3..0.3)).collect();
            ConvParams::from_parts(t.filters, t.kernel_h, t.kernel_w, t.in_channels, w, b).unwrap()
        })
        .collect();
    let net = TriChannelNet::from_params(geometry, params).unwrap();
    let x = Tensor::from_fn(geometry.input_shape(), |_, _, _| rng.gen_range(0.0..1.0)).unwrap();
    let target = binary_target(rng, geometry.input_shape());
    let loss = |net: &TriChannelNet<f64>, x: &Tensor<f64>| {
        let (out, _) = net.forward(x).unwrap();
        loss::bce_loss(&out, &target).unwrap().0
    };
    let (out, trace) = net.forward(&x).unwrap();
    let (_, g) = loss::bce_loss(&out, &target).unwrap();
    let grads = net.backward(&trace, &g).unwrap();

    let mut worst: f64 = 0.0;
    for (layer, gp) in grads.params.iter().enumerate() {
        for _ in 0..samples.div_ceil(grads.params.len()) {
            let bias = rng.gen_bool(0.2);
            let i = rng.gen_range(0..if bias { gp.bias.len() } else { gp.weights.len() });
            let analytic = if bias { gp.bias[i] } else { gp.weights[i] };
            let numeric = super::central_difference(&mut [0.0], 0, STEP, |d| {
                let mut n = net.clone();
                let p = &mut n.params_mut()[layer];
                if bias {
                    p.bias[i] += d[0];
                } else {
                    p.weights[i] += d[0];
                }
                loss(&n, &x)
            });
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    let mut xv = x.data().to_vec();
    for _ in 0..samples {
        let i = rng.gen_range(0..xv.len());
        let numeric =
            super::central_difference(&mut xv, i, STEP, |v| loss(&net, &tensor(geometry.input_shape(), v)));
        worst = worst.max(rel_err(grads.input.data()[i], numeric));
    }
    worst
}
