//! The three-channel network.
//!
//! ```text
//!            ┌ conv 25@9x9 ─────────────────────────────────────────────────┐
//! image ─────┼ conv 45@4x4 → pool → conv 35@3x3 → up×2 ────────────────────┼ concat(95)
//!            └ conv 35@2x2 → pool → conv 50@2x2 → pool → conv 35@2x2 → up×4 ┘
//!
//! concat → convT 5@7x7 → convT 7@7x7 → conv 1@5x5 → sigmoid
//! ```
//!
//! Every convolution except the last is followed by a ReLU. Branch outputs
//! are concatenated in channel order 1, 2, 3.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::layers::{self, Activation, ConvParams, LayerError, PoolIndices};
use crate::optim::{OptimError, Optimizer};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("input must be {expected}, got {found}")]
    InputShape { expected: Shape, found: Shape },
    #[error("invalid geometry {0}x{1}: both sides must be positive multiples of 4")]
    Geometry(usize, usize),
    #[error("forward trace does not belong to this network ({0})")]
    TraceMismatch(String),
    #[error("gradient set does not match the network parameters")]
    GradientMismatch,
}

/// Spatial input size of a network. Production networks are 100×100.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub const PRODUCTION: Geometry = Geometry { height: 100, width: 100 };

    pub fn new(height: usize, width: usize) -> Result<Self, ModelError> {
        if height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
            return Err(ModelError::Geometry(height, width));
        }
        Ok(Geometry { height, width })
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(self.height, self.width, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
}

const fn spec(filters: usize, kernel: usize, in_channels: usize) -> ConvSpec {
    ConvSpec { filters, kernel_h: kernel, kernel_w: kernel, in_channels }
}

/// One step of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Conv(ConvSpec),
    ConvTranspose(ConvSpec),
    MaxPool,
    Upsample(usize),
    Act(Activation),
}

const RELU: Op = Op::Act(Activation::Relu);

pub const CHANNEL1: &[Op] = &[Op::Conv(spec(25, 9, 1)), RELU];
pub const CHANNEL2: &[Op] = &[
    Op::Conv(spec(45, 4, 1)),
    RELU,
    Op::MaxPool,
    Op::Conv(spec(35, 3, 45)),
    RELU,
    Op::Upsample(2),
];
pub const CHANNEL3: &[Op] = &[
    Op::Conv(spec(35, 2, 1)),
    RELU,
    Op::MaxPool,
    Op::Conv(spec(50, 2, 35)),
    RELU,
    Op::MaxPool,
    Op::Conv(spec(35, 2, 50)),
    RELU,
    Op::Upsample(4),
];
pub const DECODER: &[Op] = &[
    Op::ConvTranspose(spec(5, 7, 95)),
    RELU,
    Op::ConvTranspose(spec(7, 7, 5)),
    RELU,
    Op::Conv(spec(1, 5, 7)),
    Op::Act(Activation::Sigmoid),
];

/// Channels after concatenating the three branches.
pub const FEATURE_CHANNELS: usize = 25 + 35 + 35;

pub const BRANCHES: [&[Op]; 3] = [CHANNEL1, CHANNEL2, CHANNEL3];

fn conv_specs(ops: &[Op]) -> impl Iterator<Item = ConvSpec> + '_ {
    ops.iter().filter_map(|op| match op {
        Op::Conv(s) | Op::ConvTranspose(s) => Some(*s),
        _ => None,
    })
}

fn conv_count(ops: &[Op]) -> usize {
    conv_specs(ops).count()
}

fn all_specs() -> impl Iterator<Item = ConvSpec> {
    BRANCHES.into_iter().chain([DECODER]).flat_map(conv_specs)
}

/// Index ranges into the parameter list for each of the four sequences.
fn param_offsets() -> [usize; 5] {
    let mut o = [0; 5];
    for (i, ops) in BRANCHES.into_iter().chain([DECODER]).enumerate() {
        o[i + 1] = o[i] + conv_count(ops);
    }
    o
}

/// Activations of one sequential branch. `acts[0]` is the branch input and
/// `acts[i + 1]` the output of op `i`.
#[derive(Debug, Clone)]
pub struct BranchTrace<T: Real> {
    pub acts: Vec<Tensor<T>>,
    pools: Vec<Option<PoolIndices>>,
}

impl<T: Real> BranchTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace holds the input")
    }

    pub fn shapes(&self) -> Vec<Shape> {
        self.acts.iter().map(Tensor::shape).collect()
    }
}

/// Cached activations of one forward pass, in topological order.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Real = f32> {
    geometry: Geometry,
    pub branches: [BranchTrace<T>; 3],
    pub decoder: BranchTrace<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    /// The 95-channel concatenated feature map.
    pub fn features(&self) -> &Tensor<T> {
        &self.decoder.acts[0]
    }

    /// Pre-sigmoid output.
    pub fn logits(&self) -> &Tensor<T> {
        &self.decoder.acts[self.decoder.acts.len() - 2]
    }

    pub fn output(&self) -> &Tensor<T> {
        self.decoder.output()
    }
}

/// Gradients for every parameter buffer, plus the gradients reaching the
/// concatenated features and the input image.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real = f32> {
    pub params: Vec<ConvParams<T>>,
    pub features: Tensor<T>,
    pub input: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriChannelNet<T: Real = f32> {
    geometry: Geometry,
    params: Vec<ConvParams<T>>,
}

impl TriChannelNet<f32> {
    /// Production network (100×100 input) with seeded fan-balanced weights.
    pub fn build(seed: u64) -> Self {
        Self::with_geometry(Geometry::PRODUCTION, seed)
    }
}

impl<T: Real> TriChannelNet<T> {
    pub fn with_geometry(geometry: Geometry, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = all_specs()
            .map(|s| {
                ConvParams::fan_balanced(s.filters, s.kernel_h, s.kernel_w, s.in_channels, &mut rng)
                    .expect("static architecture is valid")
            })
            .collect();
        TriChannelNet { geometry, params }
    }

    /// All weights and biases zero. Its output is sigmoid(0) everywhere.
    pub fn zeroed(geometry: Geometry) -> Self {
        let params = all_specs()
            .map(|s| ConvParams::zeros(s.filters, s.kernel_h, s.kernel_w, s.in_channels).expect("valid"))
            .collect();
        TriChannelNet { geometry, params }
    }

    /// Rebuilds a network from parameter buffers, checking them against the
    /// architecture.
    pub fn from_params(geometry: Geometry, params: Vec<ConvParams<T>>) -> Result<Self, ModelError> {
        let specs: Vec<ConvSpec> = all_specs().collect();
        if specs.len() != params.len() {
            return Err(ModelError::GradientMismatch);
        }
        for (s, p) in specs.iter().zip(&params) {
            if !matches_spec(p, s) {
                return Err(ModelError::GradientMismatch);
            }
        }
        Ok(TriChannelNet { geometry, params })
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    /// Parameter buffers in layer order: channel 1, channel 2, channel 3,
    /// decoder.
    pub fn params(&self) -> &[ConvParams<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ConvParams<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(ConvParams::param_count).sum()
    }

    pub fn cast<U: Real>(&self) -> TriChannelNet<U> {
        TriChannelNet { geometry: self.geometry, params: self.params.iter().map(ConvParams::cast).collect() }
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>), ModelError> {
        let expected = self.geometry.input_shape();
        if image.shape() != expected {
            return Err(ModelError::InputShape { expected, found: image.shape() });
        }
        let o = param_offsets();
        let mut branches = Vec::with_capacity(3);
        for (i, ops) in BRANCHES.into_iter().enumerate() {
            branches.push(run_branch(ops, &self.params[o[i]..o[i + 1]], image.clone(), self.geometry)?);
        }
        let parts: Vec<&Tensor<T>> = branches.iter().map(BranchTrace::output).collect();
        let features = Tensor::concat_channels(&parts).map_err(LayerError::from)?;
        let decoder = run_branch(DECODER, &self.params[o[3]..o[4]], features, self.geometry)?;
        let out = decoder.output().clone();
        let branches: [BranchTrace<T>; 3] = branches.try_into().expect("three branches");
        Ok((out, ForwardTrace { geometry: self.geometry, branches, decoder }))
    }

    /// Forward pass that discards the trace.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        Ok(self.forward(image)?.0)
    }

    /// Backpropagates the gradient of a loss with respect to the sigmoid
    /// output.
    pub fn backward(&self, trace: &ForwardTrace<T>, grad_output: &Tensor<T>) -> Result<Gradients<T>, ModelError> {
        self.check_trace(trace)?;
        let out = trace.output();
        let grad_logits = layers::activation_backward(Activation::Sigmoid, trace.logits(), out, grad_output)?;
        self.backward_from_logits(trace, &grad_logits)
    }

    /// Backpropagates a gradient taken with respect to the pre-sigmoid
    /// logits, as produced by the fused logit-space losses.
    pub fn backward_from_logits(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<Gradients<T>, ModelError> {
        self.check_trace(trace)?;
        let o = param_offsets();
        let mut grads: Vec<ConvParams<T>> = self.params.iter().map(ConvParams::zeros_like).collect();
        let features = backward_branch(
            &DECODER[..DECODER.len() - 1],
            &self.params[o[3]..o[4]],
            &trace.decoder,
            grad_logits.clone(),
            &mut grads[o[3]..o[4]],
        )?;
        let mut input = Tensor::zeros(self.geometry.input_shape()).map_err(LayerError::from)?;
        let mut start = 0;
        for (i, ops) in BRANCHES.into_iter().enumerate() {
            let bt = &trace.branches[i];
            let width = bt.output().channels();
            let g = features.slice_channels(start..start + width).map_err(LayerError::from)?;
            start += width;
            let gi = backward_branch(ops, &self.params[o[i]..o[i + 1]], bt, g, &mut grads[o[i]..o[i + 1]])?;
            input = input.zip(&gi, |a, b| a + b).map_err(LayerError::from)?;
        }
        Ok(Gradients { params: grads, features, input })
    }

    /// Applies one optimizer step.
    pub fn apply_update(&mut self, grads: &[ConvParams<T>], optimizer: &mut Optimizer<T>) -> Result<(), ModelError> {
        if grads.len() != self.params.len() || grads.iter().zip(&self.params).any(|(g, p)| !g.same_geometry(p)) {
            return Err(ModelError::GradientMismatch);
        }
        optimizer.step(&mut self.params, grads)?;
        Ok(())
    }

    fn check_trace(&self, trace: &ForwardTrace<T>) -> Result<(), ModelError> {
        if trace.geometry != self.geometry {
            return Err(ModelError::TraceMismatch(format!(
                "trace geometry {}x{}, network {}x{}",
                trace.geometry.height, trace.geometry.width, self.geometry.height, self.geometry.width
            )));
        }
        let lens = BRANCHES.into_iter().zip(&trace.branches).chain([(DECODER, &trace.decoder)]);
        for (ops, bt) in lens {
            if bt.acts.len() != ops.len() + 1 {
                return Err(ModelError::TraceMismatch("layer count differs".into()));
            }
        }
        Ok(())
    }
}

fn matches_spec<T: Real>(p: &ConvParams<T>, s: &ConvSpec) -> bool {
    p.filters == s.filters && p.kernel_h == s.kernel_h && p.kernel_w == s.kernel_w && p.in_channels == s.in_channels
}

fn run_branch<T: Real>(
    ops: &[Op],
    params: &[ConvParams<T>],
    input: Tensor<T>,
    geometry: Geometry,
) -> Result<BranchTrace<T>, ModelError> {
    let mut acts = Vec::with_capacity(ops.len() + 1);
    let mut pools = Vec::with_capacity(ops.len());
    acts.push(input);
    let mut p = params.iter();
    for op in ops {
        let x = acts.last().expect("nonempty");
        let (y, pool) = match op {
            Op::Conv(_) => (layers::conv2d_forward(x, p.next().expect("param per conv"))?, None),
            Op::ConvTranspose(_) => (
                layers::conv2d_transpose_forward(
                    x,
                    p.next().expect("param per conv"),
                    (geometry.height, geometry.width),
                )?,
                None,
            ),
            Op::MaxPool => {
                let (y, idx) = layers::maxpool2x2_forward(x)?;
                (y, Some(idx))
            }
            Op::Upsample(f) => (layers::zero_upsample(x, *f)?, None),
            Op::Act(a) => (layers::activation_forward(x, *a), None),
        };
        acts.push(y);
        pools.push(pool);
    }
    Ok(BranchTrace { acts, pools })
}

/// Walks `ops` backwards (only the first `ops.len()` recorded ops are used,
/// so a trailing activation can be skipped by passing a shorter slice).
fn backward_branch<T: Real>(
    ops: &[Op],
    params: &[ConvParams<T>],
    trace: &BranchTrace<T>,
    grad_out: Tensor<T>,
    grads: &mut [ConvParams<T>],
) -> Result<Tensor<T>, ModelError> {
    let mut g = grad_out;
    let mut pi = conv_count(ops);
    for (i, op) in ops.iter().enumerate().rev() {
        let (x, y) = (&trace.acts[i], &trace.acts[i + 1]);
        g = match op {
            Op::Conv(_) | Op::ConvTranspose(_) => {
                pi -= 1;
                let (gi, gp) = if matches!(op, Op::Conv(_)) {
                    layers::conv2d_backward(x, &params[pi], &g)?
                } else {
                    layers::conv2d_transpose_backward(x, &params[pi], &g)?
                };
                grads[pi].accumulate(&gp);
                gi
            }
            Op::MaxPool => {
                let idx = trace.pools[i].as_ref().ok_or_else(|| ModelError::TraceMismatch("missing pool indices".into()))?;
                layers::maxpool2x2_backward(idx, &g)?
            }
            Op::Upsample(f) => layers::zero_upsample_backward(&g, *f)?,
            Op::Act(a) => layers::activation_backward(*a, x, y, &g)?,
        };
    }
    Ok(g)
}

/// Ordered description of every op and its geometry, used to reject
/// checkpoints taken from a different architecture.
pub fn fingerprint(geometry: Geometry) -> Vec<[u32; 5]> {
    let mut out = vec![[0, geometry.height as u32, geometry.width as u32, 1, 0]];
    let encode = |op: &Op| -> [u32; 5] {
        match *op {
            Op::Conv(s) => [1, s.filters as u32, s.kernel_h as u32, s.kernel_w as u32, s.in_channels as u32],
            Op::ConvTranspose(s) => [2, s.filters as u32, s.kernel_h as u32, s.kernel_w as u32, s.in_channels as u32],
            Op::MaxPool => [3, 2, 2, 0, 0],
            Op::Upsample(f) => [4, f as u32, 0, 0, 0],
            Op::Act(Activation::Relu) => [5, 0, 0, 0, 0],
            Op::Act(Activation::Sigmoid) => [6, 0, 0, 0, 0],
        }
    };
    for (b, ops) in BRANCHES.into_iter().enumerate() {
        out.push([7, b as u32 + 1, 0, 0, 0]);
        out.extend(ops.iter().map(encode));
    }
    out.push([8, FEATURE_CHANNELS as u32, 0, 0, 0]);
    out.extend(DECODER.iter().map(encode));
    out
}
