//! First-order optimizers over a list of [`ConvParams`] buffers.

use thiserror::Error;

use crate::layers::ConvParams;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("optimizer got {found} gradient buffers for {expected} parameter buffers")]
    BufferCount { expected: usize, found: usize },
    #[error("gradient buffer {0} has the wrong length")]
    BufferShape(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Heavy-ball momentum: `v ← μv + g`, `w ← w − lr·v`.
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    pub const SGD: OptimizerKind = OptimizerKind::SgdMomentum { momentum: 0.9 };
}

/// Optimizer state. Slots are allocated lazily on the first step and laid
/// out as `[w0, b0, w1, b1, ...]`.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Real = f32> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer { kind, learning_rate, steps: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [ConvParams<T>], grads: &[ConvParams<T>]) -> Result<(), OptimError> {
        if params.len() != grads.len() {
            return Err(OptimError::BufferCount { expected: params.len(), found: grads.len() });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.weights.len() != g.weights.len() || p.bias.len() != g.bias.len() {
                return Err(OptimError::BufferShape(i));
            }
        }
        if self.first.is_empty() {
            for p in params.iter() {
                self.first.push(vec![T::zero(); p.weights.len()]);
                self.first.push(vec![T::zero(); p.bias.len()]);
            }
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        self.steps += 1;
        let buffers = params
            .iter_mut()
            .zip(grads)
            .flat_map(|(p, g)| [(&mut p.weights, &g.weights), (&mut p.bias, &g.bias)]);
        let lr = T::lit(self.learning_rate);
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                let mu = T::lit(momentum);
                for ((w, g), v) in buffers.zip(&mut self.first) {
                    for ((w, &g), v) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = T::lit(1.0 / (1.0 - beta1.powi(t)));
                let c2 = T::lit(1.0 / (1.0 - beta2.powi(t)));
                let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
                let one = T::one();
                for (((w, g), m), v) in buffers.zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &g), m), v) in w.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let m_hat = *m * c1;
                        let v_hat = *v * c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
