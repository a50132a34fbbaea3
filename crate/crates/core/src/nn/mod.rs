//! Differentiable building blocks with explicit forward/backward passes.
//!
//! Every learnable component implements [`Module`], which walks its tensors
//! under stable dotted names. Gradients are stored in a structure of the same
//! type (see [`zeroed`]), so a backward pass writes into `&mut Self`.

mod conv;
mod linear;
mod norm;
pub mod ops;

pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm, BatchNormCache, LayerNorm, LayerNormCache};

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Dimension, ShapeBuilder};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Role of a named tensor inside a module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Learnable and subject to weight decay.
    Weight,
    /// Learnable, no weight decay (biases, norm affine terms, scan gains).
    Bias,
    /// Saved with the model but never trained (running statistics).
    Buffer,
}

impl Slot {
    pub fn trainable(self) -> bool {
        !matches!(self, Slot::Buffer)
    }
}

pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>));
}

/// Dotted-name join used for parameter paths.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A copy of `m` with every tensor set to zero; used as a gradient accumulator.
pub fn zeroed<M: Module + Clone>(m: &M) -> M {
    let mut out = m.clone();
    out.visit_mut("", &mut |_, _, mut a| a.fill(0.0));
    out
}

/// Number of learnable scalars, by traversal.
pub fn count_trainable<M: Module + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, slot, a| {
        if slot.trainable() {
            n += a.len();
        }
    });
    n
}

/// Concatenate all learnable tensors in visiting order.
pub fn flatten_trainable<M: Module + ?Sized>(m: &M) -> Vec<f64> {
    let mut out = Vec::new();
    m.visit("", &mut |_, slot, a| {
        if slot.trainable() {
            out.extend(a.iter().copied());
        }
    });
    out
}

/// Named copies of every tensor (learnable and buffers).
pub fn named_tensors<M: Module + ?Sized>(m: &M) -> Vec<(String, Slot, ArrayD<f64>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, slot, a| out.push((name.to_string(), slot, a.to_owned())));
    out
}

/// True when every tensor is finite.
pub fn all_finite<M: Module + ?Sized>(m: &M) -> bool {
    let mut ok = true;
    m.visit("", &mut |_, _, a| ok &= a.iter().all(|v| v.is_finite()));
    ok
}

pub(crate) fn visit_opt<M: Module>(
    m: &Option<M>,
    prefix: &str,
    name: &str,
    f: &mut dyn FnMut(&str, Slot, ArrayViewD<'_, f64>),
) {
    if let Some(m) = m {
        m.visit(&join(prefix, name), f);
    }
}

pub(crate) fn visit_opt_mut<M: Module>(
    m: &mut Option<M>,
    prefix: &str,
    name: &str,
    f: &mut dyn FnMut(&str, Slot, ArrayViewMutD<'_, f64>),
) {
    if let Some(m) = m {
        m.visit_mut(&join(prefix, name), f);
    }
}

/// Gaussian tensor with the given standard deviation.
pub fn randn<Sh: ShapeBuilder<Dim = D>, D: Dimension, R: Rng + ?Sized>(
    shape: Sh,
    std: f64,
    rng: &mut R,
) -> ndarray::Array<f64, D> {
    ndarray::Array::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx of x·σ(x).
#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Training uses batch statistics in batch-norm layers, evaluation the
/// running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
