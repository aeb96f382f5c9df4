//! A small differentiable-compute core with hand-written backward passes.
//!
//! Everything operates on row-major batches: an input of shape `(B, in)`
//! holds one sample per row. Layers keep their gradient buffers next to
//! their values, and backward passes *accumulate* into them, so a loss
//! summed over an unroll is handled by calling backward once per step.
//!
//! Code is generic over [`Real`] so the same path runs in `f32` for
//! training and in `f64` for finite-difference checks.

mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod lstm;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{leaky_relu, leaky_relu_backward, Linear, Mlp, MlpCache, LEAKY_SLOPE};
pub use loss::{mse_loss, mse_loss_backward};
pub use lstm::{LstmCache, LstmCell, LstmGrads};
pub use optim::{clip_grad_norm, grad_norm, soft_update, AdamW, AdamWConfig};

use ndarray::Array2;
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite gradient in `{0}`; step skipped")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Floating-point element type of parameters and activations.
pub trait Real:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A named parameter matrix with its gradient buffer (same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Array2<T>,
    pub grad: Array2<T>,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Array2<T>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    /// Uniform initialization in `±bound`.
    pub fn uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: (usize, usize),
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let value = Array2::from_shape_simple_fn(shape, || {
            T::lit(if bound > 0.0 {
                rng.random_range(-bound..bound)
            } else {
                0.0
            })
        });
        Param::new(name, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters.
///
/// `visit` and `visit_mut` enumerate parameters in a fixed order; the
/// optimizer, checkpoints and gradient checks all rely on that order.
pub trait Module<T: Real> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }
}

impl<T: Real> Module<T> for Param<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(self)
    }
}

impl<T: Real, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.iter().for_each(|m| m.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

/// Converts every parameter to another precision, keeping names and layout.
pub fn cast_params<A: Real, B: Real, M: Module<A>, N: Module<B>>(from: &M, to: &mut N) {
    let values: Vec<Array2<B>> = from
        .params()
        .iter()
        .map(|p| p.value.mapv(|x| B::lit(x.to_f64_lossy())))
        .collect();
    let mut it = values.into_iter();
    to.visit_mut(&mut |p| {
        let v = it.next().expect("same parameter layout");
        assert_eq!(v.dim(), p.value.dim(), "shape of `{}`", p.name);
        p.value = v;
    });
}

pub(crate) fn check_cols(op: &'static str, got: usize, expected: usize) -> Result<(), NnError> {
    if got != expected {
        return Err(NnError::Shape {
            op,
            detail: format!("expected {expected} columns, got {got}"),
        });
    }
    Ok(())
}
