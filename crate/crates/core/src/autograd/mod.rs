// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s. Calling
//! [`Tape::backward`] walks the record in reverse and returns a
//! [`Gradients`] map for the leaves that asked for one.
//!
//! The element type is generic over [`Real`] so the same code path can run
//! in `f32` (model math) and `f64` (finite-difference oracles). Reductions
//! (softmax, layer norm, cross entropy, KL) accumulate in `f64` regardless.

mod program;
mod tape;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use program::{evaluate, finite_diff_check, GradCheckReport, InputCheck, Instr, Program};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};

/// Floating-point element type usable on a tape.
pub trait Real:
    num_traits::Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Errors raised while building or differentiating a tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward already ran on this tape")]
    TapeConsumed,
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },
}

/// Dense row-major tensor with shared, immutable storage.
///
/// Cloning is cheap (the buffer is reference counted); mutation goes through
/// [`Tensor::data_mut`], which copies on write when the buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self, AutogradError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(AutogradError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Builds a tensor whose shape is known to match; panics otherwise.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape, vec![F::zero(); n])
    }

    pub fn scalar(x: F) -> Self {
        Self::from_parts(vec![1], vec![x])
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> F) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.data.as_ref().clone()
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        match self.shape.last() {
            Some(&c) if c > 0 => self.len() / c,
            _ => 0,
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `r` when viewed as a matrix over the last axis.
    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> F {
        self.data[0]
    }

    /// Converts the element type, e.g. to promote a model to `f64`.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|x| G::from_f64(x.as_f64())).collect(),
        )
    }
}

impl<F: fmt::Debug> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        let head: Vec<_> = self.data.iter().take(PREVIEW).collect();
        write!(f, " {head:?}")?;
        if self.data.len() > PREVIEW {
            write!(f, " ..")?;
        }
        Ok(())
    }
}
