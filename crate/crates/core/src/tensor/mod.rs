//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value in a dynamically built computation
//! graph: each non-leaf tensor keeps a backpointer to the operation that
//! produced it and to its inputs. The op vocabulary is closed (see [`Op`]),
//! which keeps backward correctness exhaustively checkable against finite
//! differences. Gradients live in per-tensor buffers that are only allocated
//! for tensors with `requires_grad` set, and accumulate additively across
//! fan-out and across repeated backward calls.
//!
//! Elements default to `f32` for training; the whole stack is generic over
//! [`Scalar`] so gradient checks can run at `f64`, where central finite
//! differences are trustworthy.

mod adam;
mod backward;
pub mod gradcheck;
mod matmul;
mod ops;
mod scalar;
mod schedule;

pub use adam::{AdamConfig, AdamState};
pub use ops::Op;
pub use scalar::Scalar;
pub use schedule::LrSchedule;

use crate::error::{CoreError, Result};
use std::cell::{Ref, RefCell};
use std::rc::Rc;

pub struct Inner<S: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    op: Op<S>,
}

#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Tensor<S> {
    fn new(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Result of an op: requires grad iff any input does; ops on constant
    /// inputs record no graph edge at all.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<S>, op: Op<S>) -> Self {
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor::new(shape, data, requires_grad, op)
    }

    /// Constant leaf (no gradient ever).
    pub fn constant(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        Self::check_shape(&shape, data.len())?;
        Ok(Tensor::new(shape, data, false, Op::Leaf))
    }

    /// Trainable leaf.
    pub fn parameter(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        Self::check_shape(&shape, data.len())?;
        Ok(Tensor::new(shape, data, true, Op::Leaf))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![S::ZERO; n], false, Op::Leaf)
    }

    pub fn scalar(v: S) -> Self {
        Tensor::new(vec![1], vec![v], false, Op::Leaf)
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        let expect: usize = shape.iter().product();
        if expect != len {
            return Err(CoreError::Contract(format!(
                "shape {shape:?} implies {expect} elements, got {len}"
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    /// Row count for 2-D tensors, 1 for 1-D.
    pub fn rows(&self) -> usize {
        if self.inner.shape.len() >= 2 {
            self.inner.shape[0]
        } else {
            1
        }
    }

    /// Column count: last extent.
    pub fn cols(&self) -> usize {
        *self.inner.shape.last().unwrap_or(&1)
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    /// Scalar extraction; contract error on non-scalars.
    pub fn item(&self) -> Result<S> {
        if !self.is_scalar() {
            return Err(CoreError::NonScalarLoss {
                shape: self.inner.shape.clone(),
            });
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn value(&self, index: usize) -> S {
        self.inner.data.borrow()[index]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    /// Gradient buffer, zero-filled if backward never reached this tensor.
    pub fn grad_or_zeros(&self) -> Vec<S> {
        self.inner
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![S::ZERO; self.len()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Allocate a zero gradient buffer if none exists yet (parameters that
    /// took no part in a step's graph still need one for the optimizer).
    pub fn ensure_grad(&self) {
        self.accumulate_grad(|_| {});
    }

    /// Identity comparison: true iff both handles share one storage.
    pub fn ptr_eq(a: &Tensor<S>, b: &Tensor<S>) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    pub(crate) fn op(&self) -> &Op<S> {
        &self.inner.op
    }

    pub(crate) fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// In-place data replacement for optimizer updates and checkpoint loads.
    /// Only valid on leaves; the graph never mutates computed values.
    pub(crate) fn replace_data(&self, data: Vec<S>) {
        debug_assert!(matches!(self.inner.op, Op::Leaf));
        debug_assert_eq!(data.len(), self.len());
        *self.inner.data.borrow_mut() = data;
    }

    pub(crate) fn with_data_mut<R>(&self, f: impl FnOnce(&mut [S]) -> R) -> R {
        debug_assert!(matches!(self.inner.op, Op::Leaf));
        f(&mut self.inner.data.borrow_mut())
    }

    pub(crate) fn accumulate_grad(&self, update: impl FnOnce(&mut [S])) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![S::ZERO; self.len()]);
        update(buf);
    }
}

/// Matmul forced down the sequential kernel (no graph recorded). Bitwise
/// equal to [`Tensor::matmul`] under any feature set: the parallel path only
/// distributes rows and keeps the per-element reduction order.
pub fn matmul_sequential<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> crate::error::Result<Tensor<S>> {
    let (n, k) = match a.shape() {
        [n, k] => (*n, *k),
        other => {
            return Err(crate::error::CoreError::Contract(format!(
                "matmul_sequential expects 2-d lhs, got {other:?}"
            )))
        }
    };
    let (k2, p) = match b.shape() {
        [k2, p] => (*k2, *p),
        other => {
            return Err(crate::error::CoreError::Contract(format!(
                "matmul_sequential expects 2-d rhs, got {other:?}"
            )))
        }
    };
    if k != k2 {
        return Err(crate::error::CoreError::MatmulShape {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![S::ZERO; n * p];
    matmul::matmul_acc_seq(&a.data(), &b.data(), n, k, p, &mut out);
    Tensor::constant(vec![n, p], out)
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
