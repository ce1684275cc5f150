//! Dense row-major tensors used as autodiff values.
//!
//! A [`Tensor`] is a cheaply clonable handle to shared storage. Operations
//! are recorded on a [`crate::tape::Tape`]; gradients accumulate in place.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) struct TensorInner<S> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

/// Handle to an n-dimensional array of scalars, row-major.
pub struct Tensor<S: Scalar = f64> {
    inner: Rc<RefCell<TensorInner<S>>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor-new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self::from_parts(shape, data, false))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                requires_grad,
                grad: None,
            })),
        }
    }

    /// 1-D tensor from a value vector.
    pub fn from_vec(data: Vec<S>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n], data, false)
    }

    /// Rank-0 scalar.
    pub fn scalar(v: S) -> Self {
        Self::from_parts(vec![], vec![v], false)
    }

    /// 2-D tensor; `data` is row-major.
    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::from_parts(shape, vec![S::zero(); n], false)
    }

    /// Leaf that participates in gradient computation.
    pub fn param(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn value(&self) -> Vec<S> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Replaces the stored values; the shape is unchanged.
    pub fn set_data(&self, data: Vec<S>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data = data;
    }

    /// In-place SGD update `x -= lr * grad`; no-op when no gradient is set.
    pub fn sgd_step(&self, lr: S) {
        let mut inner = self.inner.borrow_mut();
        let TensorInner {
            ref mut data,
            ref grad,
            ..
        } = *inner;
        if let Some(g) = grad {
            for (x, gi) in data.iter_mut().zip(g.iter()) {
                *x = *x - lr * *gi;
            }
        }
    }

    pub(crate) fn add_grad(&self, contribution: &[S]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(inner.data.len(), contribution.len());
        match inner.grad {
            Some(ref mut g) => {
                for (gi, c) in g.iter_mut().zip(contribution.iter()) {
                    *gi = *gi + *c;
                }
            }
            None => inner.grad = Some(contribution.to_vec()),
        }
    }

    pub(crate) fn set_grad(&self, grad: Vec<S>) {
        self.inner.borrow_mut().grad = Some(grad);
    }

    /// Runs `f` over the current gradient, if any.
    pub(crate) fn with_grad<R>(&self, f: impl FnOnce(&[S]) -> R) -> Option<R> {
        let inner = self.inner.borrow();
        inner.grad.as_ref().map(|g| f(g))
    }

    /// Runs `f` over the current values without cloning.
    pub fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Fresh constant tensor holding a copy of the current values.
    pub fn detached(&self) -> Tensor<S> {
        let inner = self.inner.borrow();
        Tensor::from_parts(inner.shape.clone(), inner.data.clone(), false)
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("data", &inner.data)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_shape_product() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let t = Tensor::scalar(2.5f64);
        assert_eq!(t.shape(), Vec::<usize>::new());
        assert_eq!(t.numel(), 1);
        assert!(t.is_scalar());
        assert_eq!(t.item(), 2.5);
    }

    #[test]
    fn grad_accumulates_additively() {
        let t = Tensor::param(vec![2], vec![1.0f64, 2.0]).unwrap();
        t.add_grad(&[1.0, 1.0]);
        t.add_grad(&[0.5, -1.0]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 0.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let t = Tensor::param(vec![2], vec![1.0f64, 2.0]).unwrap();
        t.add_grad(&[10.0, -10.0]);
        t.sgd_step(0.1);
        assert_eq!(t.value(), vec![0.0, 3.0]);
    }

    #[test]
    fn generic_over_f32() {
        let t = Tensor::<f32>::from_vec(vec![1.0, 2.0]);
        assert_eq!(t.value(), vec![1.0f32, 2.0]);
    }
}
