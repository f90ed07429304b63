//! Dense row-major tensor with an optional gradient buffer.
//!
//! `Tensor` is a cheap handle (`Rc`) onto shared storage: cloning it aliases
//! the same data, which is how parameters stay shared between the tape that
//! records a forward pass and the optimizer that later updates them.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{DetaError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
struct TensorInner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// Handle to a dense f64 tensor. Clones share storage and identity.
#[derive(Clone, Debug)]
pub struct Tensor {
    id: u64,
    inner: Rc<RefCell<TensorInner>>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DetaError::invalid(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::from_parts(shape, data))
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                grad: None,
            })),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape, vec![0.0; numel])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// 1-D row vector.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n], data)
    }

    /// 2-D matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Uniformly sampled entries in `[lo, hi)`.
    pub fn rand_uniform<R: Rng>(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Self::from_parts(shape, data)
    }

    /// Stable identity used by the tape and optimizer slot maps.
    pub fn id(&self) -> u64 {
        self.id
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

    /// Borrow the raw data without cloning.
    pub fn data_ref(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |t| t.data.as_slice())
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Replaces the stored values. Shape must be preserved.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(DetaError::invalid(format!(
                "set_data: expected {} elements, got {}",
                inner.data.len(),
                data.len()
            )));
        }
        inner.data = data;
        Ok(())
    }

    /// In-place update of every element; used by the optimizer.
    pub fn update_data(&self, f: impl FnMut(usize, f64) -> f64) {
        let mut inner = self.inner.borrow_mut();
        let mut f = f;
        for (i, v) in inner.data.iter_mut().enumerate() {
            *v = f(i, *v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        match inner.grad.as_mut() {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => inner.grad = Some(vec![0.0; n]),
        }
    }

    /// Takes the gradient out, leaving `None`.
    pub(crate) fn take_grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow_mut().grad.take()
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        debug_assert_eq!(contribution.len(), n);
        match inner.grad.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => {
                let mut g = vec![0.0; n];
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
                inner.grad = Some(g);
            }
        }
    }
}
