//! Dense N-D tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, cheaply clonable handle. Operations whose
//! inputs take part in differentiation record an op node on the result;
//! [`Tensor::backward`] replays those nodes in reverse execution order.
//! Inputs that do not require gradients produce plain values with no node,
//! so inference paths keep no graph alive.

mod autograd;
pub mod counter;
mod element;
pub mod gradcheck;
pub(crate) mod kernels;
mod ops;
pub mod parallel;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

pub use autograd::{GradTape, Gradients};
pub use element::{DType, Element};
pub use ops::{concat, conv2d, layer_norm};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward rule: maps the output gradient to one optional gradient per parent.
pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E]) -> Vec<Option<Vec<E>>> + Send + Sync>;

pub(crate) struct OpNode<E: Element> {
    pub(crate) name: &'static str,
    pub(crate) parents: Vec<Tensor<E>>,
    pub(crate) backward: BackwardFn<E>,
}

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<E>>>,
    op: Option<OpNode<E>>,
}

pub struct Tensor<E: Element = f32> {
    inner: Arc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<E> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("dtype", &E::DTYPE.name())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
    format!("[{}]", dims.join("×"))
}

impl<E: Element> Tensor<E> {
    fn build(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Option<OpNode<E>>) -> Self {
        debug_assert_eq!(kernels::numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                op,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(format!(
                "extents must be positive, got {}",
                shape_str(shape)
            )));
        }
        let expected = kernels::numel(shape);
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {} implies {expected} elements, got {}",
                shape_str(shape),
                data.len()
            )));
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Builds a tensor from `f64` values, converting to the element type.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| E::from_f64_lossy(v)).collect())
    }

    pub fn full(shape: &[usize], value: E) -> Result<Self> {
        Self::from_vec(shape, vec![value; kernels::numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut data = vec![E::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = E::one();
        }
        Self::from_vec(&[n, n], data)
    }

    /// Result of a differentiable op. A node is only attached when at least
    /// one parent participates in differentiation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        name: &'static str,
        parents: Vec<Tensor<E>>,
        backward: impl Fn(&[E]) -> Vec<Option<Vec<E>>> + Send + Sync + 'static,
    ) -> Self {
        if parents.iter().any(Tensor::requires_grad) {
            let op = OpNode {
                name,
                parents,
                backward: Box::new(backward),
            };
            Self::build(shape, data, true, Some(op))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    /// Returns a new leaf with the same values and the given gradient flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::build(self.shape().to_vec(), self.data().to_vec(), requires_grad, None)
    }

    /// A leaf copy that takes no part in differentiation.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    /// Unique identity; also orders op nodes by execution.
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() needs a one-element tensor, got {}",
                shape_str(self.shape())
            )));
        }
        Ok(self.inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.inner.op.as_ref().map(|op| op.name)
    }

    pub(crate) fn op(&self) -> Option<&OpNode<E>> {
        self.inner.op.as_ref()
    }

    /// Gradient accumulated into this leaf by previous `backward` calls.
    pub fn grad(&self) -> Option<Tensor<E>> {
        let guard = self.inner.grad.lock().expect("grad lock poisoned");
        guard
            .as_ref()
            .map(|g| Self::build(self.shape().to_vec(), g.clone(), false, None))
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock poisoned") = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[E]) {
        let mut guard = self.inner.grad.lock().expect("grad lock poisoned");
        match guard.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *guard = Some(g.to_vec()),
        }
    }

    /// Returns a leaf whose values are `f` applied elementwise. Untracked.
    pub fn map_values(&self, f: impl Fn(E) -> E) -> Self {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Self::build(self.shape().to_vec(), data, false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "max_abs_diff: {} vs {}",
                shape_str(self.shape()),
                shape_str(other.shape())
            )));
        }
        Ok(self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Converts to another element type as an untracked leaf.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self
            .data()
            .iter()
            .map(|v| F::from_f64_lossy(v.as_f64()))
            .collect();
        Tensor::build(self.shape().to_vec(), data, false, None)
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor<E>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
