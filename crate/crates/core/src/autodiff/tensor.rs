use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{Error, Result};

use super::ops::Op;

/// Scalar element type of the engine: `f32` for training, `f64` for the
/// finite-difference oracle.
pub trait Real:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
}

macro_rules! impl_real {
    ($ty:ty) => {
        impl Real for $ty {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $ty
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            fn minimum(self, other: Self) -> Self {
                self.min(other)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// Run `f` with tape recording disabled. Nestable.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
        }
    }
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let _guard = Guard;
    f()
}

pub(super) fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

pub(super) struct Inner<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: Option<Op<T>>,
    sphere_projected: Cell<bool>,
}

/// Dense n-dimensional tensor with optional gradient tracking.
///
/// Cloning is cheap (shared node). Data is row-major.
pub struct Tensor<T: Real> {
    inner: Rc<Inner<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn shape_product(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn new_leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op: None,
                sphere_projected: Cell::new(false),
            }),
        }
    }

    /// Leaf tensor without gradient tracking. Errors on shape/data length
    /// mismatch or non-finite values.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape_product(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: format!("{shape:?}"),
                rhs: format!("len {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Self::new_leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf: like [`from_vec`](Self::from_vec) but tracked.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape_product(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "param",
                lhs: format!("{shape:?}"),
                rhs: format!("len {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "param" });
        }
        Ok(Self::new_leaf(data, shape.to_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_leaf(vec![T::ZERO; shape_product(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new_leaf(vec![value; shape_product(shape)], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn scalar(value: T) -> Self {
        Self::new_leaf(vec![value], vec![1], false)
    }

    /// Result node. Records the op only when some input is tracked and
    /// recording is enabled.
    pub(super) fn from_op(data: Vec<T>, shape: Vec<usize>, tracked: bool, op: Op<T>) -> Self {
        let record = tracked && grad_enabled();
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: record,
                op: if record { Some(op) } else { None },
                sphere_projected: Cell::new(false),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        shape_product(&self.inner.shape)
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::InvalidInput(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrite the data in place (same shape). Used by the optimizer and
    /// the finite-difference probe.
    pub fn set_data(&self, new: &[T]) -> Result<()> {
        if new.len() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                lhs: format!("{:?}", self.shape()),
                rhs: format!("len {}", new.len()),
            });
        }
        self.inner.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    pub(crate) fn set_element(&self, index: usize, value: T) {
        self.inner.data.borrow_mut()[index] = value;
    }

    /// Accumulated gradient, if any backward pass has reached this leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Leaf copy of this tensor's current data, cut off from the tape.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_leaf(self.to_vec(), self.inner.shape.clone(), false)
    }

    pub fn is_sphere_projected(&self) -> bool {
        self.inner.sphere_projected.get()
    }

    pub(crate) fn mark_sphere_projected(&self) {
        self.inner.sphere_projected.set(true);
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(super) fn op(&self) -> Option<&Op<T>> {
        self.inner.op.as_ref()
    }

    /// Reverse-mode sweep from a scalar loss. Gradients of every reachable
    /// tracked leaf are accumulated into its `grad` (adding to whatever a
    /// previous backward left there; clear with [`zero_grad`](Self::zero_grad)).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::BackwardNonScalar {
                numel: self.numel(),
            });
        }
        if self.inner.op.is_none() {
            return Err(Error::BackwardNoTape);
        }

        // Collect tracked nodes reachable from the loss. Creation ids are
        // monotone, so descending id order is reverse execution order.
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        collect(self, &mut seen, &mut nodes);
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::ONE]);

        for node in &nodes {
            let Some(op) = node.op() else { continue };
            let Some(gout) = grads.remove(&node.id()) else {
                continue;
            };
            op.backward(node, &gout, &mut grads)?;
        }

        for node in &nodes {
            if node.is_leaf() {
                if let Some(g) = grads.remove(&node.id()) {
                    let mut slot = node.inner.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(g.iter()) {
                                *a += *b;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

fn collect<T: Real>(node: &Tensor<T>, seen: &mut HashSet<u64>, out: &mut Vec<Tensor<T>>) {
    if !node.requires_grad() || !seen.insert(node.id()) {
        return;
    }
    out.push(node.clone());
    if let Some(op) = node.op() {
        for input in op.inputs() {
            collect(input, seen, out);
        }
    }
}

/// Add `g` into the running gradient for `t`, if `t` is tracked.
pub(super) fn accumulate<T: Real>(grads: &mut HashMap<u64, Vec<T>>, t: &Tensor<T>, g: Vec<T>) {
    if !t.requires_grad() {
        return;
    }
    match grads.entry(t.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(g.iter()) {
                *a += *b;
            }
        }
        std::collections::hash_map::Entry::Vacant(v) => {
            v.insert(g);
        }
    }
}
