//! Dense n-dimensional arrays with shape-checked operations and
//! reverse-mode gradient computation.
//!
//! Every differentiable operation records a [`TapeNode`] on the tensor it
//! produces: the node holds handles to the operation's inputs and a closure
//! that maps an output adjoint to input adjoints. [`Tensor::backward`]
//! topologically sorts this implicit tape and replays it in reverse,
//! consuming each node as it goes; a second backward without a new forward
//! pass is an error.

mod conv;
mod elem;
mod gradcheck;
mod ops;
mod serial;

pub use elem::{Dtype, Elem};
pub use gradcheck::{grad_check, GradCheckReport};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;

use crate::{Error, Result};

/// Reverse-mode record attached to an operation's output.
pub(crate) struct TapeNode<T: Elem> {
    pub(crate) op: &'static str,
    pub(crate) parents: Vec<Tensor<T>>,
    /// Maps the output adjoint to one optional adjoint per parent.
    pub(crate) backward: Box<dyn FnOnce(&[T]) -> Vec<Option<Vec<T>>>>,
}

pub(crate) struct Inner<T: Elem> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    node: Option<TapeNode<T>>,
    consumed: bool,
}

/// Dense tensor; the universal value type of the crate.
///
/// Cheap to clone (shared handle). Values are immutable after construction
/// except through the training context's explicit parameter updates.
pub struct Tensor<T: Elem> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T: Elem> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Elem> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled (teacher forward passes,
/// evaluation, oracles).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Elem> Tensor<T> {
    // ---- constructors ---------------------------------------------------

    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "from_vec",
                details: format!("shape {:?} does not hold {} elements", shape, data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Self::raw(shape, data))
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad: false,
                node: None,
                consumed: false,
            })),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::raw(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::raw(shape, vec![T::zero(); n])
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = numel(&shape);
        Self::raw(shape, vec![v; n])
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, T::one())
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut d = vec![T::zero(); n * n];
        for i in 0..n {
            d[i * n + i] = T::one();
        }
        Self::raw(vec![n, n], d)
    }

    /// Standard-normal samples.
    pub fn randn(shape: Vec<usize>, rng: &mut impl Rng) -> Self {
        let n = numel(&shape);
        let data = (0..n).map(|_| T::of_f64(normal_sample(rng))).collect();
        Self::raw(shape, data)
    }

    /// Normal samples with `std`, resampled until |z| <= 2 (truncated).
    pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| {
                let mut z = normal_sample(rng);
                while z.abs() > 2.0 {
                    z = normal_sample(rng);
                }
                T::of_f64(z * std)
            })
            .collect();
        Self::raw(shape, data)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| T::of_f64(rng.gen_range(lo..hi)))
            .collect();
        Self::raw(shape, data)
    }

    // ---- accessors ------------------------------------------------------

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    /// Mutable element access. Reserved for the training context (optimizer
    /// steps, checkpoint loading); mutating a tensor that participates in a
    /// live graph invalidates recorded adjoints.
    pub fn data_mut(&self) -> RefMut<'_, [T]> {
        RefMut::map(self.inner.borrow_mut(), |i| i.data.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    pub fn item(&self) -> Result<T> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(Error::Shape {
                op: "item",
                details: format!("expected scalar, got shape {:?}", inner.shape),
            });
        }
        Ok(inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) -> &Self {
        self.inner.borrow_mut().requires_grad = v;
        self
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn grad_mut(&self) -> RefMut<'_, Option<Vec<T>>> {
        RefMut::map(self.inner.borrow_mut(), |i| &mut i.grad)
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// A gradient-free copy sharing no graph history.
    pub fn detach(&self) -> Tensor<T> {
        let inner = self.inner.borrow();
        Tensor::raw(inner.shape.clone(), inner.data.clone())
    }

    pub(crate) fn ptr(&self) -> *const () {
        Rc::as_ptr(&self.inner) as *const ()
    }

    // ---- op plumbing ----------------------------------------------------

    /// Wraps an op result: enforces the fail-fast NaN/Inf policy and records
    /// a tape node when gradients are being tracked.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl FnOnce(&[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Result<Self> {
        debug_assert_eq!(numel(&shape), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let out = Tensor::raw(shape, data);
        if track {
            out.inner.borrow_mut().requires_grad = true;
            out.inner.borrow_mut().node = Some(TapeNode {
                op,
                parents,
                backward: Box::new(backward),
            });
        }
        Ok(out)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor reachable through the tape, then consumes it.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(Error::NonScalarLoss(inner.shape.clone()));
            }
            if inner.consumed {
                return Err(Error::StaleTape);
            }
            if inner.node.is_none() && !inner.requires_grad {
                return Err(Error::StaleTape);
            }
        }

        let order = topo_order(self);

        // Seed the root adjoint.
        {
            let mut inner = self.inner.borrow_mut();
            inner.grad = Some(vec![T::one()]);
        }

        for t in order.iter().rev() {
            let node = t.inner.borrow_mut().node.take();
            let Some(node) = node else { continue };
            let adjoint = match t.inner.borrow().grad.clone() {
                Some(g) => g,
                // Reachable only through non-recorded edges; nothing flows.
                None => continue,
            };
            let parent_grads = (node.backward)(&adjoint);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !p.requires_grad() {
                    continue;
                }
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: node.op });
                }
                let mut pin = p.inner.borrow_mut();
                match pin.grad.as_mut() {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += *v;
                        }
                    }
                    None => pin.grad = Some(g),
                }
            }
        }

        self.inner.borrow_mut().consumed = true;
        Ok(())
    }
}

fn topo_order<T: Elem>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const ()> = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.inner.borrow().node {
            for p in &node.parents {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

fn normal_sample(rng: &mut impl Rng) -> f64 {
    // Box-Muller; two uniforms per sample keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
