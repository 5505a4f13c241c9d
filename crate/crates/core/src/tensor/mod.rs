//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major, reference-counted graph nodes. Ops record their
//! parents plus a backward closure; `backward()` on a scalar walks the graph
//! in reverse topological order and accumulates gradients into every
//! reachable tensor that needs them. Everything is generic over the element
//! type: f64 for gradient checks and oracles, f32 for training and inference.

mod conv;
mod gradcheck;
mod linalg;
mod ops;
mod sample;
mod shuffle;

pub use gradcheck::{grad_check, grad_check_multi};

use crate::scalar::Scalar;
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Run `f` with graph recording disabled. Intermediates are freed as soon as
/// they go out of scope, which is what keeps inference memory flat.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

/// Tracks bytes held by live tensor data buffers on this thread. Used by the
/// patch-rendering tests to compare peak footprints.
pub mod mem {
    use std::cell::Cell;

    thread_local! {
        static CURRENT: Cell<usize> = const { Cell::new(0) };
        static PEAK: Cell<usize> = const { Cell::new(0) };
    }

    pub(super) fn alloc(bytes: usize) {
        CURRENT.with(|c| {
            let now = c.get() + bytes;
            c.set(now);
            PEAK.with(|p| {
                if now > p.get() {
                    p.set(now);
                }
            });
        });
    }

    pub(super) fn free(bytes: usize) {
        CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
    }

    pub fn current_bytes() -> usize {
        CURRENT.with(|c| c.get())
    }

    pub fn peak_bytes() -> usize {
        PEAK.with(|p| p.get())
    }

    pub fn reset_peak() {
        PEAK.with(|p| CURRENT.with(|c| p.set(c.get())));
    }
}

type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>])>;

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    needs_grad: bool,
    parents: Vec<Tensor<T>>,
    backward_fn: Option<BackwardFn<T>>,
}

impl<T: Scalar> Drop for Node<T> {
    fn drop(&mut self) {
        let mut bytes = self.data.borrow().len() * std::mem::size_of::<T>();
        if self.grad.borrow().is_some() {
            bytes += self.shape.iter().product::<usize>() * std::mem::size_of::<T>();
        }
        mem::free(bytes);
    }
}

pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}, id={})", self.shape(), self.id())
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<T>,
        needs_grad: bool,
        parents: Vec<Tensor<T>>,
        backward_fn: Option<BackwardFn<T>>,
    ) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        mem::alloc(data.len() * std::mem::size_of::<T>());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                needs_grad,
                parents,
                backward_fn,
            }),
        }
    }

    /// Leaf tensor; set `requires_grad` for trainable parameters.
    pub fn leaf(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Self {
        Self::new_node(shape.to_vec(), data, requires_grad, Vec::new(), None)
    }

    /// Non-differentiable input (images, masks, deltas, ...).
    pub fn constant(shape: &[usize], data: Vec<T>) -> Self {
        Self::leaf(shape, data, false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(shape, vec![T::ZERO; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::constant(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(&[1], vec![v])
    }

    /// Build an op-result node. Parents and the backward closure are dropped
    /// when no input needs gradients (or recording is off).
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward_fn: impl Fn(&[T], &[Tensor<T>]) + 'static,
    ) -> Self {
        let needs = grad_enabled() && parents.iter().any(|p| p.node.needs_grad);
        if needs {
            Self::new_node(shape, data, true, parents, Some(Box::new(backward_fn)))
        } else {
            Self::new_node(shape, data, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.needs_grad && self.node.backward_fn.is_none() && self.node.parents.is_empty()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// Mutable access to raw data (optimizer updates, gradcheck probes).
    pub fn data_mut(&self) -> std::cell::RefMut<'_, Vec<T>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar shape {:?}", self.shape());
        self.node.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    /// Reset the gradient buffer to zeros (allocating it if absent), so that
    /// parameters untouched by the next backward pass report zero gradients.
    pub fn zero_grad(&self) {
        let n = self.numel();
        let mut g = self.node.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => buf.iter_mut().for_each(|v| *v = T::ZERO),
            None => {
                mem::alloc(n * std::mem::size_of::<T>());
                *g = Some(vec![T::ZERO; n]);
            }
        }
    }

    pub fn clear_grad(&self) {
        let mut g = self.node.grad.borrow_mut();
        if g.take().is_some() {
            mem::free(self.numel() * std::mem::size_of::<T>());
        }
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        if !self.node.needs_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.numel());
        let mut gr = self.node.grad.borrow_mut();
        match gr.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += *b;
                }
            }
            None => {
                mem::alloc(g.len() * std::mem::size_of::<T>());
                *gr = Some(g.to_vec());
            }
        }
    }

    /// Copy of the data as a fresh constant, cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::constant(self.shape(), self.to_vec())
    }

    /// Reverse-mode accumulation from a scalar loss.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape()
        );
        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = Vec::new();
        if self.node.needs_grad {
            visited.insert(self.id());
            stack.push((self.clone(), 0));
        }
        while let Some((t, ci)) = stack.pop() {
            if ci < t.node.parents.len() {
                stack.push((t.clone(), ci + 1));
                let p = t.node.parents[ci].clone();
                if p.node.needs_grad && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                topo.push(t);
            }
        }
        self.accumulate_grad(&[T::ONE]);
        for t in topo.iter().rev() {
            if let Some(f) = &t.node.backward_fn {
                let g = t.node.grad.borrow();
                if let Some(g) = g.as_ref() {
                    f(g, &t.node.parents);
                }
            }
        }
    }
}

/// Sum with an order-independent result: addends are sorted by value first,
/// so any permutation of the same multiset produces identical bits. Used for
/// every reduction whose index set is "input views" or "view pairs".
pub(crate) fn sorted_sum<T: Scalar>(vals: &mut [T]) -> T {
    vals.sort_unstable_by(T::total_cmp);
    let mut acc = T::ZERO;
    for v in vals {
        acc += *v;
    }
    acc
}

pub(crate) fn plain_sum<T: Scalar>(vals: &[T]) -> T {
    let mut acc = T::ZERO;
    for v in vals {
        acc += *v;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let t = Tensor::<f64>::leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.to_vec()[4], 5.0);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_data_mismatch_panics() {
        let _ = Tensor::<f64>::leaf(&[2, 2], vec![1.0], false);
    }

    #[test]
    fn zero_grad_allocates_zeros() {
        let t = Tensor::<f64>::leaf(&[3], vec![1.0, 2.0, 3.0], true);
        assert!(t.grad().is_none());
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn sorted_sum_is_permutation_invariant() {
        let a = [0.1f64, 1e16, -0.1, 7.3, -1e16, 2.2];
        let mut p1 = a;
        let mut p2 = [7.3, -1e16, 0.1, 2.2, 1e16, -0.1];
        let s1: f64 = sorted_sum(&mut p1);
        let s2: f64 = sorted_sum(&mut p2);
        assert_eq!(s1.to_bits(), s2.to_bits());
    }

    #[test]
    fn mem_meter_tracks_alloc_and_free() {
        mem::reset_peak();
        let before = mem::current_bytes();
        {
            let _t = Tensor::<f64>::zeros(&[1024]);
            assert!(mem::current_bytes() >= before + 8 * 1024);
        }
        assert_eq!(mem::current_bytes(), before);
    }

    #[test]
    fn no_grad_prunes_graph() {
        let x = Tensor::<f64>::leaf(&[2], vec![1.0, 2.0], true);
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.node.needs_grad);
        assert!(y.node.parents.is_empty());
    }
}
