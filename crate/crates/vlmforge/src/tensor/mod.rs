//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a graph node holding row-major `f64` data.
//! Operations build the graph eagerly; [`Tensor::backward`] walks it once in
//! reverse topological order and accumulates gradients into every node that
//! requires them. Leaves created with [`Tensor::param`] keep their gradients for
//! an optimizer to consume; everything else frees itself when the last handle
//! drops.
//!
//! Inference paths wrap their forwards in [`no_grad`], which skips graph
//! recording entirely while computing bit-identical values, so the same forward
//! code serves training and decoding.
//!
//! Shape misuse (mismatched dimensions, out-of-range indices, backward on a
//! non-scalar) is a programming error and panics with a descriptive message;
//! fallible user-facing validation lives at the call sites that accept external
//! input.

mod checkpoint;
mod fdcheck;
mod op_gradcheck;
mod ops;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, OptimState};
pub use fdcheck::{fd_grad, fd_grad_component, rel_err};
pub use op_gradcheck::check_all_ops;
pub use ops::box_fill;
pub use optim::{AdamW, OptimConfig};
pub use params::Parameters;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
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

/// Runs `f` with graph recording disabled (restored on exit, panic included).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|c| c.replace(false)));
    f()
}

type BackFn = Box<dyn Fn(&Inner)>;

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    back: Option<BackFn>,
}

/// Shared handle to one autodiff graph node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        back: Option<BackFn>,
    ) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                back,
            }),
        }
    }

    /// A constant (non-differentiable) tensor.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), data, false, vec![], None)
    }

    /// A scalar constant with shape `[1]`.
    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![v], &[1])
    }

    /// A trainable leaf; gradients accumulate here across backward passes.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), data, true, vec![], None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    /// Internal: builds an op output, recording the graph edge only when
    /// gradients are enabled and some input needs them. The backward closure is
    /// constructed lazily so inference pays nothing for it.
    pub(crate) fn op(
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        back: impl FnOnce() -> BackFn,
    ) -> Self {
        let record = grad_enabled() && inputs.iter().any(|t| t.inner.requires_grad);
        if record {
            let parents: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
            Tensor::new(shape, data, true, parents, Some(back()))
        } else {
            Tensor::new(shape, data, false, vec![], None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copies the node's values out.
    pub fn value(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Borrows the node's values (panics if an op is mid-write, which only
    /// happens on API misuse from a backward closure).
    pub fn data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// The single value of a `[1]`-shaped tensor.
    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "tensor: scalar_value on shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Overwrites the node's values (optimizer updates, finite-difference probes).
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "tensor: set_data length mismatch");
        d.copy_from_slice(new);
    }

    /// Current accumulated gradient, if any backward has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f64]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => *g = Some(contribution.to_vec()),
        }
    }

    /// Mutable access to the gradient buffer, allocated as zeros on first use.
    pub(crate) fn grad_mut(&self) -> std::cell::RefMut<'_, Vec<f64>> {
        {
            let mut g = self.inner.grad.borrow_mut();
            if g.is_none() {
                *g = Some(vec![0.0; self.numel()]);
            }
        }
        std::cell::RefMut::map(self.inner.grad.borrow_mut(), |g| g.as_mut().unwrap())
    }

    /// Reverse-mode sweep from a scalar node. Gradients accumulate (add) into
    /// every reachable node with `requires_grad`; call [`Parameters::zero_grad`]
    /// between steps.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "tensor: backward requires a scalar, got shape {:?}",
            self.shape()
        );
        // Iterative post-order DFS: parents appear before their consumers, so the
        // reversed order visits each node only after its output gradient is final.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                let next = node.inner.parents[child].clone();
                stack.push((node, child + 1));
                if visited.insert(next.inner.id) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        // Interior (non-leaf) gradient buffers are per-sweep scratch: clear them
        // so repeated backwards accumulate only into leaves.
        for node in &order {
            if node.inner.back.is_some() {
                node.zero_grad();
            }
        }
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(back) = &node.inner.back {
                back(&node.inner);
            }
        }
    }
}

impl Inner {
    pub(crate) fn data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.data.borrow()
    }

    /// Output gradient as seen by a backward closure.
    pub(crate) fn out_grad(&self) -> Vec<f64> {
        self.grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![0.0; self.shape.iter().product()])
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_flags_and_values() {
        let c = Tensor::from_vec(vec![1.0, 2.0], &[2]);
        let p = Tensor::param(vec![3.0, 4.0], &[2]);
        assert!(!c.requires_grad());
        assert!(p.requires_grad());
        assert_eq!(p.value(), vec![3.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "data length")]
    fn shape_data_mismatch_panics() {
        let _ = Tensor::from_vec(vec![1.0; 3], &[2, 2]);
    }

    #[test]
    #[should_panic(expected = "backward requires a scalar")]
    fn backward_on_non_scalar_panics() {
        let p = Tensor::param(vec![1.0, 2.0], &[2]);
        p.backward();
    }

    #[test]
    fn no_grad_skips_recording() {
        let p = Tensor::param(vec![1.0, 2.0], &[2]);
        let y = no_grad(|| p.add(&p));
        assert!(!y.requires_grad());
        assert_eq!(y.value(), vec![2.0, 4.0]);
        // and recording resumes afterwards
        let z = p.add(&p);
        assert!(z.requires_grad());
    }

    #[test]
    fn grad_accumulates_across_backwards() {
        let p = Tensor::param(vec![2.0], &[1]);
        let y = p.mul(&p); // y = p^2, dy/dp = 4
        y.backward();
        y.backward();
        assert_eq!(p.grad().unwrap(), vec![8.0]); // two sweeps accumulate
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // y = p*p + p  => dy/dp = 2p + 1 = 7 at p=3
        let p = Tensor::param(vec![3.0], &[1]);
        let y = p.mul(&p).add(&p);
        y.backward();
        assert_eq!(p.grad().unwrap(), vec![7.0]);
    }
}
