//! Minimal reverse-mode automatic differentiation over `ndarray` in f64.
//!
//! A [`Var`] wraps a value plus an optional backward rule. Operations build a
//! DAG; [`Var::backward`] walks it in reverse creation order and accumulates
//! gradients into every node that requires them. Node ids increase
//! monotonically as the graph is built, so descending-id order is a valid
//! topological order and the whole pass is deterministic.
//!
//! The engine is deliberately small: f64 only, CPU only, no in-place graph
//! mutation. Leaf parameters keep their value in a `RefCell` so an optimizer
//! can update them between steps while the `Var` handles stay alive.

mod conv;

pub mod ops;

pub mod check;

pub use conv::{conv2d, upsample_nearest};

use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

/// Dynamic-dimension f64 array, the only tensor payload the engine supports.
pub type Arr = ArrayD<f64>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule: given dL/d(output), produce dL/d(parent) for each parent.
/// `None` entries are skipped (parent does not need a gradient).
type BackFn = Box<dyn Fn(&Arr) -> Vec<Option<Arr>>>;

struct Node {
    id: u64,
    value: RefCell<Arr>,
    grad: RefCell<Option<Arr>>,
    /// Leaf flag: accumulate a gradient here during backward.
    requires_grad: bool,
    /// True when this node or anything upstream of it requires a gradient.
    needs_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackFn>,
}

/// A node in the autodiff graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    /// Constant leaf: participates in the forward pass only.
    pub fn constant(value: Arr) -> Self {
        Var(Rc::new(Node {
            id: fresh_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad: false,
            needs_grad: false,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Trainable leaf: gradients accumulate here.
    pub fn param(value: Arr) -> Self {
        Var(Rc::new(Node {
            id: fresh_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad: true,
            needs_grad: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Scalar constant with 0-d shape.
    pub fn scalar(v: f64) -> Self {
        Var::constant(ndarray::arr0(v).into_dyn())
    }

    pub(crate) fn from_op(value: Arr, parents: Vec<Var>, backward: BackFn) -> Self {
        let needs_grad = parents.iter().any(|p| p.0.needs_grad);
        Var(Rc::new(Node {
            id: fresh_id(),
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad: false,
            needs_grad,
            parents,
            backward: if needs_grad { Some(backward) } else { None },
        }))
    }

    /// Copy of the current value.
    pub fn value(&self) -> Arr {
        self.0.value.borrow().clone()
    }

    /// Borrow the value without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.0.value.borrow())
    }

    /// Value of a 0-d (scalar) tensor.
    pub fn scalar_value(&self) -> f64 {
        let v = self.0.value.borrow();
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar tensor");
        *v.iter().next().expect("empty tensor")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Gradient accumulated by the last `backward` call, if any.
    pub fn grad(&self) -> Option<Arr> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrite the value of a leaf in place (optimizer step).
    ///
    /// Panics on non-leaf nodes: op outputs are immutable by construction.
    pub fn set_value(&self, value: Arr) {
        assert!(
            self.0.parents.is_empty(),
            "set_value is only valid on leaf tensors"
        );
        *self.0.value.borrow_mut() = value;
    }

    /// Cut the graph: same value, no history, no gradient.
    pub fn detach(&self) -> Var {
        Var::constant(self.value())
    }

    pub fn is_finite(&self) -> bool {
        self.0.value.borrow().iter().all(|v| v.is_finite())
    }

    /// Reverse pass from a scalar root. Accumulates gradients into every
    /// reachable node with `requires_grad`, replacing previous contents.
    pub fn backward(&self) {
        let root_shape = self.shape();
        assert_eq!(
            root_shape.iter().product::<usize>(),
            1,
            "backward requires a scalar root, got shape {root_shape:?}"
        );

        // Collect reachable nodes that need gradients.
        let mut stack = vec![self.clone()];
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Var> = Vec::new();
        while let Some(v) = stack.pop() {
            if !v.0.needs_grad || !seen.insert(v.0.id) {
                continue;
            }
            for p in &v.0.parents {
                stack.push(p.clone());
            }
            nodes.push(v);
        }
        // Descending id = consumers before producers.
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        for v in &nodes {
            *v.0.grad.borrow_mut() = None;
        }
        *self.0.grad.borrow_mut() = Some(ArrayD::ones(IxDyn(&root_shape)));

        for v in &nodes {
            let grad = v.0.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            let Some(back) = &v.0.backward else { continue };
            let parent_grads = back(&grad);
            debug_assert_eq!(parent_grads.len(), v.0.parents.len());
            for (p, g) in v.0.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !p.0.needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    p.0.value.borrow().shape(),
                    "gradient shape mismatch"
                );
                let mut slot = p.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => *acc += &g,
                    None => *slot = Some(g),
                }
            }
            // Interior grads are no longer needed once propagated.
            if !v.0.requires_grad {
                *v.0.grad.borrow_mut() = None;
            }
        }
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn backward_accumulates_through_shared_input() {
        // f(x) = sum(x * x) + sum(x) -> df/dx = 2x + 1
        let x = Var::param(arr1(&[1.0, -2.0, 3.0]).into_dyn());
        let loss = x.mul(&x).sum_all().add(&x.sum_all());
        loss.backward();
        let g = x.grad().unwrap();
        assert_eq!(g.as_slice().unwrap(), &[3.0, -3.0, 7.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Var::param(arr1(&[2.0]).into_dyn());
        let loss = x.detach().mul(&x).sum_all();
        loss.backward();
        // d/dx [c * x] = c = 2.0, not 2x = 4.0
        assert_eq!(x.grad().unwrap().as_slice().unwrap(), &[2.0]);
    }

    #[test]
    fn second_backward_replaces_gradient() {
        let x = Var::param(arr1(&[1.0, 2.0]).into_dyn());
        let loss = x.mul_scalar(3.0).sum_all();
        loss.backward();
        loss.backward();
        assert_eq!(x.grad().unwrap().as_slice().unwrap(), &[3.0, 3.0]);
    }
}
