//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is a reference-counted node of the computation graph. Every
//! operation that has at least one parent requiring a gradient records a
//! backward closure; [`Tensor::backward`] walks the graph once in reverse
//! topological order and accumulates gradients into each node.
//!
//! The graph lives as long as the tensors referencing it. There is no implicit
//! freeing after `backward`, so calling it twice accumulates.

mod conv;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

pub use conv::Conv2dOpts;

/// Produces the gradient for each parent, in order, given the gradient of the
/// output. `None` entries mean "no contribution".
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward closures.
///
/// Tensors produced inside the scope are constants even if their inputs
/// require gradients.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn fresh_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", "numel", n, data.len()));
        }
        Ok(Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        })))
    }

    /// A constant tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// A leaf tensor that collects gradients.
    pub fn variable(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![0.0; n], false).expect("consistent")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; n], false).expect("consistent")
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    /// Builds the result of a differentiable operation.
    ///
    /// When gradients are disabled, or no parent requires one, the result is a
    /// constant and `backward` is dropped unused.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<f64>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().expect("checked")))
        } else {
            None
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.0.shape.clone(), self.0.data.clone(), false).expect("consistent")
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Rank-4 extents `(B, C, H, W)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => Err(Error::dim(op, "rank", 4, s.len())),
        }
    }

    /// Back-propagates from this scalar into every requires-grad ancestor.
    ///
    /// Each node is visited once; gradients accumulate into any gradient
    /// already stored from earlier calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(bw) = &node.0.backward {
                let parent_grads = bw(&g);
                debug_assert_eq!(parent_grads.len(), node.0.parents.len());
                for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel());
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Requires-grad ancestors (including self), parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // (node, children_pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.0.parents {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::variable(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0]).unwrap();
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(*x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::variable(&[1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 6.0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::variable(&[1], vec![3.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap()[0], 12.0);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let x = Tensor::variable(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn diamond_graph_visits_each_node_once() {
        // y = x*2 used twice: loss = sum(y + y) => dloss/dx = 4
        let x = Tensor::variable(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.scale(2.0);
        let loss = y.add(&y).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(*x.grad().unwrap(), vec![4.0; 3]);
        assert_eq!(*y.grad().unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn no_grad_scope_produces_constants() {
        let x = Tensor::variable(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.scale(3.0));
        assert!(!y.requires_grad());
        assert!(grad_enabled());
        assert_eq!(y.data(), &[3.0, 6.0]);
    }

    #[test]
    fn mismatched_data_length_is_rejected() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    }
}
