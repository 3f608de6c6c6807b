//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted graph node. Nodes that do not depend on
//! any gradient-tracking leaf carry no backward closure and keep no parents,
//! so inference with constant parameters builds no graph at all.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::tensor::Tensor;

/// Everything a backward closure may look at.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub out: &'a Tensor,
    pub parents: &'a [Var],
}

impl BackwardCtx<'_> {
    pub fn input(&self, i: usize) -> &Tensor {
        self.parents[i].value()
    }

    pub fn needs(&self, i: usize) -> bool {
        self.parents[i].requires_grad()
    }
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    grad: RefCell<Option<Tensor>>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, grad={})", self.0.value, self.0.requires_grad)
    }
}

impl Var {
    /// A constant: never receives a gradient.
    pub fn constant(value: Tensor) -> Self {
        Self(Rc::new(Node {
            value,
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
            grad: RefCell::new(None),
        }))
    }

    /// A leaf whose gradient is recorded by [`Var::backward`].
    pub fn leaf(value: Tensor) -> Self {
        Self(Rc::new(Node {
            value,
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
            grad: RefCell::new(None),
        }))
    }

    /// Builds an op node. `backward` returns one optional gradient per
    /// parent; it is only stored if some parent tracks gradients.
    pub fn from_op(
        value: Tensor,
        parents: Vec<Var>,
        backward: impl Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    ) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Self(Rc::new(Node {
                value,
                requires_grad: true,
                parents,
                backward: Some(Box::new(backward)),
                grad: RefCell::new(None),
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    fn is_leaf(&self) -> bool {
        self.0.requires_grad && self.0.backward.is_none()
    }

    /// Gradient accumulated on a leaf by the last `backward` call.
    pub fn grad(&self) -> Option<Tensor> {
        self.0.grad.borrow().clone()
    }

    pub fn take_grad(&self) -> Option<Tensor> {
        self.0.grad.borrow_mut().take()
    }

    /// Cuts the graph: same value, no gradient flow.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Back-propagates from a scalar output with seed gradient 1.
    pub fn backward(&self) {
        assert_eq!(self.value().numel(), 1, "backward() needs a scalar output");
        self.backward_with(Tensor::full(self.shape(), 1.0));
    }

    pub fn backward_with(&self, seed: Tensor) {
        if !self.requires_grad() {
            return;
        }
        // post-order DFS gives a topological order
        let mut order: Vec<Var> = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Var, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(v.key()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }

        let mut grads: HashMap<*const Node, Tensor> = HashMap::new();
        grads.insert(self.key(), seed);
        for v in order.iter().rev() {
            let Some(g) = grads.remove(&v.key()) else { continue };
            if v.is_leaf() {
                let mut slot = v.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => *slot = Some(g),
                }
                continue;
            }
            let Some(bw) = v.0.backward.as_ref() else { continue };
            let ctx = BackwardCtx {
                grad: &g,
                out: &v.0.value,
                parents: &v.0.parents,
            };
            let pgrads = bw(&ctx);
            debug_assert_eq!(pgrads.len(), v.0.parents.len());
            for (p, pg) in v.0.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), p.shape(), "gradient shape mismatch");
                match grads.get_mut(&p.key()) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(p.key(), pg);
                    }
                }
            }
        }
    }
}
