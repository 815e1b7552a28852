use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Backward rule: receives the gradient of the node's output and the node's
/// parents, and accumulates into the parents' gradients.
pub type BackwardFn = Box<dyn Fn(&[f64], &[Value])>;

struct Node {
    data: Tensor,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Value>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A tensor participating in a reverse-mode computation graph.
///
/// Cloning is cheap (reference counted). A graph lives on one thread.
#[derive(Clone)]
pub struct Value(Rc<Node>);

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Value")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Value {
    /// Leaf that never receives gradients.
    pub fn constant(data: Tensor) -> Self {
        Self::leaf(data, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(data: Tensor) -> Self {
        Self::leaf(data, true)
    }

    fn leaf(data: Tensor, requires_grad: bool) -> Self {
        Value(Rc::new(Node {
            data,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        }))
    }

    /// Records a new node. When no parent tracks gradients the parents and
    /// backward rule are dropped immediately.
    pub fn from_op(data: Tensor, parents: Vec<Value>, backward: BackwardFn) -> Self {
        let requires_grad = parents.iter().any(Value::requires_grad);
        if !requires_grad {
            return Self::constant(data);
        }
        Value(Rc::new(Node {
            data,
            grad: RefCell::new(None),
            parents,
            backward: Some(backward),
            requires_grad,
        }))
    }

    pub fn data(&self) -> &Tensor {
        &self.0.data
    }

    pub fn values(&self) -> &[f64] {
        self.0.data.data()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Single element of a one-element value.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.values()[0]
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::new(self.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient, or zeros when nothing flowed here.
    pub fn grad_or_zeros(&self) -> Tensor {
        self.grad().unwrap_or_else(|| Tensor::zeros(self.shape()))
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn ptr_eq(&self, other: &Value) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Adds `g` into this node's gradient.
    pub fn accumulate(&self, g: &[f64]) {
        if !self.0.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.len());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Accumulates through a closure writing into the (lazily zeroed)
    /// gradient buffer, avoiding a temporary for sparse updates.
    pub fn accumulate_with(&self, f: impl FnOnce(&mut [f64])) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.len()]);
        f(buf);
    }

    /// Back-propagates from this scalar through every reachable node.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        self.accumulate(&[1.0]);
        for node in self.topo_order().iter().rev() {
            let Some(rule) = node.0.backward.as_ref() else {
                continue;
            };
            let grad = node.0.grad.borrow().clone();
            if let Some(g) = grad {
                rule(&g, &node.0.parents);
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that track gradients, parents before
    /// children.
    fn topo_order(&self) -> Vec<Value> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        // (node, children pushed?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&v.0);
            if expanded {
                order.push(v);
                continue;
            }
            if !seen.insert(key) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !seen.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
