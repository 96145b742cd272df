use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::array::Array;

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule of a recorded operation.
///
/// Returns one entry per input, in input order. `None` means no gradient
/// flows to that input.
pub(crate) trait Backward {
    fn backward(&self, grad: &Array, inputs: &[Tensor], output: &Array) -> Vec<Option<Array>>;
}

struct Node {
    id: usize,
    value: Array,
    requires_grad: bool,
    inputs: Vec<Tensor>,
    op: Option<Box<dyn Backward>>,
}

/// Node of a dynamically recorded computation graph.
///
/// Node ids grow monotonically on a thread, so every input has a smaller id
/// than its consumers and reverse id order is a valid topological order.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl Tensor {
    /// Leaf that never receives gradient.
    pub fn constant(value: Array) -> Self {
        Self(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            inputs: Vec::new(),
            op: None,
        }))
    }

    /// Leaf whose gradient is collected by [`Tensor::backward`].
    pub fn param(value: Array) -> Self {
        Self(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            inputs: Vec::new(),
            op: None,
        }))
    }

    pub(crate) fn from_op(value: Array, inputs: Vec<Tensor>, op: impl Backward + 'static) -> Self {
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        if !requires_grad {
            return Self::constant(value);
        }
        Self(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            inputs,
            op: Some(Box::new(op)),
        }))
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    /// Reverse-mode sweep from a single-element tensor.
    ///
    /// Only gradients of leaves created with [`Tensor::param`] are kept.
    pub fn backward(&self) -> Gradients {
        assert_eq!(
            self.value().len(),
            1,
            "backward() needs a single-element root, got shape {:?}",
            self.shape()
        );
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return grads;
        }

        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            for input in &t.0.inputs {
                if input.requires_grad() && !seen.contains(&input.id()) {
                    stack.push(input.clone());
                }
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<usize, Array> = HashMap::new();
        pending.insert(self.id(), Array::full(self.shape(), 1.0));
        for node in order {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            let Some(op) = &node.0.op else {
                grads.map.insert(node.id(), grad);
                continue;
            };
            let input_grads = op.backward(&grad, &node.0.inputs, &node.0.value);
            debug_assert_eq!(input_grads.len(), node.0.inputs.len());
            for (input, g) in node.0.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.shape(), input.shape());
                match pending.get_mut(&input.id()) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        pending.insert(input.id(), g);
                    }
                }
            }
        }
        grads
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id())
            .field("requires_grad", &self.requires_grad())
            .field("value", self.value())
            .finish()
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Default, Debug)]
pub struct Gradients {
    map: HashMap<usize, Array>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&Array> {
        self.map.get(&leaf.id())
    }

    pub fn remove(&mut self, leaf: &Tensor) -> Option<Array> {
        self.map.remove(&leaf.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
