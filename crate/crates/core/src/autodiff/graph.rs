//! Tape of recorded tensor operations and the reverse sweep over it.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees: the upstream gradient, the values of the
/// node's inputs, and the node's own forward value.
pub struct BackwardCtx<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: &'a [Rc<Tensor<T>>],
    pub output: &'a Tensor<T>,
}

/// Maps the upstream gradient to one optional gradient per input. `None`
/// means "no contribution".
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    op: &'static str,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the
/// recorded graph is acyclic by construction and a reverse index sweep is
/// a valid topological order.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that keeps forward values only; `backward` on it yields no
    /// gradients.
    pub fn no_grad() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push_node(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: self.record,
            op: "leaf",
        })
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push_node(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            op: "constant",
        })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op
    }

    /// Records an operation. `output` is checked for non-finite values;
    /// the closure is dropped when no input needs a gradient.
    pub fn record(
        &self,
        op: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        output.ensure_finite(op)?;
        let requires_grad = self.record && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        Ok(self.push_node(Node {
            value: Rc::new(output),
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            op,
        }))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let seed = Tensor::full(shape, T::one());
        self.backward_from(loss, seed)
    }

    /// Reverse sweep seeded with an arbitrary cotangent of `output`
    /// (a vector-Jacobian product).
    pub fn backward_from(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[output.0].value.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {:?} vs output {:?}",
                    seed.shape(),
                    nodes[output.0].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<Rc<Tensor<T>>> =
                node.inputs.iter().map(|&i| Rc::clone(&nodes[i].value)).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
            };
            let input_grads = backward(&ctx)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: node.op });
                }
                match &mut grads[input] {
                    Some(acc) => acc.axpy(T::one(), &g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients collected by a reverse sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
