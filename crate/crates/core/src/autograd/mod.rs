//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its value and, when gradients are
//! tracked, a closure mapping the output gradient to input gradients. Nodes
//! are appended in evaluation order, so a single reverse sweep suffices.

mod attention;
mod conv;
mod gemm;
mod ops;

use std::rc::Rc;

use crate::tensor::Tensor;

pub use attention::{attention_probabilities, AttentionMask};
pub use gemm::matmul;
pub use ops::BatchStats;

pub const NO_SOURCE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph that records backward closures.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), track: true }
    }

    /// Graph for inference: values only, nothing retained for backward.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), track: false }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Rc::new(t), Vec::new(), None, false)
    }

    /// Differentiable input (parameters, or inputs under gradient check).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let track = self.track;
        self.push(Rc::new(t), Vec::new(), None, track)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub(crate) fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Rc<Tensor>, parents: Vec<usize>, backward: Option<BackwardFn>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a custom operation. `backward` receives the gradient of the
    /// output and returns one optional gradient per entry of `inputs`.
    pub fn op<F>(&mut self, value: Tensor, inputs: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let requires = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let parents = inputs.iter().map(|v| v.0).collect();
        let backward: Option<BackwardFn> = if requires { Some(Box::new(backward)) } else { None };
        self.push(Rc::new(value), parents, backward, requires)
    }

    /// Gradients of the sum of `root`'s elements with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.nodes[root.0].value.shape().to_vec();
        grads[root.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "gradient shape for node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients(grads)
    }
}

pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}
