//! Reverse-mode automatic differentiation over an append-only graph.
//!
//! A [`Graph`] owns every intermediate tensor of one forward pass. Nodes are
//! appended in evaluation order, so an input always precedes its consumers
//! and the backward sweep is a single pass over the nodes in reverse.
//!
//! Differentiable operations implement [`Function`]. The basic tensor
//! algebra lives in [`ops`]; layers, attention and losses define their own
//! functions next to their forward kernels.

mod ops;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use ops::{concat_forward, softmax_forward};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
pub trait Function<T: Scalar> {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Var>;

    /// Gradients with respect to each entry of [`Function::inputs`], in
    /// order. Entries may be `None` for inputs that do not require grad.
    fn backward(
        &self,
        graph: &Graph<T>,
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    function: Option<Box<dyn Function<T>>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            function: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (never receives a gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Record the result of `function`. The backward rule is dropped when no
    /// input requires a gradient.
    pub fn record(&mut self, value: Tensor<T>, function: Box<dyn Function<T>>) -> Var {
        let requires_grad = function
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        debug_assert!(function.inputs().iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            function: requires_grad.then_some(function),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        self.nodes[var.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Accumulate `∂root/∂v` into the gradient of every node `v` that
    /// requires grad and is reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }

        let mut pending: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        pending[root.0] = Some(Tensor::full(&root_shape, T::one()));

        for idx in (0..=root.0).rev() {
            let Some(grad_out) = pending[idx].take() else {
                continue;
            };
            if let Some(function) = &self.nodes[idx].function {
                let inputs = function.inputs();
                let grads = function.backward(self, &self.nodes[idx].value, &grad_out);
                debug_assert_eq!(grads.len(), inputs.len(), "{}", function.name());
                for (input, grad) in inputs.into_iter().zip(grads) {
                    let Some(grad) = grad else { continue };
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        grad.shape(),
                        self.nodes[input.0].value.shape(),
                        "gradient shape from {}",
                        function.name()
                    );
                    match &mut pending[input.0] {
                        Some(acc) => acc.add_assign(&grad),
                        slot => *slot = Some(grad),
                    }
                }
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&grad_out),
                slot => *slot = Some(grad_out),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2, 3], &[1., -2., 3., 0.5, 7., -1.]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4., 8., 12.]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones(&[2]));
        let c = g.constant(Tensor::full(&[2], 3.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
        assert!(g.grad(c).is_none());
    }
}
