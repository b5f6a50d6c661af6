use super::{Real, Tensor};
use crate::error::{shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// What a backward closure sees: the parent values, the node's own output,
/// the incoming gradient, and which parents actually need a gradient.
pub struct BackCtx<'a, T> {
    pub parents: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub wants: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>> + Send + Sync>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so the node order is already a
/// topological order and backward is a single reverse sweep.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation. The closure is dropped immediately when no
    /// parent participates in differentiation.
    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>> + Send + Sync + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Every node is visited at most once.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(shape_err!(
                "backward root must be a scalar, got shape {:?}",
                root_value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));
        let mut visited = 0usize;
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            let ctx = BackCtx {
                parents: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                grad: &grad,
                wants: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient; interior nodes have been consumed.
            grads[idx] = None;
        }
        // Only leaf gradients survive: interior slots were taken above.
        Ok(Gradients { grads, visited })
    }
}

/// Gradients of leaves after a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of interior operations whose backward ran.
    pub fn ops_visited(&self) -> usize {
        self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn each_op_runs_backward_once() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64), true);
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.ops_visited(), 3);
        // d/dx (x² + x) = 2x + 1
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 1, 2], 2.0), true);
        let c = tape.constant(Tensor::full(&[1, 1, 1, 2], 3.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }
}
