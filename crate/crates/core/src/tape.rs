//! Dynamic reverse-mode tape.
//!
//! Ops are evaluated eagerly and appended in execution order, so the node
//! list is always topologically sorted. [`Tape::backward`] walks it once in
//! reverse.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: the recorded inputs, the output it produced,
/// and the incoming gradient of the output.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
}

/// Returns one optional gradient per input, in input order.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push("leaf", Vec::new(), value, requires_grad, None)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    /// Records an op computed by the caller. `backward` is dropped when no
    /// input requires a gradient.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(op, inputs.to_vec(), output, requires_grad, backward)
    }

    fn push(
        &mut self,
        op: &'static str,
        inputs: Vec<Var>,
        value: Tensor<T>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let id = self.nodes.len();
        self.values.push(value);
        self.nodes.push(Node {
            op,
            inputs,
            requires_grad,
            backward,
        });
        Var(id)
    }

    /// Gradients of `loss` (seeded with ones) with respect to every leaf that
    /// requires them. Fails on the first node whose backward rule emits a
    /// non-finite value.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.values[loss.0].shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.values[v.0]).collect(),
                output: &self.values[id],
                grad: &grad,
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient {
                        node: id,
                        op: node.op,
                    });
                }
                debug_assert_eq!(g.shape(), self.values[input.0].shape(), "op {}", node.op);
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        // Keep leaf gradients only.
        for (id, g) in grads.iter_mut().enumerate() {
            if self.nodes[id].backward.is_some() {
                *g = None;
            }
        }
        Ok(Grads { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient for `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient for `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulates_over_fanout() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let y = tape.add(x, x);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(&[3]));
        let p = tape.param(Tensor::ones(&[3]));
        let y = tape.mul(c, p);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn reports_node_with_non_finite_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        let bad = tape.record("poisoned", &[x], Tensor::ones(&[2]), |ctx| {
            vec![Some(ctx.grad.map(|_| f64::NAN))]
        });
        let s = tape.sum(bad);
        match tape.backward(s) {
            Err(Error::NonFiniteGradient { node, op }) => {
                assert_eq!(node, bad.index());
                assert_eq!(op, "poisoned");
            }
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected a non-finite gradient error"),
        }
    }
}
