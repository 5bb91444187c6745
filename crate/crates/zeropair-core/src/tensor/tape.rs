//! Record/replay reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive application during the forward pass.
//! [`Tape::backward`] replays the recorded nodes in exact reverse order,
//! accumulating (never overwriting) gradients, so a parameter used in
//! several places receives the sum of all path gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Val(pub(crate) usize);

/// Gradient contributions flowing to parent nodes.
pub type GradContributions<T> = Vec<(Val, Tensor<T>)>;

type BackFn<T> = Box<dyn FnOnce(&Tensor<T>) -> GradContributions<T>>;

struct Node<T: Elem> {
    value: Tensor<T>,
    requires_grad: bool,
    back: Option<BackFn<T>>,
}

/// Ordered record of primitive applications with their backward rules.
pub struct Tape<T: Elem = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, Val>,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, back: Option<BackFn<T>>) -> Val {
        self.nodes.push(Node {
            value,
            requires_grad,
            back,
        });
        Val(self.nodes.len() - 1)
    }

    /// Tracked input: gradients will be computed for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Val {
        self.push(value, true, None)
    }

    /// Untracked input: backward never descends into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Val {
        self.push(value, false, None)
    }

    /// Registers a parameter tensor as a tracked leaf, reusing the existing
    /// node when the same storage was already registered on this tape.
    /// This is what makes weight sharing accumulate gradients.
    pub fn param(&mut self, value: &Tensor<T>) -> Val {
        self.param_with(value, true)
    }

    /// Parameter leaf that is excluded from differentiation (frozen).
    pub fn param_frozen(&mut self, value: &Tensor<T>) -> Val {
        self.param_with(value, false)
    }

    fn param_with(&mut self, value: &Tensor<T>, requires_grad: bool) -> Val {
        let key = value.storage_id();
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(value.clone(), requires_grad, None);
        self.params.insert(key, v);
        v
    }

    /// Records an op result together with its reverse rule. The closure
    /// receives the upstream gradient and returns per-parent contributions;
    /// it is dropped entirely when no parent needs gradients.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        back: impl FnOnce(&Tensor<T>) -> GradContributions<T> + 'static,
    ) -> Val {
        let back: Option<BackFn<T>> = if requires_grad {
            Some(Box::new(back))
        } else {
            None
        };
        self.push(value, requires_grad, back)
    }

    pub fn value(&self, v: Val) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Val) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Re-registers a value as an untracked constant (stop-gradient).
    pub fn detach(&mut self, v: Val) -> Val {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Runs reverse accumulation from a scalar output. Visits nodes in the
    /// exact reverse order of recording; gradients of shared parents sum.
    pub fn backward(&mut self, out: Val) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::contract(
                "Tape::backward",
                format!("output must be scalar, got shape {}", self.value(out).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[out.0] = Some(Tensor::scalar(T::ONE));
        for i in (0..=out.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            if let Some(back) = self.nodes[i].back.take() {
                let g = grads[i].as_ref().expect("gradient present");
                for (parent, contribution) in back(g) {
                    debug_assert!(parent.0 < i, "parent recorded after child");
                    if !self.nodes[parent.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        contribution.shape(),
                        self.nodes[parent.0].value.shape(),
                        "gradient shape must match value shape"
                    );
                    grads[parent.0] = Some(match grads[parent.0].take() {
                        None => contribution,
                        Some(acc) => acc.add_elem(&contribution),
                    });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of `v` after [`Tape::backward`]; `None` when no path from
    /// the output reached it.
    pub fn grad(&self, v: Val) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a registered parameter tensor, by storage identity.
    pub fn grad_of(&self, param: &Tensor<T>) -> Option<&Tensor<T>> {
        self.params
            .get(&param.storage_id())
            .and_then(|&v| self.grad(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn param_registration_is_deduplicated() {
        let mut tape: Tape<f32> = Tape::new();
        let p = Tensor::scalar(3.0);
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a, b);
        let other = Tensor::scalar(3.0);
        let c = tape.param(&other);
        assert_ne!(a, c);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut tape: Tape<f64> = Tape::new();
        let p = Tensor::scalar(2.0);
        let x = tape.param(&p);
        let d = tape.detach(x);
        assert!(!tape.requires_grad(d));
    }
}
