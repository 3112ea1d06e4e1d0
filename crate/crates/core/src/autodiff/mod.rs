//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. Each recorded op
//! carries a backward rule that maps the output gradient to gradients of its
//! inputs; [`Graph::backward`] walks the tape in reverse, so gradient
//! accumulation follows recording order and is fully deterministic.

mod ops;
mod params;

pub use ops::{attention_score_count, reset_attention_score_count, PadFill, RopeTable, SeqLayout};
pub use params::{fd_check, Bound, FdOptions, FdReport, Gradients, ParameterSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// What a backward rule gets to see.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Result<Vec<Tensor>> + Send>;

enum Rule {
    Input,
    Param(String),
    Op {
        name: &'static str,
        backward: BackwardFn,
    },
    Opaque(String),
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    rule: Rule,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-trainable leaf (data, targets, constants).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], Rule::Input, false)
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(value, vec![], Rule::Param(name.into()), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a value produced outside the tape with no backward rule.
    /// Backpropagating a gradient into it fails with the given op name.
    pub fn opaque(&mut self, name: impl Into<String>, inputs: &[Var], value: Tensor) -> Var {
        let parents: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push(value, parents, Rule::Opaque(name.into()), rg)
    }

    pub(crate) fn record(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var {
        let parents: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push(value, parents, Rule::Op { name, backward }, rg)
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, rule: Rule, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            rule,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of a scalar `loss` with respect to every parameter leaf that
    /// influences it. Parameters the loss does not depend on are omitted.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.rule {
                Rule::Input => {}
                Rule::Param(name) => out.accumulate(name, g)?,
                Rule::Opaque(name) => {
                    return Err(Error::NotDifferentiable { op: name.clone() });
                }
                Rule::Op { name, backward } => {
                    let ctx = BackwardCtx {
                        inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                        output: &node.value,
                        grad: &g,
                    };
                    let parent_grads = backward(&ctx)?;
                    if parent_grads.len() != node.parents.len() {
                        return Err(Error::invalid(format!(
                            "backward rule of `{}` returned {} gradients for {} inputs",
                            name,
                            parent_grads.len(),
                            node.parents.len()
                        )));
                    }
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        if !self.nodes[p].requires_grad {
                            continue;
                        }
                        if pg.shape() != self.nodes[p].value.shape() {
                            return Err(Error::shape(name, pg.shape(), self.nodes[p].value.shape()));
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.axpy(1.0, &pg)?,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("w").unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::full(&[3], 2.0));
        let a = g.add(w, w).unwrap();
        let b = g.mul(a, w).unwrap();
        let s = g.sum(b);
        // s = 2 w², ds/dw = 4 w
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn inputs_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[2]));
        let w = g.param("w", Tensor::ones(&[2]));
        let y = g.mul(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn opaque_op_rejected_with_name() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::ones(&[2]));
        let v = g.value(w).map(f64::floor);
        let f = g.opaque("floor", &[w], v);
        let s = g.sum(f);
        match g.backward(s) {
            Err(Error::NotDifferentiable { op }) => assert_eq!(op, "floor"),
            other => panic!("expected NotDifferentiable, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn opaque_on_constants_is_fine() {
        let mut g = Graph::new();
        let x = g.input(Tensor::ones(&[2]));
        let f = g.opaque("floor", &[x], Tensor::ones(&[2]));
        let w = g.param("w", Tensor::ones(&[2]));
        let y = g.mul(f, w).unwrap();
        let s = g.sum(y);
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::ones(&[2]));
        assert!(g.backward(w).is_err());
    }
}
