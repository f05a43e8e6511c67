//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends a node holding its output value and a boxed
//! [`Backward`] rule. Nodes only reference earlier nodes, so the arena order
//! is already a topological order and `backward` is a single reverse sweep.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values available to a backward rule.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Which inputs need a gradient. Rules may skip work for `false` entries.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// Returns one entry per input; `None` where `ctx.needs[i]` is false.
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad_out: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, inputs: Vec::new(), op: None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Copy of `v`'s value as a new constant leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Append the result of an operation. The output requires a gradient when
    /// any input does; otherwise no backward rule is kept.
    pub fn record(&mut self, output: Tensor<T>, inputs: &[Var], op: Box<dyn Backward<T>>) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: output,
            grad: None,
            requires_grad,
            inputs: inputs.to_vec(),
            op: if requires_grad { Some(op) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Accumulate `d loss / d v` into every reachable node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::shape(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let ctx = BackwardCtx {
                    inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                    output: &node.value,
                    needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
                };
                let input_grads = op.backward(&ctx, &g);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
                for (inp, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !self.nodes[inp.0].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(ig.shape(), self.nodes[inp.0].value.shape(), "{}", op.name());
                    match &mut grads[inp.0] {
                        Some(acc) => acc.add_assign(&ig),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.record(out, &[a, b], Box::new(AddOp)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, &[a, b], Box::new(MulOp)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        self.record(out, &[a], Box::new(ScaleOp(factor)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = super::tensor::sum(self.value(a).data());
        self.record(Tensor::scalar(total), &[a], Box::new(SumOp))
    }
}

struct AddOp;

impl<T: Real> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        ctx.needs.iter().map(|&n| n.then(|| g.clone())).collect()
    }
}

struct MulOp;

impl<T: Real> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let times = |other: &Tensor<T>| {
            let data = g.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
            Tensor::new(g.shape().to_vec(), data).expect("shape preserved")
        };
        vec![ctx.needs[0].then(|| times(ctx.inputs[1])), ctx.needs[1].then(|| times(ctx.inputs[0]))]
    }
}

struct ScaleOp<T>(T);

impl<T: Real> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let data = g.data().iter().map(|&x| x * self.0).collect();
        vec![Some(Tensor::new(g.shape().to_vec(), data).expect("shape preserved"))]
    }
}

struct SumOp;

impl<T: Real> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(ctx.inputs[0].shape(), g.item()))]
    }
}
