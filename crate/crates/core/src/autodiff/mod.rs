//! Tape-based reverse-mode differentiation over [`DenseTensor`] values.
//!
//! A [`Graph`] is built for one forward pass, differentiated once with
//! [`Graph::backward`], and dropped. Leaves are either constants or named
//! parameters; only trainable parameters receive gradients.

mod gradcheck;
mod ops;
mod optim;
mod param;

pub use gradcheck::finite_diff_check;
pub use optim::{Adam, AdamSlot, Optimizer, Sgd};
pub use param::{ParamStore, Parameter, Parameterized};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ContractionPlan, DenseTensor};
use ops::Op;

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, DenseTensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: DenseTensor,
    requires_grad: bool,
    param: Option<String>,
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

    pub fn value(&self, id: NodeId) -> &DenseTensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Operation tag of a node, for inspection.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: DenseTensor) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseTensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad: false,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Named leaf; it receives a gradient only when `trainable`.
    pub fn leaf(&mut self, name: &str, value: DenseTensor, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad: trainable,
            param: Some(name.to_string()),
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, p: &Parameter) -> NodeId {
        self.leaf(&p.name, p.tensor.clone(), p.trainable)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub, vec![a, b], v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul, vec![a, b], v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(c), vec![a], v)
    }

    /// `x + v` with `v` broadcast along every axis of `x` outside `axes`.
    ///
    /// `v.shape()` must equal `x.shape()[axes]`.
    pub fn add_broadcast(
        &mut self,
        x: NodeId,
        v: NodeId,
        axes: std::ops::Range<usize>,
    ) -> Result<NodeId> {
        let out = ops::broadcast_apply(self.value(x), self.value(v), &axes, |a, b| a + b)?;
        Ok(self.push(Op::AddBroadcast(axes), vec![x, v], out))
    }

    pub fn mul_broadcast(
        &mut self,
        x: NodeId,
        v: NodeId,
        axes: std::ops::Range<usize>,
    ) -> Result<NodeId> {
        let out = ops::broadcast_apply(self.value(x), self.value(v), &axes, |a, b| a * b)?;
        Ok(self.push(Op::MulBroadcast(axes), vec![x, v], out))
    }

    pub fn contract(&mut self, a: NodeId, b: NodeId, pairs: &[(usize, usize)]) -> Result<NodeId> {
        let v = crate::tensor::contract_pair(self.value(a), self.value(b), pairs)?;
        Ok(self.push(Op::Contract(pairs.to_vec()), vec![a, b], v))
    }

    /// Contracts a set of nodes following `plan`; `inputs` follow `plan.core_order`.
    pub fn contract_plan(&mut self, plan: &ContractionPlan, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != plan.core_order.len() {
            return Err(Error::InvalidNetwork(format!(
                "plan expects {} cores, got {}",
                plan.core_order.len(),
                inputs.len()
            )));
        }
        let refs: Vec<&NodeId> = inputs.iter().collect();
        // the plan drives contraction through graph nodes
        let graph = std::cell::RefCell::new(self);
        plan.execute(
            refs,
            |a, b, pairs| graph.borrow_mut().contract(*a, *b, pairs),
            |t, order| graph.borrow_mut().permute(*t, order),
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![a], v))
    }

    pub fn permute(&mut self, a: NodeId, order: &[usize]) -> Result<NodeId> {
        let v = self.value(a).permute(order)?;
        Ok(self.push(Op::Permute(order.to_vec()), vec![a], v))
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        geom: crate::nn::ConvGeometry,
    ) -> Result<NodeId> {
        let v = crate::nn::conv3d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            &geom,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(Op::Conv3d(geom), inputs, v))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(ops::silu);
        self.push(Op::Silu, vec![a], v)
    }

    /// Group normalization over `[n, c, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let (v, stats) = ops::group_norm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            groups,
            eps,
        )?;
        Ok(self.push(Op::GroupNorm { groups, stats }, vec![x, gamma, beta], v))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::softmax_forward(self.value(a))?;
        Ok(self.push(Op::Softmax, vec![a], v))
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&DenseTensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ops::concat_forward(&vals)?;
        Ok(self.push(Op::Concat, parts.to_vec(), v))
    }

    /// Nearest-neighbour 2× upsampling of `[n, c, D, H, W]`.
    pub fn upsample2x(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::upsample_forward(self.value(a))?;
        Ok(self.push(Op::Upsample2x, vec![a], v))
    }

    /// Batched matrix product `[b, m, k] x [b, k, n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::bmm_forward(self.value(a), self.value(b), false, false)?;
        Ok(self.push(Op::Bmm, vec![a, b], v))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = DenseTensor::scalar(self.value(a).sum());
        self.push(Op::Sum, vec![a], v)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = DenseTensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean, vec![a], v)
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!(
                "mse between {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let s: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let v = DenseTensor::scalar(s / x.len() as f64);
        Ok(self.push(Op::Mse, vec![a, b], v))
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Gradient(format!("unknown node {}", loss.0)));
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Gradient(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseTensor::full(root.value.shape(), 1.0));
        let mut out = Gradients::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(name) = &node.param {
                    match out.get_mut(name) {
                        Some(acc) => acc.add_assign(&g)?,
                        None => {
                            out.insert(name.clone(), g);
                        }
                    }
                }
                continue;
            }
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|i| {
                    if i.0 >= id {
                        return false;
                    }
                    self.nodes[i.0].requires_grad
                })
                .collect();
            if node.inputs.iter().any(|i| i.0 >= id) {
                return Err(Error::Gradient(format!("cycle detected at node {id}")));
            }
            let inputs: Vec<&DenseTensor> =
                node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let input_grads = node.op.backward(&inputs, &node.value, &g, &need)?;
            for ((input, ig), needed) in node.inputs.iter().zip(input_grads).zip(&need) {
                if !needed {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match grads[input.0].as_mut() {
                    Some(acc) => acc.add_assign(&ig)?,
                    None => grads[input.0] = Some(ig),
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
