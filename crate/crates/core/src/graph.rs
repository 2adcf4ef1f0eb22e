//! Reverse-mode differentiation over a recorded list of tensor ops.
//!
//! A [`Graph`] is a tape: every op appends a node whose inputs are earlier
//! nodes, so the tape order is a topological order and backward is a single
//! reverse sweep. Parameters enter as leaves tied to a [`ParamId`]; after
//! [`Graph::backward`] their gradients are added into the owning
//! [`ParamStore`], which makes a parameter used by several terms receive the
//! sum of the per-term gradients.

use std::collections::HashMap;

use crate::entropy::{bits_backward, bits_forward};
use crate::error::{Error, Result};
use crate::ops::{conv2d, conv2d_backward, deconv2d, deconv2d_backward, ConvGeometry};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::slim::gdn::{gdn_backward, gdn_forward};
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    Conv { x: NodeId, kernel: NodeId, bias: NodeId, geom: ConvGeometry },
    Deconv { x: NodeId, kernel: NodeId, bias: NodeId, geom: ConvGeometry },
    SliceLeading(NodeId),
    Gdn { y: NodeId, gamma: NodeId, beta: NodeId, inverse: bool },
    Square(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleShift { x: NodeId, scale: NodeId, shift: NodeId },
    ClampMin { x: NodeId, min: f64 },
    Sum(NodeId),
    Scale { x: NodeId, factor: f64 },
    Bits { z: NodeId, logits: NodeId },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input | Op::Param => vec![],
            Op::Conv { x, kernel, bias, .. } | Op::Deconv { x, kernel, bias, .. } => vec![x, kernel, bias],
            Op::Gdn { y, gamma, beta, .. } => vec![y, gamma, beta],
            Op::ScaleShift { x, scale, shift } => vec![x, scale, shift],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Bits { z, logits } => vec![z, logits],
            Op::SliceLeading(x) | Op::Square(x) | Op::Sum(x) | Op::ClampMin { x, .. } | Op::Scale { x, .. } => vec![x],
        }
    }
}

#[inline]
pub(crate) fn square<S: Scalar>(v: S) -> S {
    v * v
}

#[inline]
pub(crate) fn scale_shift<S: Scalar>(v: S, scale: S, shift: S) -> S {
    scale * v + shift
}

#[inline]
pub(crate) fn clamp_min<S: Scalar>(v: S, min: S) -> S {
    if v < min {
        min
    } else {
        v
    }
}

struct Node<S> {
    op: Op,
    value: Tensor4<S>,
    requires_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor4<S>>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor4<S>, leaf_grad: bool) -> NodeId {
        let requires_grad = leaf_grad || op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node<S>> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::internal(format!("node {} was not recorded on this graph", id.0)))
    }

    pub fn value(&self, id: NodeId) -> &Tensor4<S> {
        &self.nodes[id.0].value
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor4<S>) -> NodeId {
        self.push(Op::Input, value, false)
    }

    /// Free leaf that receives a gradient (used for gradient checks).
    pub fn variable(&mut self, value: Tensor4<S>) -> NodeId {
        self.push(Op::Input, value, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(Op::Param, store.value(id).clone(), true);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let v = conv2d(self.value(x), self.value(kernel), Some(self.value(bias).data()), geom)?;
        Ok(self.push(Op::Conv { x, kernel, bias, geom }, v, false))
    }

    pub fn deconv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let v = deconv2d(self.value(x), self.value(kernel), Some(self.value(bias).data()), geom)?;
        Ok(self.push(Op::Deconv { x, kernel, bias, geom }, v, false))
    }

    pub fn slice_leading(&mut self, x: NodeId, shape: Shape4) -> Result<NodeId> {
        if self.value(x).shape() == shape {
            return Ok(x);
        }
        let v = self.value(x).slice_leading(shape)?;
        Ok(self.push(Op::SliceLeading(x), v, false))
    }

    pub fn gdn(&mut self, y: NodeId, gamma: NodeId, beta: NodeId, inverse: bool) -> Result<NodeId> {
        let v = gdn_forward(self.value(y), self.value(gamma), self.value(beta), inverse)?;
        Ok(self.push(Op::Gdn { y, gamma, beta, inverse }, v, false))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(square);
        self.push(Op::Square(x), v, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(Op::Add(a, b), v, false))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p - q)?;
        Ok(self.push(Op::Sub(a, b), v, false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(Op::Mul(a, b), v, false))
    }

    /// `scale · x + shift` with single-element `scale` and `shift`.
    pub fn scale_shift(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let s = self.value(scale).item()?;
        let b = self.value(shift).item()?;
        let v = self.value(x).map(|e| scale_shift(e, s, b));
        Ok(self.push(Op::ScaleShift { x, scale, shift }, v, false))
    }

    pub fn clamp_min(&mut self, x: NodeId, min: f64) -> NodeId {
        let lo = S::of(min);
        let v = self.value(x).map(|e| clamp_min(e, lo));
        self.push(Op::ClampMin { x, min }, v, false)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor4::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v, false)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let f = S::of(factor);
        let v = self.value(x).map(|e| e * f);
        self.push(Op::Scale { x, factor }, v, false)
    }

    /// Total code length in bits of `z` under per-channel factorized CDFs
    /// given by `logits` (shape `(channels, bins, 1, 1)`).
    pub fn bits(&mut self, z: NodeId, logits: NodeId) -> Result<NodeId> {
        let (total, _) = bits_forward(self.value(z), self.value(logits))?;
        Ok(self.push(Op::Bits { z, logits }, Tensor4::scalar(total), false))
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor4<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let root = self.node(loss)?;
        let lv = root.value.item()?;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite ({lv})")));
        }
        let mut grads: Vec<Option<Tensor4<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor4::scalar(S::one()));
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            for input in op.inputs() {
                if input.0 >= idx {
                    return Err(Error::internal(format!("node {idx} depends on later node {}", input.0)));
                }
            }
            self.backprop_node(&op, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, op: &Op, up: &Tensor4<S>, grads: &mut [Option<Tensor4<S>>]) -> Result<()> {
        let needs = |n: NodeId| self.nodes[n.0].requires_grad;
        match *op {
            Op::Input | Op::Param => {}
            Op::Conv { x, kernel, bias, geom } => {
                let g = conv2d_backward(self.value(x), self.value(kernel), up, geom, needs(x))?;
                if let Some(gx) = g.input {
                    accumulate(grads, x, gx)?;
                }
                accumulate(grads, kernel, g.kernel)?;
                let bshape = self.value(bias).shape();
                accumulate(grads, bias, Tensor4::from_vec(bshape, g.bias)?)?;
            }
            Op::Deconv { x, kernel, bias, geom } => {
                let g = deconv2d_backward(self.value(x), self.value(kernel), up, geom, needs(x))?;
                if let Some(gx) = g.input {
                    accumulate(grads, x, gx)?;
                }
                accumulate(grads, kernel, g.kernel)?;
                let bshape = self.value(bias).shape();
                accumulate(grads, bias, Tensor4::from_vec(bshape, g.bias)?)?;
            }
            Op::SliceLeading(x) => {
                let g = up.embed_leading(self.value(x).shape())?;
                accumulate(grads, x, g)?;
            }
            Op::Gdn { y, gamma, beta, inverse } => {
                let g = gdn_backward(self.value(y), self.value(gamma), self.value(beta), inverse, up)?;
                accumulate(grads, y, g.input)?;
                accumulate(grads, gamma, g.gamma)?;
                accumulate(grads, beta, g.beta)?;
            }
            Op::Square(x) => {
                let two = S::of(2.0);
                let g = self.value(x).zip_map(up, |v, u| two * v * u)?;
                accumulate(grads, x, g)?;
            }
            Op::Add(a, b) => {
                accumulate(grads, a, up.clone())?;
                accumulate(grads, b, up.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, a, up.clone())?;
                accumulate(grads, b, up.map(|u| -u))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, a, up.zip_map(self.value(b), |u, v| u * v)?)?;
                accumulate(grads, b, up.zip_map(self.value(a), |u, v| u * v)?)?;
            }
            Op::ScaleShift { x, scale, shift } => {
                let s = self.value(scale).item()?;
                accumulate(grads, x, up.map(|u| u * s))?;
                let ds = self.value(x).dot(up)?;
                accumulate(grads, scale, Tensor4::scalar(ds))?;
                accumulate(grads, shift, Tensor4::scalar(up.sum()))?;
            }
            Op::ClampMin { x, min } => {
                let lo = S::of(min);
                let g = self.value(x).zip_map(up, |v, u| if v < lo { S::zero() } else { u })?;
                accumulate(grads, x, g)?;
            }
            Op::Sum(x) => {
                let u = up.item()?;
                accumulate(grads, x, Tensor4::full(self.value(x).shape(), u))?;
            }
            Op::Scale { x, factor } => {
                let f = S::of(factor);
                accumulate(grads, x, up.map(|u| u * f))?;
            }
            Op::Bits { z, logits } => {
                let (gz, gl) = bits_backward(self.value(z), self.value(logits), up.item()?)?;
                accumulate(grads, z, gz)?;
                accumulate(grads, logits, gl)?;
            }
        }
        Ok(())
    }

    /// Adds the gradient of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<S>) -> Result<()> {
        for (&pid, &node) in &self.param_nodes {
            if let Some(g) = self.grad(node) {
                store.accumulate_grad(pid, g)?;
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor4<S>>], id: NodeId, g: Tensor4<S>) -> Result<()> {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor4::from_fn([2, 3, 2, 2], |[n, c, h, w]| (n + c + h + w) as f64));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shared_parameter_gradients_add_up() {
        let mut store = ParamStore::<f64>::new();
        let p = store
            .insert("p", Tensor4::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();

        let grad_of = |build: &dyn Fn(&mut Graph<f64>, NodeId) -> NodeId| {
            let mut store = store.clone();
            let mut g = Graph::new();
            let pn = g.param(&store, p);
            let loss = build(&mut g, pn);
            g.backward(loss).unwrap();
            g.accumulate_param_grads(&mut store).unwrap();
            store.grad(p).clone()
        };
        let l1 = |g: &mut Graph<f64>, pn: NodeId| {
            let s = g.square(pn);
            g.sum(s)
        };
        let l2 = |g: &mut Graph<f64>, pn: NodeId| {
            let s = g.scale(pn, 3.0);
            g.sum(s)
        };
        let both = |g: &mut Graph<f64>, pn: NodeId| {
            let a = l1(g, pn);
            let b = l2(g, pn);
            g.add(a, b).unwrap()
        };
        let g1 = grad_of(&l1);
        let g2 = grad_of(&l2);
        let g12 = grad_of(&both);
        assert_eq!(g12, g1.zip_map(&g2, |a, b| a + b).unwrap());
    }

    #[test]
    fn non_scalar_or_foreign_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor4::zeros([1, 1, 2, 2]));
        assert!(g.backward(x).is_err());
        assert!(matches!(g.backward(NodeId(99)), Err(Error::Internal(_))));
    }
}
