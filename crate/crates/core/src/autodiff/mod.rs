//! Tape-based reverse-mode automatic differentiation over a small,
//! fixed set of tensor primitives.
//!
//! A [`Graph`] records every primitive application in an append-only
//! node list, so node ids are already a topological order. Calling
//! [`Graph::backward`] walks that list once in reverse.
//!
//! ```
//! use voldiff::autodiff::{Graph, Op};
//! use voldiff::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(vec![1], vec![0.5]).unwrap());
//! let sq = g.square(x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[1.0]);
//! ```

mod conv;
pub mod gradcheck;
mod ops;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations and their attributes.
///
/// Layout conventions: volumes are `[N, C, D, H, W]`; convolution weights
/// are `[C_out, C_in, k, k, k]` and transposed-convolution weights are
/// `[C_in, C_out, k, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// inputs: x, weight, optional bias `[C_out]`
    Conv3d {
        stride: usize,
        padding: usize,
    },
    /// inputs: x, weight, optional bias `[C_out]`
    ConvTranspose3d {
        stride: usize,
        padding: usize,
    },
    /// inputs: x `[.., in]`, weight `[out, in]`, optional bias `[out]`
    Linear,
    /// inputs: x `[N, C, ..]`, gamma `[C]`, beta `[C]`
    GroupNorm {
        groups: usize,
        eps: f64,
    },
    Silu,
    Add,
    Sub,
    Mul,
    /// inputs: x `[N, C, ..]`, per-(sample, channel) shift `[N, C]`
    AddChannel,
    /// `scale * x + shift`
    Affine {
        scale: f64,
        shift: f64,
    },
    /// concatenation along axis 1
    Concat,
    /// softmax over the last axis
    Softmax,
    /// `[B, M, K] x [B, K, N] -> [B, M, N]`
    BatchMatmul,
    /// swap of the last two axes
    Transpose,
    Reshape {
        shape: Vec<usize>,
    },
    Sum,
    Mean,
    Abs,
    Square,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv3d { .. } => "conv3d",
            Op::ConvTranspose3d { .. } => "conv_transpose3d",
            Op::Linear => "linear",
            Op::GroupNorm { .. } => "group_norm",
            Op::Silu => "silu",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddChannel => "add_channel",
            Op::Affine { .. } => "affine",
            Op::Concat => "concat",
            Op::Softmax => "softmax",
            Op::BatchMatmul => "batch_matmul",
            Op::Transpose => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Abs => "abs",
            Op::Square => "square",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
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

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, Vec::new(), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies `op` to `inputs`, records the node and returns its handle.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if matches!(op, Op::Leaf) {
            return Err(invalid("leaves are created with param() or constant()"));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(invalid(format!(
                "{}: unknown input node {}",
                op.name(),
                bad.0
            )));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = ops::forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(out, op, inputs.to_vec(), requires_grad))
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.apply(Op::Conv3d { stride, padding }, &inputs)
    }

    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.apply(Op::ConvTranspose3d { stride, padding }, &inputs)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.apply(Op::Linear, &inputs)
    }

    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        self.apply(Op::GroupNorm { groups, eps }, &[x, gamma, beta])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Silu, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn add_channel(&mut self, x: Var, shift: Var) -> Result<Var> {
        self.apply(Op::AddChannel, &[x, shift])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Op::Affine { scale, shift }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::Concat, parts)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::BatchMatmul, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Abs, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Square, &[x])
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = self
            .nodes
            .get(output.0)
            .ok_or_else(|| invalid(format!("backward: unknown node {}", output.0)))?;
        if out_node.value.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: out_node.value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out_node.value.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (earlier, rest) = grads.split_at_mut(idx);
            let Some(gout) = rest[0].as_ref() else {
                continue;
            };
            let values: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = ops::backward(&node.op, &values, &node.value, gout, &needs)?;
            for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                match &mut earlier[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let shapes = self.nodes[..=output.0]
            .iter()
            .map(|n| (n.requires_grad, n.value.shape().to_vec()))
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(bool, Vec<usize>)>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`. Nodes that do not reach
    /// the output get zeros.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => match self.shapes.get(v.0) {
                Some((_, shape)) => Tensor::zeros(shape),
                None => Tensor::zeros(&[1]),
            },
        }
    }

    /// Like [`get`](Self::get) but `None` when no gradient flowed into `v`.
    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Moves the gradient out, leaving zeros semantics behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => g,
            None => Tensor::zeros(self.shapes.get(v.0).map_or(&[1][..], |s| &s.1)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[0.5]));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[1.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let z = g.constant(Tensor::zeros(&[3]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
        let y = g.conv3d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.square(x).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(Error::Shape { op: "backward", .. })
        ));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let other = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(other).data(), &[0.0; 3]);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx sum(x*x + x) = 2x + 1
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.5, -0.25]));
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[4.0, 0.5]);
    }
}
