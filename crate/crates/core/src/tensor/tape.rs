// Wengert-style tape: every op appends one node holding its value and the
// context its backward needs; `backward` walks the nodes in reverse creation
// order and then clears the tape.

use super::{Result, Shape, Tensor4, TensorError};
use crate::ensemble::kernels as ens;
use crate::geometry::{self, QuarterTurn};
use crate::nn::kernels as nk;

/// Handle to a value recorded on a [`Tape`]. Handles from before a
/// `backward` call are rejected afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    generation: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Rot90(Var, QuarterTurn),
    StackMax {
        inputs: Vec<Var>,
        argmax: Vec<u32>,
    },
    StackMean(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u32,
}

/// Gradients of the leaves that required them, from one `backward` pass.
#[derive(Debug)]
pub struct Gradients {
    generation: u32,
    grads: Vec<Option<Tensor4>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor4> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor4> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.generation != self.generation {
            return Err(TensorError::UnknownVar(v.id));
        }
        self.nodes.get(v.id).ok_or(TensorError::UnknownVar(v.id))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor4> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<Shape> {
        Ok(self.node(v)?.value.shape())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn push(&mut self, value: Tensor4, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id,
            generation: self.generation,
        }
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor4) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor4) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor4) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<(Shape, bool)> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        na.value.check_same_shape(&nb.value, op)?;
        Ok((na.value.shape(), na.requires_grad || nb.requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, rg) = self.binary(a, b, "add")?;
        let value = self.nodes[a.id].value.add(&self.nodes[b.id].value)?;
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "mul")?;
        let data = self.nodes[a.id]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.id].value.data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor4::from_vec(shape, data)?, Op::Mul(a, b), rg))
    }

    /// Elementwise maximum; the gradient goes to `a` on ties.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, rg) = self.binary(a, b, "max")?;
        let value = self.nodes[a.id].value.maximum(&self.nodes[b.id].value)?;
        Ok(self.push(value, Op::Max(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let n = self.node(a)?;
        let (value, rg) = (n.value.scale(factor), n.requires_grad);
        Ok(self.push(value, Op::Scale(a, factor), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        let (total, rg) = (n.value.data().iter().sum::<f64>(), n.requires_grad);
        Ok(self.push(Tensor4::scalar(total), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?;
        if n.value.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let total = n.value.data().iter().sum::<f64>() / n.value.len() as f64;
        let rg = n.requires_grad;
        Ok(self.push(Tensor4::scalar(total), Op::Mean(a), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let (value, rg) = (crate::nn::relu(&n.value), n.requires_grad);
        Ok(self.push(value, Op::Relu(x), rg))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let out_shape = nk::maxpool2_shape(n.value.shape())?;
        let (data, argmax) = nk::maxpool2_forward(n.value.data(), n.value.shape());
        let rg = n.requires_grad;
        Ok(self.push(
            Tensor4::from_vec(out_shape, data)?,
            Op::MaxPool2 { x, argmax },
            rg,
        ))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (nx, nw, nb) = (self.node(x)?, self.node(weight)?, self.node(bias)?);
        let [o, _, kh, kw] = nw.value.shape();
        if kh != kw || kh % 2 == 0 || stride == 0 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} stride {stride}"),
            });
        }
        if nb.value.shape() != [o, 1, 1, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: nb.value.shape(),
                rhs: [o, 1, 1, 1],
            });
        }
        let out_shape = nk::conv2d_shape(nx.value.shape(), nw.value.shape(), stride, padding)?;
        let data = nk::conv2d_forward(
            nx.value.data(),
            nx.value.shape(),
            nw.value.data(),
            nw.value.shape(),
            nb.value.data(),
            stride,
            padding,
            out_shape,
        );
        let rg = nx.requires_grad || nw.requires_grad || nb.requires_grad;
        let op = Op::Conv2d {
            x,
            weight,
            bias,
            stride,
            padding,
        };
        Ok(self.push(Tensor4::from_vec(out_shape, data)?, op, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?;
        let out_shape = nk::gap_shape(n.value.shape())?;
        let data = nk::gap_forward(n.value.data(), n.value.shape());
        let rg = n.requires_grad;
        Ok(self.push(
            Tensor4::from_vec(out_shape, data)?,
            Op::GlobalAvgPool(x),
            rg,
        ))
    }

    /// Fully connected layer over the flattened `c·h·w` features of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (nx, nw, nb) = (self.node(x)?, self.node(weight)?, self.node(bias)?);
        let out_shape = nk::linear_shape(nx.value.shape(), nw.value.shape())?;
        if nb.value.shape() != [out_shape[1], 1, 1, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear bias",
                lhs: nb.value.shape(),
                rhs: [out_shape[1], 1, 1, 1],
            });
        }
        let data = nk::linear_forward(
            nx.value.data(),
            nx.value.shape(),
            nw.value.data(),
            nw.value.shape(),
            nb.value.data(),
        );
        let rg = nx.requires_grad || nw.requires_grad || nb.requires_grad;
        Ok(self.push(
            Tensor4::from_vec(out_shape, data)?,
            Op::Linear { x, weight, bias },
            rg,
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let n = self.node(logits)?;
        nk::check_logits(n.value.shape(), labels)?;
        let (loss, probs) = nk::softmax_xent_forward(n.value.data(), n.value.shape(), labels);
        let rg = n.requires_grad;
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor4::scalar(loss), op, rg))
    }

    pub fn rot90(&mut self, x: Var, turn: QuarterTurn) -> Result<Var> {
        let n = self.node(x)?;
        let value = geometry::rot90(&n.value, turn)?;
        let rg = n.requires_grad;
        Ok(self.push(value, Op::Rot90(x, turn), rg))
    }

    fn stack_inputs(&self, inputs: &[Var], op: &'static str) -> Result<bool> {
        let first = inputs.first().ok_or(TensorError::InvalidShape {
            op,
            detail: "empty branch set".into(),
        })?;
        let head = &self.node(*first)?.value;
        let mut rg = false;
        for &v in inputs {
            let n = self.node(v)?;
            head.check_same_shape(&n.value, op)?;
            rg |= n.requires_grad;
        }
        Ok(rg)
    }

    /// Elementwise maximum across `inputs`; the lowest index wins ties.
    pub fn stack_max(&mut self, inputs: &[Var]) -> Result<Var> {
        let rg = self.stack_inputs(inputs, "stack_max")?;
        let shape = self.nodes[inputs[0].id].value.shape();
        let slices: Vec<&[f64]> = inputs
            .iter()
            .map(|v| self.nodes[v.id].value.data())
            .collect();
        let (data, argmax) = ens::stack_max(&slices);
        let op = Op::StackMax {
            inputs: inputs.to_vec(),
            argmax,
        };
        Ok(self.push(Tensor4::from_vec(shape, data)?, op, rg))
    }

    /// Elementwise mean across `inputs`, summed in index order.
    pub fn stack_mean(&mut self, inputs: &[Var]) -> Result<Var> {
        let rg = self.stack_inputs(inputs, "stack_mean")?;
        let shape = self.nodes[inputs[0].id].value.shape();
        let slices: Vec<&[f64]> = inputs
            .iter()
            .map(|v| self.nodes[v.id].value.data())
            .collect();
        let data = ens::stack_mean(&slices);
        Ok(self.push(
            Tensor4::from_vec(shape, data)?,
            Op::StackMean(inputs.to_vec()),
            rg,
        ))
    }

    /// Backpropagates from a `(1,1,1,1)` loss, returns the gradients of all
    /// reachable leaves that require them, and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::TapeConsumed);
        }
        let shape = self.shape(loss)?;
        if shape != [1, 1, 1, 1] {
            return Err(TensorError::NonScalarLoss(shape));
        }

        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }

        for id in (0..=loss.id).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, g, &mut grads);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let leaf_grad = match (&node.op, node.requires_grad, g) {
                (Op::Leaf, true, Some(g)) => Some(Tensor4::from_vec(node.value.shape(), g)?),
                _ => None,
            };
            out.push(leaf_grad);
        }
        let result = Gradients {
            generation: self.generation,
            grads: out,
        };
        self.nodes.clear();
        self.generation = self.generation.wrapping_add(1);
        Ok(result)
    }

    fn backprop_node(&self, id: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.id].value;
        let mut send = |v: Var, contribution: Vec<f64>| {
            if self.rg(v) {
                accumulate(&mut grads[v.id], contribution);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*b, g.clone());
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                send(*a, ga);
                send(*b, gb);
            }
            Op::Max(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if bv[i] > av[i] {
                        gb[i] = g[i];
                    } else {
                        ga[i] = g[i];
                    }
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::Scale(a, f) => send(*a, g.iter().map(|v| v * f).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                send(*x, gx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (&src, &gv) in argmax.iter().zip(&g) {
                    gx[src] += gv;
                }
                send(*x, gx);
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (xv, wv) = (val(*x), val(*weight));
                let (dx, dw, db) = nk::conv2d_backward(
                    &g,
                    xv.data(),
                    xv.shape(),
                    wv.data(),
                    wv.shape(),
                    *stride,
                    *padding,
                    node.value.shape(),
                    self.rg(*x),
                );
                send(*weight, dw);
                send(*bias, db);
                if self.rg(*x) {
                    send(*x, dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = val(*x).shape();
                let area = h * w;
                let mut gx = Vec::with_capacity(g.len() * area);
                for &gv in &g {
                    gx.extend(std::iter::repeat_n(gv / area as f64, area));
                }
                send(*x, gx);
            }
            Op::Linear { x, weight, bias } => {
                let (xv, wv) = (val(*x), val(*weight));
                let (dx, dw, db) = nk::linear_backward(
                    &g,
                    xv.data(),
                    xv.shape(),
                    wv.data(),
                    wv.shape(),
                    self.rg(*x),
                );
                send(*weight, dw);
                send(*bias, db);
                if self.rg(*x) {
                    send(*x, dx);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let classes = val(*logits).shape()[1];
                let scale = g[0] / labels.len() as f64;
                let mut gx = probs.clone();
                for (i, &label) in labels.iter().enumerate() {
                    gx[i * classes + label] -= 1.0;
                }
                for v in &mut gx {
                    *v *= scale;
                }
                send(*logits, gx);
            }
            Op::Rot90(x, turn) => {
                let back = geometry::rot90_data(&g, node.value.shape(), turn.inverse());
                send(*x, back);
            }
            Op::StackMax { inputs, argmax } => {
                for (n, &v) in inputs.iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let gn = g
                        .iter()
                        .zip(argmax)
                        .map(|(&gv, &a)| if a as usize == n { gv } else { 0.0 })
                        .collect();
                    send(v, gn);
                }
            }
            Op::StackMean(inputs) => {
                let n = inputs.len() as f64;
                for &v in inputs {
                    if self.rg(v) {
                        send(v, g.iter().map(|gv| gv / n).collect());
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor4::vector(vec![3.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_mean_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor4::vector(vec![-1.0, 2.0]));
        let r = tape.relu(w).unwrap();
        let loss = tape.mean(r).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor4::vector(vec![1.0, 2.0]));
        let r = tape.relu(w).unwrap();
        assert!(matches!(
            tape.backward(r),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn second_backward_is_state_error() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor4::vector(vec![1.0]));
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.is_empty());
        assert_eq!(tape.backward(loss).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn stale_vars_are_rejected_after_backward() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor4::vector(vec![1.0]));
        let loss = tape.sum(w).unwrap();
        tape.backward(loss).unwrap();
        let _fresh = tape.param(Tensor4::vector(vec![2.0]));
        assert!(matches!(tape.value(w), Err(TensorError::UnknownVar(_))));
    }

    #[test]
    fn max_routes_ties_to_first_operand() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor4::vector(vec![1.0, 5.0, 2.0]));
        let b = tape.param(Tensor4::vector(vec![3.0, 2.0, 2.0]));
        let m = tape.max(a, b).unwrap();
        assert_eq!(tape.value(m).unwrap().data(), &[3.0, 5.0, 2.0]);
        let loss = tape.sum(m).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_input_accumulates_once_per_use() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor4::vector(vec![2.0]));
        let s = tape.add(w, w).unwrap();
        let t = tape.add(s, w).unwrap();
        let loss = tape.sum(t).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0]);
    }

    #[test]
    fn constants_and_unreachable_params_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor4::vector(vec![1.0]));
        let w = tape.param(Tensor4::vector(vec![2.0]));
        let unused = tape.param(Tensor4::vector(vec![9.0]));
        let p = tape.mul(c, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0]);
    }

    #[test]
    fn mismatched_binary_shapes_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor4::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor4::vector(vec![1.0]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.max(a, b).is_err());
        assert!(tape.stack_mean(&[a, b]).is_err());
        assert!(tape.stack_max(&[]).is_err());
    }
}
