//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends a node whose inputs were appended earlier, so the node
//! order is already topological and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGrads, ConvSpec};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, spec: ConvSpec },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var },
    Concat { a: Var, b: Var },
    SliceChannels { input: Var, start: usize },
    Relu { input: Var },
    Sigmoid { input: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Shift { input: Var },
    Sum { input: Var },
    BinaryCrossEntropy { prob: Var, truth: Vec<f64>, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient accumulated into a leaf by `backward`; zeros when nothing
    /// reached it (detached tensors included).
    pub fn grad(&self, var: Var) -> Tensor {
        let node = &self.nodes[var.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), self.value(bias), &spec)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(out, rg, Op::Conv2d { input, kernel, bias, spec }))
    }

    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2d_forward(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::MaxPool { input, argmax }))
    }

    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = kernels::upsample_bilinear_forward(self.value(input), out_h, out_w)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::Upsample { input }))
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        for (dimension, x, y) in [
            ("batch", sa.batch, sb.batch),
            ("height", sa.height, sb.height),
            ("width", sa.width, sb.width),
        ] {
            if x != y {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    dimension,
                    expected: x,
                    actual: y,
                });
            }
        }
        let plane = sa.plane();
        let shape = Shape::new(sa.batch, sa.channels + sb.channels, sa.height, sa.width);
        let mut data = Vec::with_capacity(shape.numel());
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for n in 0..sa.batch {
            data.extend_from_slice(&da[n * sa.channels * plane..(n + 1) * sa.channels * plane]);
            data.extend_from_slice(&db[n * sb.channels * plane..(n + 1) * sb.channels * plane]);
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Concat { a, b }))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, count: usize) -> Result<Var> {
        let out = self.value(input).slice_channels(start, count)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::SliceChannels { input, start }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.any_grad(&[input]);
        self.push(out, rg, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(kernels::sigmoid);
        let rg = self.any_grad(&[input]);
        self.push(out, rg, Op::Sigmoid { input })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::invalid(format!("{op}: shapes {sa} and {sb} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.any_grad(&[input]);
        self.push(out, rg, Op::Scale { input, factor })
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, input: Var, offset: f64) -> Var {
        let out = self.value(input).map(|v| v + offset);
        let rg = self.any_grad(&[input]);
        self.push(out, rg, Op::Shift { input })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(out, rg, Op::Sum { input })
    }

    /// Summed binary cross-entropy between probabilities and targets in [0, 1].
    /// Probabilities are clamped to `[eps, 1 - eps]` before the logs; the
    /// gradient uses the clamped value so it stays finite.
    pub fn binary_cross_entropy(&mut self, prob: Var, truth: &[f64], eps: f64) -> Result<Var> {
        let p = self.value(prob);
        if p.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                op: "binary_cross_entropy",
                dimension: "pixel count",
                expected: p.len(),
                actual: truth.len(),
            });
        }
        let loss: f64 = p
            .data()
            .iter()
            .zip(truth)
            .map(|(&p, &y)| {
                let pc = p.clamp(eps, 1.0 - eps);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum();
        let rg = self.any_grad(&[prob]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::BinaryCrossEntropy {
                prob,
                truth: truth.to_vec(),
                eps,
            },
        ))
    }

    /// Accumulates d`loss`/d`leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = self.shape(loss).numel();
        if n != 1 {
            return Err(Error::NonScalarLoss(n));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let slot = self.nodes[idx].grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (s, v) in slot.iter_mut().zip(&g) {
                    *s += v;
                }
            } else {
                self.propagate(idx, g, &mut grads);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let take = |grads: &mut [Option<Vec<f64>>], v: Var| -> Vec<f64> {
            grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()])
        };
        // Applies `f` to the gradient buffer of `v`, creating it on first use.
        let with = |grads: &mut [Option<Vec<f64>>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if wants(v) {
                let mut buf = take(grads, v);
                f(&mut buf);
                grads[v.0] = Some(buf);
            }
        };
        match &nodes[idx].op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            } => {
                let g_out = Tensor::new(out.shape(), g).expect("grad shape");
                let mut gi = wants(*input).then(|| take(grads, *input));
                let mut gk = wants(*kernel).then(|| take(grads, *kernel));
                let mut gb = wants(*bias).then(|| take(grads, *bias));
                kernels::conv2d_backward(
                    &nodes[input.0].value,
                    &nodes[kernel.0].value,
                    &g_out,
                    spec,
                    ConvGrads {
                        input: gi.as_deref_mut(),
                        kernel: gk.as_deref_mut(),
                        bias: gb.as_deref_mut(),
                    },
                );
                for (v, buf) in [(*input, gi), (*kernel, gk), (*bias, gb)] {
                    if buf.is_some() {
                        grads[v.0] = buf;
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                with(grads, *input, &mut |dst| {
                    for (&src, gv) in argmax.iter().zip(&g) {
                        dst[src] += gv;
                    }
                });
            }
            Op::Upsample { input } => {
                let g_out = Tensor::new(out.shape(), g).expect("grad shape");
                with(grads, *input, &mut |dst| {
                    kernels::upsample_bilinear_backward(nodes[input.0].value.shape(), &g_out, dst)
                });
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let plane = sa.plane();
                let (ca, cb) = (sa.channels * plane, sb.channels * plane);
                for n in 0..sa.batch {
                    let base = n * (ca + cb);
                    with(grads, *a, &mut |dst| {
                        for (d, v) in dst[n * ca..(n + 1) * ca].iter_mut().zip(&g[base..base + ca]) {
                            *d += v;
                        }
                    });
                    with(grads, *b, &mut |dst| {
                        for (d, v) in dst[n * cb..(n + 1) * cb].iter_mut().zip(&g[base + ca..base + ca + cb]) {
                            *d += v;
                        }
                    });
                }
            }
            Op::SliceChannels { input, start } => {
                let si = nodes[input.0].value.shape();
                let so = out.shape();
                let plane = si.plane();
                with(grads, *input, &mut |dst| {
                    for n in 0..si.batch {
                        let from = n * so.channels * plane;
                        let to = (n * si.channels + start) * plane;
                        for (d, v) in dst[to..to + so.channels * plane]
                            .iter_mut()
                            .zip(&g[from..from + so.channels * plane])
                        {
                            *d += v;
                        }
                    }
                });
            }
            Op::Relu { input } => {
                let x = nodes[input.0].value.data();
                with(grads, *input, &mut |dst| {
                    for ((d, &xv), gv) in dst.iter_mut().zip(x).zip(&g) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid { input } => {
                with(grads, *input, &mut |dst| {
                    for ((d, &s), gv) in dst.iter_mut().zip(out.data()).zip(&g) {
                        *d += gv * s * (1.0 - s);
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    with(grads, v, &mut |dst| {
                        for (d, gv) in dst.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let o = nodes[other.0].value.data();
                    with(grads, v, &mut |dst| {
                        for ((d, gv), ov) in dst.iter_mut().zip(&g).zip(o) {
                            *d += gv * ov;
                        }
                    });
                }
            }
            Op::Scale { input, factor } => {
                with(grads, *input, &mut |dst| {
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d += gv * factor;
                    }
                });
            }
            Op::Shift { input } => {
                with(grads, *input, &mut |dst| {
                    for (d, gv) in dst.iter_mut().zip(&g) {
                        *d += gv;
                    }
                });
            }
            Op::Sum { input } => {
                with(grads, *input, &mut |dst| {
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::BinaryCrossEntropy { prob, truth, eps } => {
                let p = nodes[prob.0].value.data();
                with(grads, *prob, &mut |dst| {
                    for ((d, &pv), &y) in dst.iter_mut().zip(p).zip(truth) {
                        let pc = pv.clamp(*eps, 1.0 - eps);
                        *d += g[0] * (-y / pc + (1.0 - y) / (1.0 - pc));
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: usize, w: usize, data: &[f64]) -> Tensor {
        Tensor::new(Shape::new(1, 1, h, w), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 2, &[1.0, -2.0, 3.0, 0.5]), true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]), true);
        let y = tape.scale(x, 3.0);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[6.0, 6.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(2))));
    }

    #[test]
    fn detached_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]), true);
        let c = tape.leaf(t(1, 2, &[5.0, 5.0]), false);
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(c).data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(x).data(), &[5.0, 5.0]);
    }

    #[test]
    fn relu_has_zero_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, &[-1.0, 0.0, 2.0]), true);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]), true);
        let b = tape.leaf(t(2, 2, &[5.0, 6.0, 7.0, 8.0]), true);
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), Shape::new(1, 2, 2, 2));
        let a2 = tape.slice_channels(c, 0, 1).unwrap();
        let b2 = tape.slice_channels(c, 1, 1).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).data(), &[1.0; 4]);
        assert_eq!(tape.grad(b).data(), &[1.0; 4]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), false);
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 3)), false);
        let e = tape.concat_channels(a, b).unwrap_err();
        assert!(matches!(e, Error::ShapeMismatch { dimension: "width", .. }), "{e}");
    }

    #[test]
    fn sigmoid_then_cross_entropy_gradient_is_p_minus_y() {
        let z = [-3.0, -0.5, 0.0, 0.7, 4.0];
        let y = [0.0, 1.0, 1.0, 0.0, 0.3];
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 5, &z), true);
        let p = tape.sigmoid(x);
        let loss = tape.binary_cross_entropy(p, &y, 1e-12).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x);
        for i in 0..5 {
            let p = 1.0 / (1.0 + (-z[i]).exp());
            assert!((g.data()[i] - (p - y[i])).abs() < 1e-8, "{i}");
        }
    }

    #[test]
    fn shift_adds_constant_and_passes_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, 2.0]), true);
        let y = tape.shift(x, -0.5);
        assert_eq!(tape.value(y).data(), &[0.5, 1.5]);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).data(), &[1.0, 1.0]);
    }
}
