//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and the ids of its inputs, so inputs always precede their consumers.
//! [`Graph::backward`] walks the tape once in reverse. A tape can be
//! differentiated only once; the next forward pass builds a new graph.
//!
//! Image-like values use the `[batch, channels, height, width]` layout.

mod conv;

use std::sync::Arc;

use thiserror::Error;

use crate::operator::{grid_len, ForwardOperator, LinearOperator};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward already ran on this graph; rebuild it with a new forward pass")]
    BackwardAlreadyRun,
    #[error("loss must hold a single element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Prelu {
        input: Var,
        coef: Var,
    },
    Concat(Vec<Var>),
    SelectChannels {
        input: Var,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    MulScalar {
        scalar: Var,
        input: Var,
    },
    Sum(Var),
    SumSquares(Var),
    Linear {
        op: Arc<dyn LinearOperator<T>>,
        input: Var,
    },
    Operator {
        op: Arc<dyn ForwardOperator<T>>,
        input: Var,
    },
    AdjointDerivative {
        op: Arc<dyn ForwardOperator<T>>,
        point: Var,
        cotangent: Var,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of a scalar loss, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `var` does not influence the loss or does not require grad.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<[usize; 4], AutodiffError> {
        self.value(v)
            .dims4()
            .map_err(|e| shape_err(op, e.to_string()))
    }

    /// 3×3 zero-padded cross-correlation plus per-channel bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, AutodiffError> {
        let dims = self.dims4("conv2d", input)?;
        let ws = self.value(weight).shape().to_vec();
        let [_, cin, h, w] = dims;
        if ws.len() != 4 || ws[2] != conv::K || ws[3] != conv::K {
            return Err(shape_err("conv2d", format!("weights must be [out, in, 3, 3], got {ws:?}")));
        }
        if ws[1] != cin {
            return Err(shape_err(
                "conv2d",
                format!("weights expect {} input channels, input has {cin}", ws[1]),
            ));
        }
        let cout = ws[0];
        if self.value(bias).shape() != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("bias must be [{cout}], got {:?}", self.value(bias).shape()),
            ));
        }
        let out = conv::conv2d_forward(
            self.value(input).data(),
            dims,
            self.value(weight).data(),
            self.value(bias).data(),
            cout,
        );
        let value = Tensor::new(vec![dims[0], cout, h, w], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, Op::Conv2d { input, weight, bias }, rg))
    }

    /// `x` for `x ≥ 0`, `−c·x` otherwise, with one coefficient per channel.
    pub fn prelu(&mut self, input: Var, coef: Var) -> Result<Var, AutodiffError> {
        let [b, c, h, w] = self.dims4("prelu", input)?;
        if self.value(coef).shape() != [c] {
            return Err(shape_err(
                "prelu",
                format!("expected {c} coefficients, got shape {:?}", self.value(coef).shape()),
            ));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let cs = self.value(coef).data();
        let mut out = Vec::with_capacity(x.len());
        for n in 0..b {
            for ch in 0..c {
                let neg = -cs[ch];
                out.extend(
                    x[(n * c + ch) * hw..(n * c + ch + 1) * hw]
                        .iter()
                        .map(|&v| if v >= T::zero() { v } else { neg * v }),
                );
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let rg = self.rg(&[input, coef]);
        Ok(self.push(value, Op::Prelu { input, coef }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_channels", "no parts".into()))?;
        let [b, _, h, w] = self.dims4("concat_channels", first)?;
        let mut channels = 0;
        for &p in parts {
            let [pb, pc, ph, pw] = self.dims4("concat_channels", p)?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("part [{pb}, {pc}, {ph}, {pw}] does not match batch/spatial [{b}, ·, {h}, {w}]"),
                ));
            }
            channels += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(b * channels * hw);
        for n in 0..b {
            for &p in parts {
                let pc = self.value(p).shape()[1];
                out.extend_from_slice(&self.value(p).data()[n * pc * hw..(n + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(vec![b, channels, h, w], out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Channels `start..start + count`.
    pub fn select_channels(&mut self, input: Var, start: usize, count: usize) -> Result<Var, AutodiffError> {
        let [b, c, h, w] = self.dims4("select_channels", input)?;
        if count == 0 || start + count > c {
            return Err(shape_err(
                "select_channels",
                format!("range {start}..{} outside {c} channels", start + count),
            ));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * count * hw);
        for n in 0..b {
            out.extend_from_slice(&x[(n * c + start) * hw..(n * c + start + count) * hw]);
        }
        let value = Tensor::new(vec![b, count, h, w], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::SelectChannels { input, start }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|x| factor * x);
        let rg = self.rg(&[input]);
        self.push(value, Op::Scale(input, factor), rg)
    }

    /// Multiplication by a one-element tensor that may itself be trainable.
    pub fn mul_scalar(&mut self, scalar: Var, input: Var) -> Result<Var, AutodiffError> {
        if self.value(scalar).len() != 1 {
            return Err(shape_err(
                "mul_scalar",
                format!("scalar operand has shape {:?}", self.value(scalar).shape()),
            ));
        }
        let s = self.value(scalar).data()[0];
        let value = self.value(input).map(|x| s * x);
        let rg = self.rg(&[scalar, input]);
        Ok(self.push(value, Op::MulScalar { scalar, input }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn sum_squares(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|&x| x * x).sum::<T>();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::SumSquares(input), rg)
    }

    fn operator_shapes(
        &self,
        op: &'static str,
        input: Var,
        domain: [usize; 2],
    ) -> Result<[usize; 2], AutodiffError> {
        let [b, c, h, w] = self.dims4(op, input)?;
        if [h, w] != domain {
            return Err(shape_err(
                op,
                format!("operator domain is {domain:?}, input spatial shape is [{h}, {w}]"),
            ));
        }
        Ok([b, c])
    }

    /// Applies a linear operator slice-wise; backward applies its transpose.
    pub fn linear(&mut self, op: Arc<dyn LinearOperator<T>>, input: Var) -> Result<Var, AutodiffError> {
        let [b, c] = self.operator_shapes("linear", input, op.domain())?;
        let (n, m) = (grid_len(op.domain()), grid_len(op.range()));
        let x = self.value(input).data();
        let mut out = vec![T::zero(); b * c * m];
        for (xs, ys) in x.chunks_exact(n).zip(out.chunks_exact_mut(m)) {
            op.apply(xs, ys);
        }
        let [rh, rw] = op.range();
        let value = Tensor::new(vec![b, c, rh, rw], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Linear { op, input }, rg))
    }

    /// Applies a (possibly non-linear) operator slice-wise; backward applies
    /// the adjoint derivative at the stored input.
    pub fn operator(&mut self, op: Arc<dyn ForwardOperator<T>>, input: Var) -> Result<Var, AutodiffError> {
        let [b, c] = self.operator_shapes("operator", input, op.domain())?;
        let (n, m) = (grid_len(op.domain()), grid_len(op.range()));
        let x = self.value(input).data();
        let mut out = vec![T::zero(); b * c * m];
        for (xs, ys) in x.chunks_exact(n).zip(out.chunks_exact_mut(m)) {
            op.apply(xs, ys);
        }
        let [rh, rw] = op.range();
        let value = Tensor::new(vec![b, c, rh, rw], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Operator { op, input }, rg))
    }

    /// `[∂A(point)]*(cotangent)`, differentiable in both arguments.
    pub fn adjoint_derivative(
        &mut self,
        op: Arc<dyn ForwardOperator<T>>,
        point: Var,
        cotangent: Var,
    ) -> Result<Var, AutodiffError> {
        let [b, c] = self.operator_shapes("adjoint_derivative", point, op.domain())?;
        let [cb, cc] = self.operator_shapes("adjoint_derivative", cotangent, op.range())?;
        if [b, c] != [cb, cc] {
            return Err(shape_err(
                "adjoint_derivative",
                format!("point has [{b}, {c}] slices, cotangent has [{cb}, {cc}]"),
            ));
        }
        let (n, m) = (grid_len(op.domain()), grid_len(op.range()));
        let p = self.value(point).data();
        let g = self.value(cotangent).data();
        let mut out = vec![T::zero(); b * c * n];
        for ((ps, gs), os) in p
            .chunks_exact(n)
            .zip(g.chunks_exact(m))
            .zip(out.chunks_exact_mut(n))
        {
            op.derivative_adjoint(ps, gs, os);
        }
        let [dh, dw] = op.domain();
        let value = Tensor::new(vec![b, c, dh, dw], out)?;
        let rg = self.rg(&[cotangent]) || (self.rg(&[point]) && !op.is_linear());
        Ok(self.push(
            value,
            Op::AdjointDerivative {
                op,
                point,
                cotangent,
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::BackwardAlreadyRun);
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                let g = g?;
                if !node.requires_grad {
                    return None;
                }
                Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias } => {
                let dims = self.value(*input).dims4().expect("validated at construction");
                let cout = self.value(*weight).shape()[0];
                let g = conv::conv2d_backward(
                    self.value(*input).data(),
                    dims,
                    self.value(*weight).data(),
                    cout,
                    dy,
                    [needs(*input), needs(*weight), needs(*bias)],
                );
                if let Some(dx) = g.input {
                    accumulate(grads, *input, dx);
                }
                if let Some(dw) = g.weight {
                    accumulate(grads, *weight, dw);
                }
                if let Some(db) = g.bias {
                    accumulate(grads, *bias, db);
                }
            }
            Op::Prelu { input, coef } => {
                let [b, c, h, w] = self.value(*input).dims4().expect("validated");
                let hw = h * w;
                let x = self.value(*input).data();
                let cs = self.value(*coef).data();
                let mut dx = needs(*input).then(|| vec![T::zero(); x.len()]);
                let mut dc = needs(*coef).then(|| vec![T::zero(); c]);
                for n in 0..b {
                    for ch in 0..c {
                        let r = (n * c + ch) * hw..(n * c + ch + 1) * hw;
                        let neg = -cs[ch];
                        if let Some(dx) = dx.as_mut() {
                            for ((d, &xv), &g) in dx[r.clone()].iter_mut().zip(&x[r.clone()]).zip(&dy[r.clone()]) {
                                *d = if xv >= T::zero() { g } else { neg * g };
                            }
                        }
                        if let Some(dc) = dc.as_mut() {
                            let mut acc = T::zero();
                            for (&xv, &g) in x[r.clone()].iter().zip(&dy[r]) {
                                if xv < T::zero() {
                                    acc -= xv * g;
                                }
                            }
                            dc[ch] += acc;
                        }
                    }
                }
                if let Some(dx) = dx {
                    accumulate(grads, *input, dx);
                }
                if let Some(dc) = dc {
                    accumulate(grads, *coef, dc);
                }
            }
            Op::Concat(parts) => {
                let [b, channels, h, w] = node.value.dims4().expect("validated");
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if needs(p) {
                        let mut g = Vec::with_capacity(b * pc * hw);
                        for n in 0..b {
                            let start = (n * channels + offset) * hw;
                            g.extend_from_slice(&dy[start..start + pc * hw]);
                        }
                        accumulate(grads, p, g);
                    }
                    offset += pc;
                }
            }
            Op::SelectChannels { input, start } => {
                let [b, c, h, w] = self.value(*input).dims4().expect("validated");
                let count = node.value.shape()[1];
                let hw = h * w;
                let mut g = vec![T::zero(); b * c * hw];
                for n in 0..b {
                    g[(n * c + start) * hw..(n * c + start + count) * hw]
                        .copy_from_slice(&dy[n * count * hw..(n + 1) * count * hw]);
                }
                accumulate(grads, *input, g);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, dy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, dy.iter().map(|&g| -g).collect());
                }
            }
            Op::Scale(input, factor) => {
                accumulate(grads, *input, dy.iter().map(|&g| *factor * g).collect());
            }
            Op::MulScalar { scalar, input } => {
                let s = self.value(*scalar).data()[0];
                if needs(*scalar) {
                    let ds = self
                        .value(*input)
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&x, &g)| x * g)
                        .sum::<T>();
                    accumulate(grads, *scalar, vec![ds]);
                }
                if needs(*input) {
                    accumulate(grads, *input, dy.iter().map(|&g| s * g).collect());
                }
            }
            Op::Sum(input) => {
                accumulate(grads, *input, vec![dy[0]; self.value(*input).len()]);
            }
            Op::SumSquares(input) => {
                let two = T::of(2.0) * dy[0];
                accumulate(grads, *input, self.value(*input).data().iter().map(|&x| two * x).collect());
            }
            Op::Linear { op, input } => {
                let (n, m) = (grid_len(op.domain()), grid_len(op.range()));
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (gs, xs) in dy.chunks_exact(m).zip(dx.chunks_exact_mut(n)) {
                    op.apply_adjoint(gs, xs);
                }
                accumulate(grads, *input, dx);
            }
            Op::Operator { op, input } => {
                let (n, m) = (grid_len(op.domain()), grid_len(op.range()));
                let x = self.value(*input).data();
                let mut dx = vec![T::zero(); x.len()];
                for ((gs, xs), ds) in dy.chunks_exact(m).zip(x.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
                    op.derivative_adjoint(xs, gs, ds);
                }
                accumulate(grads, *input, dx);
            }
            Op::AdjointDerivative { op, point, cotangent } => {
                let (n, m) = (grid_len(op.domain()), grid_len(op.range()));
                let p = self.value(*point).data();
                let c = self.value(*cotangent).data();
                if needs(*cotangent) {
                    let mut dc = vec![T::zero(); c.len()];
                    for ((ps, gs), ds) in p.chunks_exact(n).zip(dy.chunks_exact(n)).zip(dc.chunks_exact_mut(m)) {
                        op.derivative(ps, gs, ds);
                    }
                    accumulate(grads, *cotangent, dc);
                }
                if needs(*point) && !op.is_linear() {
                    let mut dp = vec![T::zero(); p.len()];
                    for (((ps, cs), gs), ds) in p
                        .chunks_exact(n)
                        .zip(c.chunks_exact(m))
                        .zip(dy.chunks_exact(n))
                        .zip(dp.chunks_exact_mut(n))
                    {
                        op.second_order_adjoint(ps, cs, gs, ds);
                    }
                    accumulate(grads, *point, dp);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], var: Var, g: Vec<T>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests;
