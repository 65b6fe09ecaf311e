//! Reverse-mode differentiation over the tensor op set.
//!
//! A [`Tape`] records every op eagerly: the forward value is computed at
//! record time and the op keeps whatever context its adjoint needs. Nodes are
//! appended in execution order, so parents always precede children and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! [`gradcheck`] certifies adjoints against central finite differences.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry, ResizePlan};
use crate::tensor::{axis_split, gemm, numel_of, Real, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Result<Vec<Tensor<T>>>>;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    ScaleByVar {
        x: Var,
        s: Var,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    TransposeLast2(Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Option<Vec<T>>,
    },
    Upsample {
        x: Var,
        rows: ResizePlan,
        cols: ResizePlan,
    },
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Abs(_) => "abs",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "log",
            Op::Relu(_) => "relu",
            Op::ScaleByVar { .. } => "scale_by_var",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Reshape(_) => "reshape",
            Op::TransposeLast2(_) => "transpose",
            Op::MatMul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::Custom { name, .. } => name,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Bmm(a, b) => {
                vec![*a, *b]
            }
            Op::ScaleByVar { x, s } => vec![*x, *s],
            Op::Scale(x, _)
            | Op::Abs(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::TransposeLast2(x) => vec![*x],
            Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::NormalizeRows { x, .. }
            | Op::Upsample { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(grad),
    }
}

/// Broadcasts `g` (shape with `axis` removed) back along `axis` of `shape`.
fn expand_axis<T: Real>(g: &Tensor<T>, shape: &[usize], axis: usize, factor: T) -> Tensor<T> {
    let (outer, len, inner) = axis_split(shape, axis).expect("axis validated at record time");
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let src = &g.data()[o * inner..(o + 1) * inner];
        for a in 0..len {
            let dst = &mut out[(o * len + a) * inner..(o * len + a + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * factor;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape preserved")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a user-defined op. `backward` maps the output gradient and the
    /// input values to one gradient per input.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> + 'static,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x).scale(factor);
        self.push(v, Op::Scale(x, factor))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).abs();
        self.push(v, Op::Abs(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).exp()?;
        Ok(self.push(v, Op::Exp(x)))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).ln()?;
        Ok(self.push(v, Op::Ln(x)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).max0();
        self.push(v, Op::Relu(x))
    }

    /// `s * x` where `s` is a single-element variable (e.g. a learnable gain).
    pub fn scale_by_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let factor = self
            .value(s)
            .item()
            .map_err(|_| Error::shape("scale_by_var", "scale must hold one element"))?;
        let v = self.value(x).scale(factor);
        Ok(self.push(v, Op::ScaleByVar { x, s }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        if self.value(x).numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = Tensor::scalar(self.value(x).mean());
        Ok(self.push(v, Op::Mean(x)))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).sum_axis(axis)?;
        Ok(self.push(v, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).mean_axis(axis)?;
        Ok(self.push(v, Op::MeanAxis { x, axis }))
    }

    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let input = self.value(x);
        let (outer, len, inner) = axis_split(input.shape(), axis)?;
        if len == 0 {
            return Err(Error::shape("max_axis", "empty reduction axis"));
        }
        let mut argmax = Vec::with_capacity(outer * inner);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for a in 1..len {
                    let at = (o * len + a) * inner + i;
                    if input.data()[at] > input.data()[best] {
                        best = at;
                    }
                }
                argmax.push(best);
                out.push(input.data()[best]);
            }
        }
        let mut shape = input.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::MaxAxis { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose_last2()?;
        Ok(self.push(v, Op::TransposeLast2(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).bmm(self.value(b))?;
        Ok(self.push(v, Op::Bmm(a, b)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).softmax_axis(axis)?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x).log_softmax_axis(axis)?;
        Ok(self.push(v, Op::LogSoftmax { x, axis }))
    }

    /// Divides each row (last axis) by its Euclidean norm; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        if input.rank() == 0 {
            return Err(Error::shape("normalize_rows", "rank-0 input"));
        }
        let n = *input.shape().last().expect("rank checked");
        let rows = input.numel().checked_div(n).unwrap_or(0);
        let mut norms = Vec::with_capacity(rows);
        let mut out = input.data().to_vec();
        for row in out.chunks_mut(n.max(1)).take(rows) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                for v in row.iter_mut() {
                    *v = *v / norm;
                }
            }
            norms.push(norm);
        }
        let v = Tensor::new(input.shape().to_vec(), out)?;
        Ok(self.push(v, Op::NormalizeRows { x, norms }))
    }

    /// 2-D cross-correlation with zero padding. `w` is `[C_out, C_in, k, k]`,
    /// `b` (optional) is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let (out, cols) = nn::conv2d_forward(self.value(x), self.value(w), bias, geom)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }))
    }

    /// Bilinear upsampling of `[B,C,h,w]` to `[B,C,height,width]`
    /// (half-pixel centers, no corner alignment).
    pub fn upsample_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let shape = self.value(x).shape();
        if shape.len() != 4 {
            return Err(Error::shape("upsample_bilinear", "expected [B,C,H,W]"));
        }
        if height < shape[2] || width < shape[3] {
            return Err(Error::shape(
                "upsample_bilinear",
                format!(
                    "target {height}x{width} smaller than source {}x{}",
                    shape[2], shape[3]
                ),
            ));
        }
        let rows = ResizePlan::bilinear(shape[2], height);
        let cols = ResizePlan::bilinear(shape[3], width);
        let v = nn::resize_forward(self.value(x), &rows, &cols);
        Ok(self.push(v, Op::Upsample { x, rows, cols }))
    }

    /// Reverse sweep from a rank-0 `loss`. Does not mutate the tape, so
    /// repeated calls give identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.rank() != 0 {
            return Err(Error::shape(
                "backward",
                format!("loss must be rank-0, got shape {:?}", loss_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (parent, pg) in self.adjoint(idx, &g)? {
                if self.nodes[parent.0].requires_grad {
                    if !pg.is_finite() {
                        return Err(Error::NonFinite("backward"));
                    }
                    accumulate(&mut grads[parent.0], pg);
                }
            }
        }
        // keep only leaves; interior grads were consumed above
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *slot = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn adjoint(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(x, c) => vec![(*x, g.scale(*c))],
            Op::Abs(x) => vec![(
                *x,
                g.zip_map(val(*x), "abs", |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                })?,
            )],
            Op::Exp(x) => vec![(*x, g.mul(&node.value)?)],
            Op::Ln(x) => vec![(*x, g.zip_map(val(*x), "log", |g, x| g / x)?)],
            Op::Relu(x) => vec![(
                *x,
                g.zip_map(val(*x), "relu", |g, x| if x > T::zero() { g } else { T::zero() })?,
            )],
            Op::ScaleByVar { x, s } => {
                let factor = val(*s).item()?;
                let mut out = vec![(*x, g.scale(factor))];
                if wants(*s) {
                    let ds: T = g.data().iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                    out.push((*s, Tensor::new(val(*s).shape().to_vec(), vec![ds])?));
                }
                out
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()?))],
            Op::Mean(x) => {
                let n = T::from_f64(val(*x).numel() as f64);
                vec![(*x, Tensor::full(val(*x).shape(), g.item()? / n))]
            }
            Op::SumAxis { x, axis } => {
                vec![(*x, expand_axis(g, val(*x).shape(), *axis, T::one()))]
            }
            Op::MeanAxis { x, axis } => {
                let len = T::from_f64(val(*x).shape()[*axis] as f64);
                vec![(
                    *x,
                    expand_axis(g, val(*x).shape(), *axis, T::one() / len),
                )]
            }
            Op::MaxAxis { x, argmax, .. } => {
                let mut out = Tensor::zeros(val(*x).shape());
                for (&at, &gv) in argmax.iter().zip(g.data()) {
                    out.data_mut()[at] += gv;
                }
                vec![(*x, out)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape())?)],
            Op::TransposeLast2(x) => vec![(*x, g.transpose_last2()?)],
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let mut out = Vec::new();
                if wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut ga, false);
                    out.push((*a, Tensor::new(vec![m, k], ga)?));
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut gb, false);
                    out.push((*b, Tensor::new(vec![k, n], gb)?));
                }
                out
            }
            Op::Bmm(a, b) => {
                let s = val(*a).shape();
                let (batch, m, k) = (s[0], s[1], s[2]);
                let n = val(*b).shape()[2];
                let mut out = Vec::new();
                if wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &val(*b).data()[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    out.push((*a, Tensor::new(vec![batch, m, k], ga)?));
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &val(*a).data()[i * m * k..(i + 1) * m * k],
                            true,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    out.push((*b, Tensor::new(vec![batch, k, n], gb)?));
                }
                out
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis)?;
                let mut gx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: T = (0..len).map(|a| g.data()[at(a)] * y.data()[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = y.data()[at(a)] * (g.data()[at(a)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), gx)?)]
            }
            Op::LogSoftmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis)?;
                let mut gx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let total: T = (0..len).map(|a| g.data()[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = g.data()[at(a)] - y.data()[at(a)].exp() * total;
                        }
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), gx)?)]
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let n = *y.shape().last().expect("rank checked at record");
                let mut gx = vec![T::zero(); y.numel()];
                for (r, &norm) in norms.iter().enumerate() {
                    if norm <= T::zero() {
                        continue;
                    }
                    let span = r * n..(r + 1) * n;
                    let yr = &y.data()[span.clone()];
                    let gr = &g.data()[span.clone()];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in gx[span].iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * dot) / norm;
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), gx)?)]
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let grads = nn::conv2d_backward(
                    g,
                    val(*x),
                    val(*w),
                    cols.as_deref(),
                    *geom,
                    wants(*x),
                    wants(*w),
                    b.map(wants).unwrap_or(false),
                )?;
                let mut out = Vec::new();
                if let Some(gx) = grads.input {
                    out.push((*x, gx));
                }
                if let Some(gw) = grads.weight {
                    out.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    out.push((*b, gb));
                }
                out
            }
            Op::Upsample { x, rows, cols } => {
                vec![(*x, nn::resize_backward(g, val(*x).shape(), rows, cols))]
            }
            Op::Custom {
                inputs, backward, ..
            } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                let grads = backward(g, &values)?;
                if grads.len() != inputs.len() {
                    return Err(Error::shape(
                        "custom backward",
                        format!("{} grads for {} inputs", grads.len(), inputs.len()),
                    ));
                }
                for (gi, v) in grads.iter().zip(&values) {
                    gi.expect_same_shape(v, "custom backward")?;
                }
                inputs.iter().copied().zip(grads).collect()
            }
        })
    }
}

/// Per-input outcome of a finite-difference check.
#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    pub shape: Vec<usize>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

/// Result of [`gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tolerance
    }

    /// One CSV row per input: `op_name,shape,max_rel_err,pass`.
    pub fn csv_rows(&self) -> Vec<String> {
        self.inputs
            .iter()
            .map(|c| {
                let shape = c
                    .shape
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x");
                format!(
                    "{},{},{:.3e},{}",
                    self.name,
                    if shape.is_empty() { "scalar".into() } else { shape },
                    c.max_rel_err,
                    c.max_rel_err <= self.tolerance
                )
            })
            .collect()
    }
}

pub const GRADCHECK_CSV_HEADER: &str = "op_name,shape,max_rel_err,pass";

/// Gradient magnitudes below this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares backward gradients of `f` against central differences
/// `(f(x+h) - f(x-h)) / 2h` for every coordinate of every input.
pub fn gradcheck<F>(
    name: impl Into<String>,
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut checks = Vec::with_capacity(inputs.len());
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for coord in 0..numel_of(inputs[which].shape()) {
            let orig = inputs[which].data()[coord];
            work[which].data_mut()[coord] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[coord] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[coord];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
        }
        checks.push(InputCheck {
            shape: inputs[which].shape().to_vec(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradCheckReport {
        name: name.into(),
        tolerance: tol,
        inputs: checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_value() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.param(t(&[2], &[3.0, 5.0]));
        let z = tape.add(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[4.0, 7.0]);
    }

    #[test]
    fn sum_and_square_grads() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);

        let sq = tape.mul(x, x).unwrap();
        let s2 = tape.sum(sq);
        let g = tape.backward(s2).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn matmul_adjoint_is_textbook() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.param(t(&[3, 2], &[0.5, -1.0, 2.0, 0.0, 1.0, 3.0]));
        let c = tape.matmul(a, b).unwrap();
        let dc = t(&[2, 2], &[1.0, 2.0, -1.0, 0.5]);
        let w = tape.constant(dc.clone());
        let prod = tape.mul(c, w).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        let bt = tape.value(b).transpose2d().unwrap();
        let at = tape.value(a).transpose2d().unwrap();
        assert_eq!(g.wrt(a), dc.matmul(&bt).unwrap());
        assert_eq!(g.wrt(b), at.matmul(&dc).unwrap());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn unreachable_var_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.wrt(y).data(), &[0.0; 3]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn gradcheck_softmax_sum_is_flat() {
        let x = t(&[2, 3], &[0.1, -0.4, 2.0, 1.0, 0.0, -1.0]);
        let report = gradcheck(
            "softmax_sum",
            |tape, v| {
                let s = tape.softmax(v[0], 1)?;
                Ok(tape.sum(s))
            },
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.inputs[0].max_abs_err < 1e-9);
    }

    #[test]
    fn gradcheck_flags_broken_adjoint() {
        let x = t(&[3], &[0.3, -1.2, 0.7]);
        let report = gradcheck(
            "broken_square",
            |tape, v| {
                let value = tape.value(v[0]).map(|a| a * a);
                // adjoint should be 2x; x is wrong on purpose
                let sq = tape.custom("broken_square", &[v[0]], value, |g, inputs| {
                    Ok(vec![g.mul(inputs[0])?])
                });
                Ok(tape.sum(sq))
            },
            &[x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.csv_rows()[0].ends_with("false"));
    }

    #[test]
    fn normalize_zero_row_stays_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0]));
        let y = tape.normalize_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(&g.wrt(x).data()[..2], &[0.0, 0.0]);
    }
}
