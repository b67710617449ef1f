//! Reverse-mode autodiff over [`Array`] values.
//!
//! A [`Tape`] records every primitive application in evaluation order. Each
//! recorded value is checked for NaN/infinity as it is produced; the only
//! tolerated non-finite value is the `-inf` written by [`Tape::mask_fill`],
//! which [`Tape::softmax`] accepts as a "masked" sentinel.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeometry, ConvPlan};
use super::{Array, Real};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_t: bool,
    b_t: bool,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Recip(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    SumAxis(Var, usize),
    MatMul(Var, Var, MatMulDims),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Softmax(Var, usize),
    MaskFill(Var, Vec<bool>),
    Conv { x: Var, w: Var, b: Option<Var>, plan: Box<ConvPlan> },
    Upsample(Var, usize),
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-writer record of a forward evaluation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to the leaves that produced it.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Array<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like it when it did not participate.
    pub fn get_or_zeros(&self, tape: &Tape<T>, var: Var) -> Array<T> {
        self.get(var).cloned().unwrap_or_else(|| Array::zeros(tape.value(var).shape()))
    }

    pub fn take(&mut self, var: Var) -> Option<Array<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(dim_err!(op, "{:?} vs {:?}", a, b));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape(), data).expect("shapes checked by caller")
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

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Array<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Array<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite(matches!(op, Op::MaskFill(..))) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    /// `a` times the single value held by `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self
            .value(s)
            .item()
            .ok_or_else(|| dim_err!("mul_scalar_var", "scale operand has shape {:?}", self.shape(s)))?;
        let value = self.value(a).map(|x| x * sv);
        self.push("mul_scalar_var", value, Op::MulScalarVar(a, s), &[a, s])
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary("recip", a, |x| T::one() / x, Op::Recip(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        self.unary("leaky_relu", a, |x| if x > T::zero() { x } else { x * slope }, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, |x| T::one() / (T::one() + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |x| x.abs(), Op::Abs(a))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Array::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(dim_err!("mean", "empty operand"));
        }
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("sum_axis", "axis {} of {:?}", axis, shape));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (slot, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *slot = *slot + v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Array::new(&out_shape, out)?;
        self.push("sum_axis", value, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| dim_err!("mean_axis", "axis {} of {:?}", axis, self.shape(a)))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::from_f64(len as f64))
    }

    /// Matrix product of 2-D (`m×k · k×n`) or batched 3-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Matrix product with either operand optionally transposed in its last
    /// two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(dim_err!("matmul", "ranks {:?} and {:?}", sa, sb));
        }
        let r = sa.len();
        let batch = if r == 3 { sa[0] } else { 1 };
        if r == 3 && sb[0] != batch {
            return Err(dim_err!("matmul", "batch {} vs {}", sa[0], sb[0]));
        }
        let (m, k) = if a_t { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (k2, n) = if b_t { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != k2 {
            return Err(dim_err!("matmul", "inner extents {} vs {} ({:?} · {:?})", k, k2, sa, sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    a_t,
                    &bd[i * k * n..(i + 1) * k * n],
                    b_t,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape: Vec<usize> = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        let value = Array::new(&shape, out)?;
        let dims = MatMulDims { batch, m, k, n, a_t, b_t };
        self.push("matmul", value, Op::MatMul(a, b, dims), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("permute", "{:?} is not a permutation of {} axes", perm, shape.len()));
        }
        let (data, out_shape) = kernels::permute(self.value(a).data(), &shape, perm);
        let value = Array::new(&out_shape, data)?;
        self.push("permute", value, Op::Permute(a, perm.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| dim_err!("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat", "axis {} of {:?}", axis, base));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(dim_err!("concat", "{:?} vs {:?} along axis {}", s, base, axis));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                out.extend_from_slice(&self.value(*p).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Array::new(&shape, out)?;
        self.push("concat", value, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err!("slice", "[{}, {}) on axis {} of {:?}", start, start + len, axis, shape));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Array::new(&out_shape, out)?;
        self.push("slice", value, Op::Slice(a, axis, start), &[a])
    }

    /// Exp-normalise along `axis` with max subtraction. `-inf` entries get zero
    /// weight; a row made only of `-inf` yields zeros.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("softmax", "axis {} of {:?}", axis, shape));
        }
        let src = self.value(a);
        if src.data().iter().any(|v| v.is_nan() || (v.is_infinite() && v.is_sign_positive())) {
            return Err(Error::NonFinite { op: "softmax input" });
        }
        let value = Array::new(&shape, kernels::softmax(src.data(), &shape, axis))?;
        self.push("softmax", value, Op::Softmax(a, axis), &[a])
    }

    /// Replace entries where `mask` is set with `fill`; those entries pass no
    /// gradient.
    pub fn mask_fill(&mut self, a: Var, mask: &[bool], fill: T) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(dim_err!("mask_fill", "mask of {} for {:?}", mask.len(), self.shape(a)));
        }
        let src = self.value(a);
        let data = src.data().iter().zip(mask).map(|(&v, &m)| if m { fill } else { v }).collect();
        let value = Array::new(src.shape(), data)?;
        self.push("mask_fill", value, Op::MaskFill(a, mask.to_vec()), &[a])
    }

    /// Grouped 2-D cross-correlation. `x: N×Cin×H×W`, `w: Cout×(Cin/g)×kh×kw`,
    /// optional `bias: Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(dim_err!("conv2d", "input {:?}, weight {:?}", xs, ws));
        }
        let plan = self.conv_plan(
            "conv2d",
            [xs[0], xs[1], 1, xs[2], xs[3]],
            [ws[0], ws[1], 1, ws[2], ws[3]],
            bias,
            geo,
        )?;
        let out_shape = [plan.n, plan.cout, plan.output[1], plan.output[2]];
        self.conv_push("conv2d", x, w, bias, plan, &out_shape)
    }

    /// 3-D cross-correlation. `x: N×Cin×D×H×W`, `w: Cout×Cin×kd×kh×kw`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 5 {
            return Err(dim_err!("conv3d", "input {:?}, weight {:?}", xs, ws));
        }
        let plan = self.conv_plan("conv3d", [xs[0], xs[1], xs[2], xs[3], xs[4]], [ws[0], ws[1], ws[2], ws[3], ws[4]], bias, geo)?;
        let out_shape = [plan.n, plan.cout, plan.output[0], plan.output[1], plan.output[2]];
        self.conv_push("conv3d", x, w, bias, plan, &out_shape)
    }

    fn conv_plan(
        &self,
        op: &'static str,
        xs: [usize; 5],
        ws: [usize; 5],
        bias: Option<Var>,
        geo: ConvGeometry,
    ) -> Result<ConvPlan> {
        let g = geo.groups;
        if g == 0 || xs[1] % g != 0 || ws[0] % g != 0 {
            return Err(Error::Config(format!(
                "{op}: {} input and {} output channels cannot be split into {} groups",
                xs[1], ws[0], g
            )));
        }
        if ws[1] * g != xs[1] {
            return Err(dim_err!(op, "weight expects {} channels per group, input has {} in {} groups", ws[1], xs[1], g));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(dim_err!(op, "bias {:?} for {} output channels", self.shape(b), ws[0]));
            }
        }
        let input = [xs[2], xs[3], xs[4]];
        let kernel = [ws[2], ws[3], ws[4]];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = geo
                .out_extent(a, input[a], kernel[a])
                .ok_or_else(|| dim_err!(op, "kernel {:?} does not fit input {:?}", kernel, input))?;
        }
        Ok(ConvPlan::new(xs[0], xs[1], ws[0], input, kernel, output, geo))
    }

    fn conv_push(
        &mut self,
        name: &'static str,
        x: Var,
        w: Var,
        bias: Option<Var>,
        plan: ConvPlan,
        out_shape: &[usize],
    ) -> Result<Var> {
        let out = plan.forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Array::new(out_shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push(name, value, Op::Conv { x, w, b: bias, plan: Box::new(plan) }, &parents)
    }

    /// Nearest-neighbour upsampling of the last two axes.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || factor == 0 {
            return Err(dim_err!("upsample_nearest", "shape {:?}, factor {}", shape, factor));
        }
        let data = kernels::upsample_nearest(self.value(a).data(), &shape, factor);
        let mut out_shape = shape;
        let nd = out_shape.len();
        out_shape[nd - 2] *= factor;
        out_shape[nd - 1] *= factor;
        let value = Array::new(&out_shape, data)?;
        self.push("upsample_nearest", value, Op::Upsample(a, factor), &[a])
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Array<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = if i == loss.0 { grads[i].clone() } else { grads[i].take() };
            let Some(g) = g else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Array<T>, grads: &mut [Option<Array<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalarVar(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.map(|v| v * sv));
                }
                if self.wants(*s) {
                    let dot = g.data().iter().zip(self.value(*a).data()).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                    self.accumulate(grads, *s, Array::new(self.shape(*s), vec![dot])?);
                }
            }
            Op::Recip(a) => self.accumulate(grads, *a, zip_map(g, y, |gv, yv| -gv * yv * yv)),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, zip_map(g, x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }));
            }
            Op::LeakyRelu(a, slope) => {
                let (x, s) = (self.value(*a), *slope);
                self.accumulate(grads, *a, zip_map(g, x, |gv, xv| if xv > T::zero() { gv } else { gv * s }));
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * yv * (T::one() - yv))),
            Op::Abs(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, zip_map(g, x, |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Array::full(self.shape(*a), gv));
            }
            Op::SumAxis(a, axis) => {
                let shape = self.shape(*a);
                let (outer, len, inner) = kernels::axis_split(shape, *axis);
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        out.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, Array::new(shape, out)?);
            }
            Op::MatMul(a, b, d) => self.matmul_backward(*a, *b, d, g, grads)?,
            Op::Reshape(a) => self.accumulate(grads, *a, g.clone().reshaped(self.shape(*a))?),
            Op::Permute(a, perm) => {
                let inv = kernels::inverse_permutation(perm);
                let (data, shape) = kernels::permute(g.data(), g.shape(), &inv);
                self.accumulate(grads, *a, Array::new(&shape, data)?);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = kernels::axis_split(g.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let shape = self.shape(*p);
                    let len = shape[*axis];
                    if self.wants(*p) {
                        let mut out = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            out.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        self.accumulate(grads, *p, Array::new(shape, out)?);
                    }
                    offset += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let shape = self.shape(*a);
                let (outer, full, inner) = kernels::axis_split(shape, *axis);
                let len = g.shape()[*axis];
                let mut out = Array::zeros(shape);
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    out.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, out);
            }
            Op::Softmax(a, axis) => {
                let gx = kernels::softmax_backward(y.data(), g.data(), y.shape(), *axis);
                self.accumulate(grads, *a, Array::new(y.shape(), gx)?);
            }
            Op::MaskFill(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(&v, &m)| if m { T::zero() } else { v }).collect();
                self.accumulate(grads, *a, Array::new(g.shape(), data)?);
            }
            Op::Conv { x, w, b, plan } => {
                let need = [self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b))];
                let (gx, gw, gb) = plan.backward(self.value(*x).data(), self.value(*w).data(), g.data(), need);
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, Array::new(self.shape(*x), gx)?);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, Array::new(self.shape(*w), gw)?);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    self.accumulate(grads, *b, Array::new(self.shape(*b), gb)?);
                }
            }
            Op::Upsample(a, factor) => {
                let shape = self.shape(*a);
                let gx = kernels::upsample_nearest_backward(g.data(), shape, *factor);
                self.accumulate(grads, *a, Array::new(shape, gx)?);
            }
        }
        Ok(())
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        d: &MatMulDims,
        g: &Array<T>,
        grads: &mut [Option<Array<T>>],
    ) -> Result<()> {
        let MatMulDims { batch, m, k, n, a_t, b_t } = *d;
        let (ad, bd, gd) = (self.value(a).data(), self.value(b).data(), g.data());
        let (sa, sb, sg) = (m * k, k * n, m * n);
        if self.wants(a) {
            let mut ga = vec![T::zero(); batch * sa];
            for i in 0..batch {
                let (gi, bi, out) = (&gd[i * sg..(i + 1) * sg], &bd[i * sb..(i + 1) * sb], &mut ga[i * sa..(i + 1) * sa]);
                if a_t {
                    T::gemm(k, n, m, bi, b_t, gi, true, T::zero(), out);
                } else {
                    T::gemm(m, n, k, gi, false, bi, !b_t, T::zero(), out);
                }
            }
            self.accumulate(grads, a, Array::new(self.shape(a), ga)?);
        }
        if self.wants(b) {
            let mut gb = vec![T::zero(); batch * sb];
            for i in 0..batch {
                let (gi, ai, out) = (&gd[i * sg..(i + 1) * sg], &ad[i * sa..(i + 1) * sa], &mut gb[i * sb..(i + 1) * sb]);
                if b_t {
                    T::gemm(n, m, k, gi, true, ai, a_t, T::zero(), out);
                } else {
                    T::gemm(k, m, n, ai, !a_t, gi, false, T::zero(), out);
                }
            }
            self.accumulate(grads, b, Array::new(self.shape(b), gb)?);
        }
        Ok(())
    }
}
