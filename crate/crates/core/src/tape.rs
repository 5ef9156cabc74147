//! Reverse-mode differentiation over a fixed op vocabulary.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. It is rebuilt
//! for each forward pass and never shared across threads; tensors themselves
//! are plain values. [`Tape::backprop`] walks the record in reverse and
//! returns gradients for every leaf created with `requires_grad`.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::DMatrix;

use crate::conv;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    L2Norm(usize),
    SumPerSample(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    ChannelMul(usize, usize),
    ChannelAdd(usize, usize),
    SliceChannels {
        src: usize,
        start: usize,
    },
    ConcatChannels(usize, usize),
    Squeeze(usize),
    Unsqueeze(usize),
    Reshape(usize),
    ExpandBatch(usize),
    MatInverse(usize),
    LogAbsDet(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to the tape's trainable leaves.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when it did not reach the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(&var.value()))
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| NodeId(i))
    }
}

fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || a.is_scalar() || b.is_scalar()
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f).expect("shapes checked");
    }
    if b.is_scalar() {
        let s = b.item();
        a.map(|v| f(v, s))
    } else {
        let s = a.item();
        b.map(|v| f(s, v))
    }
}

/// Reduce a gradient computed at the broadcast shape back to `target`.
fn unbroadcast(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        grad
    } else {
        Tensor::new(target.shape().to_vec(), vec![grad.sum()]).expect("scalar target")
    }
}

fn channel_broadcast(x: &Tensor, v: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    if v.len() != c {
        return Err(Error::shape("channel broadcast", x.shape(), v.shape()));
    }
    let plane = h * w;
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let s = v.data()[ch];
            let base = (b * c + ch) * plane;
            for o in &mut out.data_mut()[base..base + plane] {
                *o = f(*o, s);
            }
        }
    }
    Ok(out)
}

/// Sum over batch and spatial axes, leaving one value per channel.
fn channel_sums(x: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = x.nchw().expect("rank-4 checked at record time");
    let plane = h * w;
    let mut out = vec![0.0; c];
    for b in 0..n {
        for (ch, acc) in out.iter_mut().enumerate() {
            let base = (b * c + ch) * plane;
            *acc += x.data()[base..base + plane].iter().sum::<f64>();
        }
    }
    out
}

fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    match t.shape() {
        [r, c] if r == c => Ok(DMatrix::from_row_slice(*r, *c, t.data())),
        s => Err(Error::invalid(
            "matrix op",
            format!("expected square matrix, got {s:?}"),
        )),
    }
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(vec![r, c], data).expect("matrix dims")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn grad_flag(&self, parents: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        parents.iter().any(|&p| nodes[p].requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// A leaf whose gradient is tracked.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let rg = self.grad_flag(parents);
        self.push(value, op, rg)
    }

    /// Gradients of the scalar `loss` with respect to every tracked leaf.
    ///
    /// Tracked leaves that do not influence `loss` receive zero gradients.
    pub fn backprop(&self, loss: Var<'_>) -> Result<GradientMap> {
        let nodes = self.nodes.borrow();
        let len = loss.id + 1;
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backprop needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::new(nodes[loss.id].value.shape().to_vec(), vec![1.0])?);

        for id in (0..len).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |p: usize| -> &Tensor { &nodes[p].value };
            let needs = |p: usize| nodes[p].requires_grad;
            let mut contrib: Vec<(usize, Tensor)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(a) {
                        contrib.push((a, unbroadcast(g.clone(), val(a))));
                    }
                    if needs(b) {
                        contrib.push((b, unbroadcast(g.clone(), val(b))));
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(a) {
                        contrib.push((a, unbroadcast(g.clone(), val(a))));
                    }
                    if needs(b) {
                        contrib.push((b, unbroadcast(g.map(|v| -v), val(b))));
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(a) {
                        let ga = binary(&g, val(b), |gv, bv| gv * bv);
                        contrib.push((a, unbroadcast(ga, val(a))));
                    }
                    if needs(b) {
                        let gb = binary(&g, val(a), |gv, av| gv * av);
                        contrib.push((b, unbroadcast(gb, val(b))));
                    }
                }
                Op::Scale(a, k) => contrib.push((*a, g.map(|v| v * k))),
                Op::Offset(a) => contrib.push((*a, g)),
                Op::Exp(a) => contrib.push((*a, g.zip_map(&node.value, |gv, y| gv * y)?)),
                Op::Log(a) => contrib.push((*a, g.zip_map(val(*a), |gv, x| gv / x)?)),
                Op::Relu(a) => contrib.push((*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?)),
                Op::Square(a) => contrib.push((*a, g.zip_map(val(*a), |gv, x| 2.0 * gv * x)?)),
                Op::Sqrt(a) => contrib.push((
                    *a,
                    g.zip_map(&node.value, |gv, y| if y > 0.0 { gv * 0.5 / y } else { 0.0 })?,
                )),
                Op::Sum(a) => {
                    let gv = g.item();
                    contrib.push((*a, Tensor::full(val(*a).shape().to_vec(), gv)));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let gv = g.item() / x.len() as f64;
                    contrib.push((*a, Tensor::full(x.shape().to_vec(), gv)));
                }
                Op::L2Norm(a) => {
                    let norm = node.value.item();
                    let gv = g.item();
                    let ga = if norm > 0.0 {
                        val(*a).map(|x| gv * x / norm)
                    } else {
                        Tensor::zeros_like(val(*a))
                    };
                    contrib.push((*a, ga));
                }
                Op::SumPerSample(a) => {
                    let x = val(*a);
                    let n = x.shape()[0];
                    let per = x.len() / n;
                    let ga = Tensor::from_fn(x.shape().to_vec(), |i| g.data()[i / per]);
                    contrib.push((*a, ga));
                }
                Op::Conv2d { input, weight, bias } => {
                    let cg = conv::conv2d_backward(val(*input), val(*weight), &g, needs(*input))?;
                    if let Some(gi) = cg.input {
                        contrib.push((*input, gi));
                    }
                    if needs(*weight) {
                        contrib.push((*weight, cg.weight));
                    }
                    if let Some(b) = bias {
                        if needs(*b) {
                            contrib.push((*b, cg.bias.reshape(val(*b).shape().to_vec())?));
                        }
                    }
                }
                Op::ChannelMul(x, v) => {
                    let (x, v) = (*x, *v);
                    if needs(x) {
                        contrib.push((x, channel_broadcast(&g, val(v), |gv, s| gv * s)?));
                    }
                    if needs(v) {
                        let prod = g.zip_map(val(x), |gv, xv| gv * xv)?;
                        let sums = channel_sums(&prod);
                        contrib.push((v, Tensor::new(val(v).shape().to_vec(), sums)?));
                    }
                }
                Op::ChannelAdd(x, v) => {
                    let (x, v) = (*x, *v);
                    if needs(v) {
                        let sums = channel_sums(&g);
                        contrib.push((v, Tensor::new(val(v).shape().to_vec(), sums)?));
                    }
                    if needs(x) {
                        contrib.push((x, g));
                    }
                }
                Op::SliceChannels { src, start } => {
                    let full = val(*src);
                    let (_, c, _, _) = full.nchw()?;
                    let (n, len, h, w) = g.nchw()?;
                    let plane = h * w;
                    let mut out = Tensor::zeros_like(full);
                    for b in 0..n {
                        let dst = (b * c + start) * plane;
                        out.data_mut()[dst..dst + len * plane]
                            .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
                    }
                    contrib.push((*src, out));
                }
                Op::ConcatChannels(a, b) => {
                    let ca = val(*a).nchw()?.1;
                    let cb = val(*b).nchw()?.1;
                    if needs(*a) {
                        contrib.push((*a, g.slice_channels(0, ca)?));
                    }
                    if needs(*b) {
                        contrib.push((*b, g.slice_channels(ca, cb)?));
                    }
                }
                Op::Squeeze(a) => contrib.push((*a, g.unsqueeze2()?)),
                Op::Unsqueeze(a) => contrib.push((*a, g.squeeze2()?)),
                Op::Reshape(a) => contrib.push((*a, g.reshape(val(*a).shape().to_vec())?)),
                Op::ExpandBatch(a) => {
                    let src = val(*a);
                    let per = src.len();
                    let mut acc = Tensor::zeros_like(src);
                    for chunk in g.data().chunks(per) {
                        for (o, v) in acc.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    contrib.push((*a, acc));
                }
                Op::MatInverse(a) => {
                    // d(A^-1) = -A^-1 dA A^-1  =>  dL/dA = -B^T G B^T with B = A^-1
                    let bt = to_matrix(&node.value)?.transpose();
                    let gm = to_matrix(&g)?;
                    contrib.push((*a, from_matrix(&(-(&bt * gm * &bt)))));
                }
                Op::LogAbsDet(a) => {
                    let m = to_matrix(val(*a))?;
                    let inv = m.try_inverse().ok_or(Error::Singular { det: 0.0 })?.transpose();
                    contrib.push((*a, from_matrix(&(inv * g.item()))));
                }
            }
            for (p, gp) in contrib {
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&gp),
                    slot @ None => *slot = Some(gp),
                }
            }
        }

        // Tracked leaves the loss never reached still get an entry.
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros_like(&node.value));
            }
        }
        Ok(GradientMap { grads })
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        NodeId(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn elementwise(self, other: Var<'t>, name: &'static str, f: fn(f64, f64) -> f64) -> Result<(Tensor, usize, usize)> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if !broadcast_ok(&a, &b) {
            return Err(Error::shape(name, a.shape(), b.shape()));
        }
        Ok((binary(&a, &b, f), self.id, other.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, a, b) = self.elementwise(other, "add", |x, y| x + y)?;
        Ok(self.tape.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, a, b) = self.elementwise(other, "sub", |x, y| x - y)?;
        Ok(self.tape.record(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, a, b) = self.elementwise(other, "mul", |x, y| x * y)?;
        Ok(self.tape.record(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let v = self.value().map(|x| x * k);
        self.tape.record(v, Op::Scale(self.id, k), &[self.id])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.tape.record(v, Op::Offset(self.id), &[self.id])
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.tape.record(v, Op::Exp(self.id), &[self.id])
    }

    pub fn log(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(i) = x.data().iter().position(|&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive value {} at index {i}", x.data()[i]),
            });
        }
        let v = x.map(f64::ln);
        Ok(self.tape.record(v, Op::Log(self.id), &[self.id]))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.tape.record(v, Op::Relu(self.id), &[self.id])
    }

    pub fn square(self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.tape.record(v, Op::Square(self.id), &[self.id])
    }

    /// Elementwise square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(i) = x.data().iter().position(|&v| v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative value {} at index {i}", x.data()[i]),
            });
        }
        let v = x.map(f64::sqrt);
        Ok(self.tape.record(v, Op::Sqrt(self.id), &[self.id]))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.record(v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.tape.record(v, Op::Mean(self.id), &[self.id])
    }

    /// `sqrt(sum(x^2))`; the gradient at the origin is taken as zero.
    pub fn l2_norm(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().l2_norm());
        self.tape.record(v, Op::L2Norm(self.id), &[self.id])
    }

    /// Sum over every axis but the leading one, giving shape `[N]`.
    pub fn sum_per_sample(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x
            .shape()
            .first()
            .ok_or_else(|| Error::invalid("sum_per_sample", "rank-0 input"))?;
        let per = x.len() / n;
        let sums = x.data().chunks(per).map(|c| c.iter().sum()).collect();
        let v = Tensor::new(vec![n], sums)?;
        Ok(self.tape.record(v, Op::SumPerSample(self.id), &[self.id]))
    }

    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let bias_val = bias.map(|b| b.value());
        let v = conv::conv2d_forward(&self.value(), &weight.value(), bias_val.as_deref())?;
        let mut parents = vec![self.id, weight.id];
        if let Some(b) = bias {
            parents.push(b.id);
        }
        Ok(self.tape.record(
            v,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
            },
            &parents,
        ))
    }

    /// Multiply each channel of an `(N, C, H, W)` tensor by `v[c]`.
    pub fn channel_mul(self, v: Var<'t>) -> Result<Var<'t>> {
        let out = channel_broadcast(&self.value(), &v.value(), |x, s| x * s)?;
        Ok(self.tape.record(out, Op::ChannelMul(self.id, v.id), &[self.id, v.id]))
    }

    /// Add `v[c]` to each channel of an `(N, C, H, W)` tensor.
    pub fn channel_add(self, v: Var<'t>) -> Result<Var<'t>> {
        let out = channel_broadcast(&self.value(), &v.value(), |x, s| x + s)?;
        Ok(self.tape.record(out, Op::ChannelAdd(self.id, v.id), &[self.id, v.id]))
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value().slice_channels(start, len)?;
        Ok(self
            .tape
            .record(v, Op::SliceChannels { src: self.id, start }, &[self.id]))
    }

    pub fn concat_channels(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let v = Tensor::concat_channels(&self.value(), &other.value())?;
        Ok(self
            .tape
            .record(v, Op::ConcatChannels(self.id, other.id), &[self.id, other.id]))
    }

    pub fn squeeze2(self) -> Result<Var<'t>> {
        let v = self.value().squeeze2()?;
        Ok(self.tape.record(v, Op::Squeeze(self.id), &[self.id]))
    }

    pub fn unsqueeze2(self) -> Result<Var<'t>> {
        let v = self.value().unsqueeze2()?;
        Ok(self.tape.record(v, Op::Unsqueeze(self.id), &[self.id]))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.record(v, Op::Reshape(self.id), &[self.id]))
    }

    /// Repeat an `N = 1` tensor `n` times along the batch axis.
    pub fn expand_batch(self, n: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().first() != Some(&1) {
            return Err(Error::invalid(
                "expand_batch",
                format!("expected leading extent 1, got {:?}", x.shape()),
            ));
        }
        if n == 1 {
            return Ok(self);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = n;
        let mut data = Vec::with_capacity(x.len() * n);
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let v = Tensor::new(shape, data)?;
        Ok(self.tape.record(v, Op::ExpandBatch(self.id), &[self.id]))
    }

    pub fn mat_inverse(self) -> Result<Var<'t>> {
        let m = to_matrix(&self.value())?;
        let det = m.determinant();
        let inv = m.try_inverse().ok_or(Error::Singular { det: det.abs() })?;
        Ok(self.tape.record(from_matrix(&inv), Op::MatInverse(self.id), &[self.id]))
    }

    /// `log |det A|` of a square matrix.
    pub fn log_abs_det(self) -> Result<Var<'t>> {
        let m = to_matrix(&self.value())?;
        let det = m.lu().determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Singular { det: det.abs() });
        }
        let v = Tensor::scalar(det.abs().ln());
        Ok(self.tape.record(v, Op::LogAbsDet(self.id), &[self.id]))
    }
}

/// Maximum over coordinates of `|analytic - central| / max(1, |central|)`.
///
/// `f` must map a tensor to a scalar; it is re-evaluated on fresh tapes for
/// each finite-difference probe.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let loss = f(&tape, xv)?;
    let analytic = tape.backprop(loss)?.wrt(xv);
    let eval = |probe: Tensor| -> Result<f64> {
        let t = Tape::new();
        let v = t.constant(probe);
        Ok(f(&t, v)?.item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![3]));
        assert_eq!(z.exp().value().data(), &[1.0, 1.0, 1.0]);
        let r = tape.constant(t(&[2], &[-1.0, 2.0])).relu();
        assert_eq!(r.value().data(), &[0.0, 2.0]);
        let a = tape.constant(t(&[2], &[2.0, 3.0]));
        let b = tape.constant(t(&[2], &[4.0, 5.0]));
        assert_eq!(a.mul(b).unwrap().value().data(), &[8.0, 15.0]);
    }

    #[test]
    fn reduction_examples() {
        let tape = Tape::new();
        assert_eq!(tape.constant(t(&[3], &[1.0, 2.0, 3.0])).sum().item(), 6.0);
        assert_eq!(tape.constant(t(&[2], &[3.0, 4.0])).l2_norm().item(), 5.0);
        assert_eq!(tape.constant(t(&[2], &[2.0, 4.0])).mean().item(), 3.0);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(x.log(), Err(Error::Domain { .. })));
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        assert!(matches!(a.add(b), Err(Error::Shape { .. })));
    }

    #[test]
    fn scalar_operand_broadcasts() {
        let tape = Tape::new();
        let a = tape.var(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.var(Tensor::scalar(2.0));
        let loss = a.mul(s).unwrap().sum();
        let g = tape.backprop(loss).unwrap();
        assert_eq!(g.wrt(a).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(s).item(), 6.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64));
        let g = tape.backprop(x.sum()).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn exp_gradient() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[0.0, 1.0]));
        let g = tape.backprop(x.exp().sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, std::f64::consts::E]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backprop(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_entry() {
        let tape = Tape::new();
        let x = tape.var(Tensor::ones(vec![2]));
        let y = tape.var(Tensor::ones(vec![3]));
        let g = tape.backprop(x.sum()).unwrap();
        assert_eq!(g.wrt(y).data(), &[0.0, 0.0, 0.0]);
        assert!(g.get(y).is_some());
    }

    #[test]
    fn grad_check_trivial_cases() {
        let x = Tensor::from_fn(vec![4], |i| i as f64 * 0.3 - 0.2);
        assert!(grad_check(|_, v| Ok(v.sum()), &x, 1e-5).unwrap() < 1e-9);
        let x = t(&[2], &[1.0, 2.0]);
        let err = grad_check(|_, v| Ok(v.square().sum().scale(0.5)), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn backprop_is_deterministic() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_fn(vec![1, 2, 3, 3], |i| (i as f64 * 0.7).sin()));
        let w = tape.var(Tensor::from_fn(vec![2, 2, 3, 3], |i| (i as f64 * 0.3).cos()));
        let y = x.conv2d(w, None).unwrap().exp().sum();
        let a = tape.backprop(y).unwrap();
        let b = tape.backprop(y).unwrap();
        assert_eq!(a.wrt(x), b.wrt(x));
        assert_eq!(a.wrt(w), b.wrt(w));
    }
}
