//! Reverse-mode gradient tape.
//!
//! Every operator appends one node holding its forward value. `backward`
//! walks the nodes in reverse creation order, so the tape is always a valid
//! topological order. Intermediate gradients are dropped as soon as they have
//! been propagated; only leaf gradients survive for inspection.

use super::conv::{self, ConvDims, ConvGeometry};
use super::ops::{self, PoolGeometry};
use super::{ParamId, Parameters, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv { input: Var, weight: Var, bias: Option<Var>, dims: ConvDims },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample(Var),
    Slice { input: Var, start: usize },
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut value = value;
        value.zero_grad();
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `tensor` as a leaf; it participates in backward iff it requires grad.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn param(&mut self, params: &Parameters, id: ParamId) -> Var {
        let v = self.push(params.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf recorded on this tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| {
            let id = n.param?;
            let g = self.grads.get(i)?.as_deref()?;
            Some((id, g))
        })
    }

    /// Adds `scale` times this tape's parameter gradients into `params`.
    pub fn accumulate_into(&self, params: &mut Parameters, scale: f64) {
        for (id, g) in self.param_grads() {
            params.get_mut(id).accumulate_grad(g, scale);
        }
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let out = Tensor::from_parts(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    fn zip_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let dims = ConvDims::resolve(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geom)?;
        let data = conv::forward(
            &dims,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::from_parts(vec![dims.n, dims.o, dims.ho, dims.wo], data);
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { input, weight, bias, dims }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.map_unary(x, |v| k * v, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.map_unary(x, |v| v + k, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::abs, Op::Abs(x))
    }

    /// Softmax over dimension 1.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let data = ops::softmax_channels(self.value(x), false)?;
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Log-softmax over dimension 1.
    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        let data = ops::softmax_channels(self.value(x), true)?;
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    pub fn max_pool2d(&mut self, x: Var, geom: PoolGeometry) -> Result<Var> {
        let pooled = ops::max_pool(self.value(x), geom)?;
        let out = Tensor::from_parts(pooled.shape, pooled.data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool { input: x, argmax: pooled.argmax }, rg))
    }

    /// Bilinear ×2 upsampling with half-pixel centers.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::upsample2x(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample(x), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (outer, ch, inner) = ops::channel_layout(self.shape(x), "slice_channels")?;
        if start + len > ch || len == 0 {
            return Err(Error::shape("slice_channels", format!("range {start}..{} of {ch} channels", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * ch + start) * inner..(o * ch + start + len) * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { input: x, start }, rg))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
        let (outer, _, inner) = ops::channel_layout(self.shape(first), "concat_channels")?;
        let mut total = 0;
        for &x in xs {
            let (o, c, i) = ops::channel_layout(self.shape(x), "concat_channels")?;
            if o != outer || i != inner || self.shape(x)[2..] != self.shape(first)[2..] {
                return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", self.shape(first), self.shape(x))));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let c = self.shape(x)[1];
                data.extend_from_slice(&self.value(x).data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = self.shape(first).to_vec();
        shape[1] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Back-propagates from a scalar `loss`, filling leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Err(Error::DetachedGraph);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let elementwise = |x: Var, grads: &mut [Option<Vec<f64>>], f: &dyn Fn(usize) -> f64| {
            if needs(x) {
                let d: Vec<f64> = (0..g.len()).map(f).collect();
                accumulate(grads, x, d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, dims } => {
                let cg = conv::backward(
                    dims,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    needs(*input),
                    needs(*weight),
                    bias.is_some_and(needs),
                );
                if let Some(d) = cg.input {
                    accumulate(grads, *input, d);
                }
                if let Some(d) = cg.weight {
                    accumulate(grads, *weight, d);
                }
                if let (Some(b), Some(d)) = (bias, cg.bias) {
                    accumulate(grads, *b, d);
                }
            }
            Op::Add(a, b) => {
                elementwise(*a, grads, &|k| g[k]);
                elementwise(*b, grads, &|k| g[k]);
            }
            Op::Sub(a, b) => {
                elementwise(*a, grads, &|k| g[k]);
                elementwise(*b, grads, &|k| -g[k]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                elementwise(*a, grads, &|k| g[k] * vb[k]);
                elementwise(*b, grads, &|k| g[k] * va[k]);
            }
            Op::Scale(x, s) => elementwise(*x, grads, &|k| g[k] * s),
            Op::AddScalar(x) => elementwise(*x, grads, &|k| g[k]),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                elementwise(*x, grads, &|k| if vx[k] > 0.0 { g[k] } else { 0.0 });
            }
            Op::Sigmoid(x) => elementwise(*x, grads, &|k| g[k] * out[k] * (1.0 - out[k])),
            Op::Exp(x) => elementwise(*x, grads, &|k| g[k] * out[k]),
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                elementwise(*x, grads, &|k| {
                    if vx[k] > 0.0 {
                        g[k]
                    } else if vx[k] < 0.0 {
                        -g[k]
                    } else {
                        0.0
                    }
                });
            }
            Op::Softmax(x) => {
                if needs(*x) {
                    accumulate(grads, *x, ops::softmax_channels_backward(node.value.shape(), out, g, false));
                }
            }
            Op::LogSoftmax(x) => {
                if needs(*x) {
                    accumulate(grads, *x, ops::softmax_channels_backward(node.value.shape(), out, g, true));
                }
            }
            Op::MaxPool { input, argmax } => {
                if needs(*input) {
                    let mut d = vec![0.0; self.value(*input).numel()];
                    for (k, &src) in argmax.iter().enumerate() {
                        if src != usize::MAX {
                            d[src] += g[k];
                        }
                    }
                    accumulate(grads, *input, d);
                }
            }
            Op::Upsample(x) => {
                if needs(*x) {
                    accumulate(grads, *x, ops::upsample2x_backward(self.shape(*x), g));
                }
            }
            Op::Slice { input, start } => {
                if needs(*input) {
                    let (outer, ch, inner) = ops::channel_layout(self.shape(*input), "slice").expect("validated");
                    let len = node.value.shape()[1];
                    let mut d = vec![0.0; outer * ch * inner];
                    for o in 0..outer {
                        d[(o * ch + start) * inner..(o * ch + start + len) * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(grads, *input, d);
                }
            }
            Op::Concat(xs) => {
                let (outer, total, inner) = ops::channel_layout(node.value.shape(), "concat").expect("validated");
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if needs(x) {
                        let mut d = Vec::with_capacity(outer * c * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            d.extend_from_slice(&g[from..from + c * inner]);
                        }
                        accumulate(grads, x, d);
                    }
                    offset += c;
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let n = self.value(*x).numel();
                    accumulate(grads, *x, vec![g[0] / n as f64; n]);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(&delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
