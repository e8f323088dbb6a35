//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node that owns
//! its value and remembers its parents. Nodes are appended in evaluation
//! order, so the tape is already topologically sorted; [`Tape::backward`]
//! walks it once from the root to the first node, visiting each node exactly
//! once.
//!
//! Trainable tensors live in a [`ParamStore`]. A forward pass copies a
//! parameter onto the tape with [`Tape::param`]; `backward` adds the
//! gradient of the root into [`Parameter::grad`]. Gradients accumulate, so a
//! parameter used at several time steps receives the sum of its
//! contributions. Call [`ParamStore::zero_grad`] before each pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{self, axis_split, ShapeDisplay, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total number of scalar entries over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Euclidean norm of all gradients taken together.
    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self
            .params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum();
        libm::sqrt(sq)
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm measured before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let factor = max_norm / norm;
            for p in &mut self.params {
                for g in p.grad.data_mut() {
                    *g *= factor;
                }
            }
        }
        norm
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    /// `[rows×k]·[k×m]`, `a` flattened over its leading axes.
    MatMul {
        a: usize,
        b: usize,
        rows: usize,
        k: usize,
        m: usize,
    },
    /// Batched `[B,n,k]·[B,k,m]`, or `[B,n,k]·[B,m,k]ᵀ` when `trans_b`.
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    OneMinus(usize),
    Activation(usize, Activation),
    Abs(usize),
    SoftmaxLast(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    MeanAxis {
        x: usize,
        axis: usize,
    },
    Sum(usize),
    WeightedSum {
        weights: usize,
        stack: usize,
    },
    StraightThroughStep(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::shape(
        op,
        format!("incompatible shapes {} and {}", ShapeDisplay(a), ShapeDisplay(b)),
    )
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    /// Records a tensor that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies a parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match (sa, sb) {
            (&[n, k], &[k2, m]) if k == k2 => Ok(self.matmul_flat(a, b, n, k, m, vec![n, m])),
            _ => Err(shape_err("matmul", sa, sb)),
        }
    }

    fn matmul_flat(&mut self, a: Var, b: Var, rows: usize, k: usize, m: usize, shape: Vec<usize>) -> Var {
        let mut out = vec![0.0; rows * m];
        tensor::gemm_nn(self.value(a).data(), self.value(b).data(), rows, k, m, &mut out);
        let rg = self.rg(&[a.0, b.0]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a: a.0,
                b: b.0,
                rows,
                k,
                m,
            },
            rg,
        )
    }

    /// Pointwise affine map over the last axis: `x·W (+ bias)`.
    ///
    /// `x` has shape `[..., d_in]`, `w` is `[d_in, d_out]` and the optional
    /// bias is `[d_out]`. Equivalent to a 1×1 convolution over channels.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (Some(&d_in), &[k, m]) = (sx.last(), &sw[..]) else {
            return Err(shape_err("linear", &sx, &sw));
        };
        if d_in != k {
            return Err(shape_err("linear", &sx, &sw));
        }
        let rows = sx.iter().product::<usize>() / d_in;
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = m;
        let y = self.matmul_flat(x, w, rows, k, m, shape);
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    fn batch_dims(&self, op: &'static str, a: Var, b: Var, trans_b: bool) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        match (sa, sb) {
            (&[ba, n, k], &[bb, r, c]) if ba == bb => {
                let (kb, m) = if trans_b { (c, r) } else { (r, c) };
                if kb == k {
                    return Ok((ba, n, k, m));
                }
                Err(shape_err(op, sa, sb))
            }
            _ => Err(shape_err(op, sa, sb)),
        }
    }

    /// Batched matrix product `[B,n,k]·[B,k,m] → [B,n,m]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, n, k, m) = self.batch_dims("bmm", a, b, false)?;
        Ok(self.bmm_impl(a, b, batch, n, k, m, false))
    }

    /// Batched `a·bᵀ`: `[B,n,k]·[B,m,k]ᵀ → [B,n,m]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, n, k, m) = self.batch_dims("bmm_nt", a, b, true)?;
        Ok(self.bmm_impl(a, b, batch, n, k, m, true))
    }

    #[allow(clippy::too_many_arguments)]
    fn bmm_impl(&mut self, a: Var, b: Var, batch: usize, n: usize, k: usize, m: usize, trans_b: bool) -> Var {
        let mut out = vec![0.0; batch * n * m];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                let ab = &ad[i * n * k..(i + 1) * n * k];
                let bb = &bd[i * k * m..(i + 1) * k * m];
                let ob = &mut out[i * n * m..(i + 1) * n * m];
                if trans_b {
                    tensor::gemm_nt(ab, bb, n, k, m, ob);
                } else {
                    tensor::gemm_nn(ab, bb, n, k, m, ob);
                }
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        self.push(
            Tensor::from_parts(vec![batch, n, m], out),
            Op::BatchMatMul {
                a: a.0,
                b: b.0,
                batch,
                n,
                k,
                m,
                trans_b,
            },
            rg,
        )
    }

    fn zip_same(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Adds a `[d]` bias to every row of a `[..., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [d] {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let mut value = tx.clone();
        for row in value.data_mut().chunks_mut(d) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(value, Op::AddBias { x: x.0, bias: bias.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x.0]);
        self.push(value, Op::Scale { x: x.0, factor }, rg)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 - v);
        let rg = self.rg(&[x.0]);
        self.push(value, Op::OneMinus(x.0), rg)
    }

    pub fn activation(&mut self, x: Var, f: Activation) -> Var {
        let value = match f {
            Activation::Relu => self.value(x).map(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Sigmoid => self.value(x).map(tensor::sigmoid),
            Activation::Tanh => self.value(x).map(libm::tanh),
        };
        let rg = self.rg(&[x.0]);
        self.push(value, Op::Activation(x.0, f), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Elementwise absolute value; derivative at 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let rg = self.rg(&[x.0]);
        self.push(value, Op::Abs(x.0), rg)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let value = tensor::softmax_last(self.value(x));
        let rg = self.rg(&[x.0]);
        self.push(value, Op::SoftmaxLast(x.0), rg)
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {}", ShapeDisplay(&base)),
            ));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { parts: idx, axis }, rg))
    }

    /// Feature splicing along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        let axis = self.shape(*first).len().saturating_sub(1);
        self.concat(parts, axis)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {}", start + len, ShapeDisplay(&s)),
            ));
        }
        let (outer, dim, inner) = axis_split(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Narrow { x: x.0, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(value, Op::Reshape(x.0), rg))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(
                "mean_axis",
                format!("axis {axis} out of range for {}", ShapeDisplay(&s)),
            ));
        }
        let (outer, dim, inner) = axis_split(&s, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let scale = 1.0 / dim as f64;
        data.iter_mut().for_each(|v| *v *= scale);
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MeanAxis { x: x.0, axis }, rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(total), Op::Sum(x.0), rg)
    }

    /// `out[b] = Σ_e weights[b, e] · stack[b, e]` for `weights: [B, E]` and
    /// `stack: [B, E, ...]`. Terms are added in increasing `e`.
    pub fn weighted_sum(&mut self, weights: Var, stack: Var) -> Result<Var> {
        let (sw, ss) = (self.shape(weights).to_vec(), self.shape(stack).to_vec());
        if sw.len() != 2 || ss.len() < 3 || sw[..] != ss[..2] {
            return Err(shape_err("weighted_sum", &sw, &ss));
        }
        let (batch, heads) = (sw[0], sw[1]);
        let inner: usize = ss[2..].iter().product();
        let (w, s) = (self.value(weights).data(), self.value(stack).data());
        let mut data = vec![0.0; batch * inner];
        for b in 0..batch {
            let out = &mut data[b * inner..(b + 1) * inner];
            for e in 0..heads {
                let we = w[b * heads + e];
                let src = &s[(b * heads + e) * inner..(b * heads + e + 1) * inner];
                for (o, v) in out.iter_mut().zip(src) {
                    *o += we * v;
                }
            }
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&ss[2..]);
        let rg = self.rg(&[weights.0, stack.0]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::WeightedSum {
                weights: weights.0,
                stack: stack.0,
            },
            rg,
        ))
    }

    /// Hard threshold `1[z > 0.5]` whose backward pass is the identity
    /// (straight-through estimator).
    pub fn straight_through_step(&mut self, z: Var) -> Var {
        let value = self.value(z).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let rg = self.rg(&[z.0]);
        self.push(value, Op::StraightThroughStep(z.0), rg)
    }

    /// Propagates `d root / d node` backwards and adds the result into the
    /// gradients of every parameter reached.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {}",
                ShapeDisplay(rv.shape())
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                let p = store.get_mut(*id);
                if p.grad.shape() != g.shape() {
                    return Err(shape_err("backward(param)", p.grad.shape(), g.shape()));
                }
                for (acc, v) in p.grad.data_mut().iter_mut().zip(gd) {
                    *acc += v;
                }
            }
            &Op::MatMul { a, b, rows, k, m } => {
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data();
                    tensor::gemm_nt(gd, bv, rows, m, k, self.grad_buf(grads, a));
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data();
                    tensor::gemm_tn(av, gd, k, rows, m, self.grad_buf(grads, b));
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                trans_b,
            } => {
                let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                if self.nodes[a].requires_grad {
                    let ga = self.grad_buf(grads, a);
                    for i in 0..batch {
                        let gi = &gd[i * n * m..(i + 1) * n * m];
                        let bi = &bv[i * k * m..(i + 1) * k * m];
                        let out = &mut ga[i * n * k..(i + 1) * n * k];
                        if trans_b {
                            // b is [m, k]: dA = dC · B
                            tensor::gemm_nn(gi, bi, n, m, k, out);
                        } else {
                            tensor::gemm_nt(gi, bi, n, m, k, out);
                        }
                    }
                }
                if self.nodes[b].requires_grad {
                    let gb = self.grad_buf(grads, b);
                    for i in 0..batch {
                        let gi = &gd[i * n * m..(i + 1) * n * m];
                        let ai = &av[i * n * k..(i + 1) * n * k];
                        let out = &mut gb[i * k * m..(i + 1) * k * m];
                        if trans_b {
                            // dB = dCᵀ · A, [m, k]
                            tensor::gemm_tn(gi, ai, m, n, k, out);
                        } else {
                            tensor::gemm_tn(ai, gi, k, n, m, out);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, gd.iter().copied());
                self.accumulate(grads, b, gd.iter().copied());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, gd.iter().copied());
                self.accumulate(grads, b, gd.iter().map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                self.accumulate(grads, a, gd.iter().zip(bv).map(|(g, y)| g * y));
                self.accumulate(grads, b, gd.iter().zip(av).map(|(g, x)| g * x));
            }
            &Op::AddBias { x, bias } => {
                self.accumulate(grads, x, gd.iter().copied());
                if self.nodes[bias].requires_grad {
                    let d = self.nodes[bias].value.numel();
                    let gb = self.grad_buf(grads, bias);
                    for row in gd.chunks(d) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            &Op::Scale { x, factor } => self.accumulate(grads, x, gd.iter().map(|v| v * factor)),
            &Op::OneMinus(x) => self.accumulate(grads, x, gd.iter().map(|v| -v)),
            &Op::Activation(x, f) => {
                let y = node.value.data();
                match f {
                    Activation::Relu => {
                        self.accumulate(grads, x, gd.iter().zip(y).map(|(g, &o)| if o > 0.0 { *g } else { 0.0 }))
                    }
                    Activation::Sigmoid => self.accumulate(grads, x, gd.iter().zip(y).map(|(g, &o)| g * o * (1.0 - o))),
                    Activation::Tanh => self.accumulate(grads, x, gd.iter().zip(y).map(|(g, &o)| g * (1.0 - o * o))),
                }
            }
            &Op::Abs(x) => {
                let xv = self.nodes[x].value.data();
                self.accumulate(
                    grads,
                    x,
                    gd.iter().zip(xv).map(|(g, &v)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                );
            }
            &Op::SoftmaxLast(x) => {
                if self.nodes[x].requires_grad {
                    let y = node.value.data();
                    let width = *node.value.shape().last().unwrap_or(&1);
                    let gx = self.grad_buf(grads, x);
                    for ((grow, yrow), out) in gd.chunks(width).zip(y.chunks(width)).zip(gx.chunks_mut(width)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in out.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let dim = self.nodes[p].value.shape()[*axis];
                    if self.nodes[p].requires_grad {
                        let gp = self.grad_buf(grads, p);
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + dim) * inner];
                            for (acc, v) in gp[o * dim * inner..(o + 1) * dim * inner].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    }
                    offset += dim;
                }
            }
            &Op::Narrow { x, axis, start } => {
                if self.nodes[x].requires_grad {
                    let (outer, dim, inner) = axis_split(self.nodes[x].value.shape(), axis);
                    let len = node.value.shape()[axis];
                    let gx = self.grad_buf(grads, x);
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        for (acc, v) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
            }
            &Op::Reshape(x) => self.accumulate(grads, x, gd.iter().copied()),
            &Op::MeanAxis { x, axis } => {
                if self.nodes[x].requires_grad {
                    let (outer, dim, inner) = axis_split(self.nodes[x].value.shape(), axis);
                    let scale = 1.0 / dim as f64;
                    let gx = self.grad_buf(grads, x);
                    for o in 0..outer {
                        let src = &gd[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            let dst = &mut gx[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            for (acc, v) in dst.iter_mut().zip(src) {
                                *acc += v * scale;
                            }
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                let gv = gd[0];
                let n = self.nodes[x].value.numel();
                self.accumulate(grads, x, core::iter::repeat_n(gv, n));
            }
            &Op::WeightedSum { weights, stack } => {
                let sw = self.nodes[weights].value.shape();
                let (batch, heads) = (sw[0], sw[1]);
                let inner = node.value.numel() / batch;
                let (wv, sv) = (self.nodes[weights].value.data(), self.nodes[stack].value.data());
                if self.nodes[weights].requires_grad {
                    let gw = self.grad_buf(grads, weights);
                    for b in 0..batch {
                        let gb = &gd[b * inner..(b + 1) * inner];
                        for e in 0..heads {
                            let src = &sv[(b * heads + e) * inner..(b * heads + e + 1) * inner];
                            gw[b * heads + e] += gb.iter().zip(src).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.nodes[stack].requires_grad {
                    let gs = self.grad_buf(grads, stack);
                    for b in 0..batch {
                        let gb = &gd[b * inner..(b + 1) * inner];
                        for e in 0..heads {
                            let we = wv[b * heads + e];
                            let dst = &mut gs[(b * heads + e) * inner..(b * heads + e + 1) * inner];
                            for (acc, v) in dst.iter_mut().zip(gb) {
                                *acc += we * v;
                            }
                        }
                    }
                }
            }
            &Op::StraightThroughStep(z) => self.accumulate(grads, z, gd.iter().copied()),
        }
        Ok(())
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Tensor>], idx: usize) -> &'g mut [f64] {
        grads[idx]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[idx].value.shape()))
            .data_mut()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, contrib: impl Iterator<Item = f64>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        for (acc, v) in self.grad_buf(grads, idx).iter_mut().zip(contrib) {
            *acc += v;
        }
    }
}
