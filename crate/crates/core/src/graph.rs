//! Append-only reverse-mode differentiation graph.
//!
//! Every operation appends a node whose parents have strictly smaller
//! indices, so reverse creation order is a valid topological order for
//! [`Graph::backward`]. A graph is meant for one forward/backward pass;
//! training rebuilds it per step.
//!
//! Broadcasting is limited to scalar-with-tensor ([`Graph::scale`],
//! [`Graph::add_scalar`]) plus two explicit row-wise ops
//! ([`Graph::add_bias`], [`Graph::mul_rows`]).

use crate::nn::activation::ActivationKind;
use crate::tensor::{Result, Shape, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise unary functions the graph knows how to differentiate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Activation(ActivationKind),
    Exp,
    Ln,
    Square,
}

impl Unary {
    fn forward(self, x: f64) -> f64 {
        match self {
            Unary::Activation(kind) => kind.apply(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Square => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Activation(kind) => kind.derivative(x),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Square => 2.0 * x,
        }
    }
}

/// Reduction kinds for [`Graph::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn same(dims: &[usize], k: usize, stride: usize, c_out: usize) -> Self {
        let (n, h, w, c_in) = (dims[0], dims[1], dims[2], dims[3]);
        let h_out = h.div_ceil(stride);
        let w_out = w.div_ceil(stride);
        let pad_h = ((h_out - 1) * stride + k).saturating_sub(h);
        let pad_w = ((w_out - 1) * stride + k).saturating_sub(w);
        ConvGeom {
            n,
            h,
            w,
            c_in,
            c_out,
            k,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
            h_out,
            w_out,
        }
    }

    /// Input coordinate for an output coordinate and kernel offset.
    #[inline]
    fn src(&self, o: usize, kk: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Reduce {
        x: Var,
        kind: Reduce,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat(Var, Var),
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    DepthwiseConv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    SoftmaxRows(Var),
    EntropyRows(Var),
    MulRows(Var, Var),
    NllMean {
        probs: Var,
        labels: Vec<usize>,
        floor: f64,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Concat(a, b)
            | Op::MulRows(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(a, _)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::EntropyRows(a) => vec![*a],
            Op::Reduce { x, .. } => vec![*x],
            Op::Conv2d { x, kernel, .. } | Op::DepthwiseConv2d { x, kernel, .. } => {
                vec![*x, *kernel]
            }
            Op::NllMean { probs, .. } => vec![*probs],
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(..) => "map_unary",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Reduce { .. } => "reduce",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::EntropyRows(..) => "entropy_rows",
            Op::MulRows(..) => "mul_rows",
            Op::NllMean { .. } => "nll_mean",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
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

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::Detached(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    /// Gradient from the last [`Graph::backward`], if this node was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_ref())
    }

    /// Operation tag and parent indices, for inspection.
    pub fn node_info(&self, v: Var) -> Option<(&'static str, Vec<usize>)> {
        self.nodes
            .get(v.0)
            .map(|n| (n.op.tag(), n.op.parents().iter().map(|p| p.0).collect()))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let parents = op.parents();
        for p in &parents {
            self.node(*p)?;
        }
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.tag() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::with_shape(ta.shape().clone(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| x + s);
        self.push(Op::AddScalar(a), v)
    }

    pub fn map_unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| f.forward(x));
        self.push(Op::Unary(a, f), v)
    }

    pub fn activation(&mut self, a: Var, kind: ActivationKind) -> Result<Var> {
        self.map_unary(a, Unary::Activation(kind))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.dims().len() != 2 || tb.dims().len() != 2 || ta.dims()[1] != tb.dims()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().clone(),
                rhs: tb.shape().clone(),
            });
        }
        let (m, k, n) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
        let out = matmul_raw(ta.values(), tb.values(), m, k, n);
        let out = Tensor::build(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), out)
    }

    /// `x[..., j] + bias[j]` over the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.node(x)?.value, &self.node(bias)?.value);
        let last = tx.dims().last().copied().unwrap_or(1);
        if tb.dims().len() != 1 || tb.dims()[0] != last {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().clone(),
                rhs: tb.shape().clone(),
            });
        }
        let b = tb.values();
        let data: Vec<f64> = tx
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % last])
            .collect();
        let out = Tensor::with_shape(tx.shape().clone(), data)?;
        self.push(Op::AddBias(x, bias), out)
    }

    /// Sum, mean or max over one axis (or all elements when `axis` is
    /// `None`). Max also returns the flat argmax index of each output
    /// element; ties resolve to the lowest index.
    pub fn reduce(&mut self, x: Var, kind: Reduce, axis: Option<usize>) -> Result<(Var, Vec<usize>)> {
        let t = &self.node(x)?.value;
        let dims = t.dims().to_vec();
        let (outer, len, inner, out_dims) = match axis {
            None => (1, t.len(), 1, vec![]),
            Some(ax) => {
                if ax >= dims.len() {
                    return Err(TensorError::AxisOutOfRange {
                        op: "reduce",
                        axis: ax,
                        rank: dims.len(),
                    });
                }
                let outer: usize = dims[..ax].iter().product();
                let inner: usize = dims[ax + 1..].iter().product();
                let mut od = dims.clone();
                od.remove(ax);
                (outer, dims[ax], inner, od)
            }
        };
        let vals = t.values();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == Reduce::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let slot = o * inner + i;
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let s: f64 = (0..len).map(|l| vals[idx(l)]).sum();
                        out[slot] = if kind == Reduce::Mean { s / len as f64 } else { s };
                    }
                    Reduce::Max => {
                        let mut best = idx(0);
                        for l in 1..len {
                            if vals[idx(l)] > vals[best] {
                                best = idx(l);
                            }
                        }
                        out[slot] = vals[best];
                        argmax[slot] = best;
                    }
                }
            }
        }
        let out = Tensor::build(out_dims, out)?;
        let v = self.push(
            Op::Reduce {
                x,
                kind,
                axis,
                argmax: argmax.clone(),
            },
            out,
        )?;
        Ok((v, argmax))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduce::Sum, None).map(|r| r.0)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduce::Mean, None).map(|r| r.0)
    }

    pub fn reshape(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.node(x)?.value.reshape(dims)?;
        self.push(Op::Reshape(x), out)
    }

    /// Concatenate two tensors with equal leading dims along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (da, db) = (ta.dims(), tb.dims());
        if da.is_empty() || da.len() != db.len() || da[..da.len() - 1] != db[..db.len() - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: ta.shape().clone(),
                rhs: tb.shape().clone(),
            });
        }
        let (ca, cb) = (*da.last().unwrap(), *db.last().unwrap());
        let rows = ta.len() / ca;
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..rows {
            data.extend_from_slice(&ta.values()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&tb.values()[r * cb..(r + 1) * cb]);
        }
        let mut dims = da.to_vec();
        *dims.last_mut().unwrap() = ca + cb;
        let out = Tensor::build(dims, data)?;
        self.push(Op::Concat(a, b), out)
    }

    /// Same-padded 2-D convolution over `[n, h, w, c_in]` with a
    /// `[k, k, c_in, c_out]` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (tx, tk) = (&self.node(x)?.value, &self.node(kernel)?.value);
        let (dx, dk) = (tx.dims(), tk.dims());
        if dx.len() != 4 || dk.len() != 4 || dk[0] != dk[1] || dk[2] != dx[3] || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape().clone(),
                rhs: tk.shape().clone(),
            });
        }
        let g = ConvGeom::same(dx, dk[0], stride, dk[3]);
        let (xv, kv) = (tx.values(), tk.values());
        let mut out = vec![0.0; g.n * g.h_out * g.w_out * g.c_out];
        for n in 0..g.n {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let o_base = ((n * g.h_out + oy) * g.w_out + ox) * g.c_out;
                    for ky in 0..g.k {
                        let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                        for kx in 0..g.k {
                            let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                            let x_base = ((n * g.h + iy) * g.w + ix) * g.c_in;
                            for ci in 0..g.c_in {
                                let xval = xv[x_base + ci];
                                let k_base = ((ky * g.k + kx) * g.c_in + ci) * g.c_out;
                                let krow = &kv[k_base..k_base + g.c_out];
                                let orow = &mut out[o_base..o_base + g.c_out];
                                for (o, &kw) in orow.iter_mut().zip(krow) {
                                    *o += xval * kw;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::build(vec![g.n, g.h_out, g.w_out, g.c_out], out)?;
        self.push(Op::Conv2d { x, kernel, geom: g }, out)
    }

    /// Same-padded depthwise convolution over `[n, h, w, c]` with a
    /// `[k, k, c]` kernel.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (tx, tk) = (&self.node(x)?.value, &self.node(kernel)?.value);
        let (dx, dk) = (tx.dims(), tk.dims());
        if dx.len() != 4 || dk.len() != 3 || dk[0] != dk[1] || dk[2] != dx[3] || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv2d",
                lhs: tx.shape().clone(),
                rhs: tk.shape().clone(),
            });
        }
        let g = ConvGeom::same(dx, dk[0], stride, dx[3]);
        let (xv, kv) = (tx.values(), tk.values());
        let c = g.c_in;
        let mut out = vec![0.0; g.n * g.h_out * g.w_out * c];
        for n in 0..g.n {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let o_base = ((n * g.h_out + oy) * g.w_out + ox) * c;
                    for ky in 0..g.k {
                        let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                        for kx in 0..g.k {
                            let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                            let x_base = ((n * g.h + iy) * g.w + ix) * c;
                            let k_base = (ky * g.k + kx) * c;
                            for ch in 0..c {
                                out[o_base + ch] += xv[x_base + ch] * kv[k_base + ch];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::build(vec![g.n, g.h_out, g.w_out, c], out)?;
        self.push(Op::DepthwiseConv2d { x, kernel, geom: g }, out)
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let c = last_dim("softmax_rows", t)?;
        let mut data = t.values().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::with_shape(t.shape().clone(), data)?;
        self.push(Op::SoftmaxRows(x), out)
    }

    /// Shannon entropy (natural log) of each row of a probability tensor.
    pub fn entropy_rows(&mut self, p: Var) -> Result<Var> {
        let t = &self.node(p)?.value;
        let c = last_dim("entropy_rows", t)?;
        let data: Vec<f64> = t
            .values()
            .chunks(c)
            .map(|row| row.iter().map(|&v| neg_plogp(v)).sum())
            .collect();
        let out = Tensor::build(row_dims(t), data)?;
        self.push(Op::EntropyRows(p), out)
    }

    /// Scale every row of `a` (rows along the last axis) by the matching
    /// entry of `s`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (&self.node(a)?.value, &self.node(s)?.value);
        let c = last_dim("mul_rows", ta)?;
        if ts.len() * c != ta.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mul_rows",
                lhs: ta.shape().clone(),
                rhs: ts.shape().clone(),
            });
        }
        let sv = ts.values();
        let data: Vec<f64> = ta
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / c])
            .collect();
        let out = Tensor::with_shape(ta.shape().clone(), data)?;
        self.push(Op::MulRows(a, s), out)
    }

    /// Mean over rows of `-ln(max(p[row, label], floor))`.
    pub fn nll_mean(&mut self, probs: Var, labels: &[usize], floor: f64) -> Result<Var> {
        let t = &self.node(probs)?.value;
        let c = last_dim("nll_mean", t)?;
        let rows = t.len() / c;
        if labels.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "nll_mean",
                lhs: t.shape().clone(),
                rhs: Shape::new(vec![labels.len().max(1)])?,
            });
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "nll_mean",
                    index: y,
                    limit: c,
                });
            }
            total -= t.values()[r * c + y].max(floor).ln();
        }
        let out = Tensor::scalar(total / rows as f64);
        self.push(
            Op::NllMean {
                probs,
                labels: labels.to_vec(),
                floor,
            },
            out,
        )
    }

    /// Populate gradients of every differentiable node reachable from
    /// `loss`, seeded with 1.0. Gradients of a previous pass are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.node(loss)?;
        if !node.value.shape().is_scalar() {
            return Err(TensorError::NonScalarLoss(node.value.shape().clone()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let shape = self.nodes[i].value.shape().clone();
            self.nodes[i].grad = Some(Tensor::with_shape(shape, g)?);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.values();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| axpy(s, g, 1.0));
                acc(*b, &mut |s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| axpy(s, g, 1.0));
                acc(*b, &mut |s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((s, &gi), &y) in s.iter_mut().zip(g).zip(vb) {
                        *s += gi * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((s, &gi), &x) in s.iter_mut().zip(g).zip(va) {
                        *s += gi * x;
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| axpy(s, g, *k)),
            Op::AddScalar(a) => acc(*a, &mut |s| axpy(s, g, 1.0)),
            Op::Unary(a, f) => {
                let (x, y) = (val(*a), node.value.values());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * f.derivative(x[i], y[i]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.dims()[0], ta.dims()[1], tb.dims()[1]);
                let (va, vb) = (ta.values(), tb.values());
                // dA = dC · Bᵀ
                acc(*a, &mut |s| {
                    for r in 0..m {
                        for kk in 0..k {
                            let brow = &vb[kk * n..(kk + 1) * n];
                            let grow = &g[r * n..(r + 1) * n];
                            s[r * k + kk] += dot(grow, brow);
                        }
                    }
                });
                // dB = Aᵀ · dC
                acc(*b, &mut |s| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let av = va[r * k + kk];
                            if av != 0.0 {
                                axpy(&mut s[kk * n..(kk + 1) * n], grow, av);
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| axpy(s, g, 1.0));
                let last = self.nodes[b.0].value.len();
                acc(*b, &mut |s| {
                    for (i, &gi) in g.iter().enumerate() {
                        s[i % last] += gi;
                    }
                });
            }
            Op::Reduce {
                x,
                kind,
                axis,
                argmax,
            } => {
                let dims = self.nodes[x.0].value.dims();
                let (len, inner) = match axis {
                    None => (self.nodes[x.0].value.len(), 1),
                    Some(ax) => (dims[*ax], dims[ax + 1..].iter().product()),
                };
                acc(*x, &mut |s| match kind {
                    Reduce::Max => {
                        for (slot, &src) in argmax.iter().enumerate() {
                            s[src] += g[slot];
                        }
                    }
                    Reduce::Sum | Reduce::Mean => {
                        let w = if *kind == Reduce::Mean { 1.0 / len as f64 } else { 1.0 };
                        for (j, s) in s.iter_mut().enumerate() {
                            let o = j / (len * inner);
                            let i = j % inner;
                            *s += g[o * inner + i] * w;
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| axpy(s, g, 1.0)),
            Op::Concat(a, b) => {
                let ca = *self.nodes[a.0].value.dims().last().unwrap();
                let cb = *self.nodes[b.0].value.dims().last().unwrap();
                let rows = self.nodes[a.0].value.len() / ca;
                acc(*a, &mut |s| {
                    for r in 0..rows {
                        axpy(&mut s[r * ca..(r + 1) * ca], &g[r * (ca + cb)..r * (ca + cb) + ca], 1.0);
                    }
                });
                acc(*b, &mut |s| {
                    for r in 0..rows {
                        let off = r * (ca + cb) + ca;
                        axpy(&mut s[r * cb..(r + 1) * cb], &g[off..off + cb], 1.0);
                    }
                });
            }
            Op::Conv2d { x, kernel, geom } => {
                let gm = *geom;
                let (xv, kv) = (val(*x), val(*kernel));
                acc(*x, &mut |s| {
                    conv_visit(&gm, |o_base, x_base, k_off| {
                        let grow = &g[o_base..o_base + gm.c_out];
                        for ci in 0..gm.c_in {
                            let kb = (k_off * gm.c_in + ci) * gm.c_out;
                            s[x_base + ci] += dot(grow, &kv[kb..kb + gm.c_out]);
                        }
                    })
                });
                acc(*kernel, &mut |s| {
                    conv_visit(&gm, |o_base, x_base, k_off| {
                        let grow = &g[o_base..o_base + gm.c_out];
                        for ci in 0..gm.c_in {
                            let kb = (k_off * gm.c_in + ci) * gm.c_out;
                            axpy(&mut s[kb..kb + gm.c_out], grow, xv[x_base + ci]);
                        }
                    })
                });
            }
            Op::DepthwiseConv2d { x, kernel, geom } => {
                let gm = ConvGeom { c_out: geom.c_in, ..*geom };
                let c = gm.c_in;
                let (xv, kv) = (val(*x), val(*kernel));
                acc(*x, &mut |s| {
                    conv_visit(&gm, |o_base, x_base, k_off| {
                        for ch in 0..c {
                            s[x_base + ch] += g[o_base + ch] * kv[k_off * c + ch];
                        }
                    })
                });
                acc(*kernel, &mut |s| {
                    conv_visit(&gm, |o_base, x_base, k_off| {
                        for ch in 0..c {
                            s[k_off * c + ch] += g[o_base + ch] * xv[x_base + ch];
                        }
                    })
                });
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.values();
                let c = *node.value.dims().last().unwrap_or(&1);
                acc(*x, &mut |s| {
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let inner = dot(yr, gr);
                        for j in 0..c {
                            s[r * c + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::EntropyRows(p) => {
                let pv = val(*p);
                let c = *self.nodes[p.0].value.dims().last().unwrap_or(&1);
                acc(*p, &mut |s| {
                    for (j, s) in s.iter_mut().enumerate() {
                        *s -= g[j / c] * (pv[j].max(f64::MIN_POSITIVE).ln() + 1.0);
                    }
                });
            }
            Op::MulRows(a, sv) => {
                let (va, vs) = (val(*a), val(*sv));
                let c = va.len() / vs.len();
                acc(*a, &mut |s| {
                    for (j, s) in s.iter_mut().enumerate() {
                        *s += g[j] * vs[j / c];
                    }
                });
                acc(*sv, &mut |s| {
                    for (j, (&gi, &ai)) in g.iter().zip(va).enumerate() {
                        s[j / c] += gi * ai;
                    }
                });
            }
            Op::NllMean {
                probs,
                labels,
                floor,
            } => {
                let pv = val(*probs);
                let c = pv.len() / labels.len();
                let w = g[0] / labels.len() as f64;
                acc(*probs, &mut |s| {
                    for (r, &y) in labels.iter().enumerate() {
                        let q = pv[r * c + y];
                        if q > *floor {
                            s[r * c + y] -= w / q;
                        }
                    }
                });
            }
        }
    }
}

fn conv_visit(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    for n in 0..g.n {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let o_base = ((n * g.h_out + oy) * g.w_out + ox) * g.c_out;
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.pad_top, g.h) else { continue };
                    for kx in 0..g.k {
                        let Some(ix) = g.src(ox, kx, g.pad_left, g.w) else { continue };
                        let x_base = ((n * g.h + iy) * g.w + ix) * g.c_in;
                        f(o_base, x_base, ky * g.k + kx);
                    }
                }
            }
        }
    }
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    t.dims().last().copied().ok_or_else(|| TensorError::RankMismatch {
        op,
        expected: ">= 1",
        shape: t.shape().clone(),
    })
}

fn row_dims(t: &Tensor) -> Vec<usize> {
    let d = t.dims();
    d[..d.len() - 1].to_vec()
}

#[inline]
fn neg_plogp(p: f64) -> f64 {
    if p > 0.0 {
        -p * p.ln()
    } else {
        0.0
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let av = a[r * k + kk];
            if av != 0.0 {
                axpy(orow, &b[kk * n..(kk + 1) * n], av);
            }
        }
    }
    out
}

/// `exp(z - max z)` normalised; the max entry of the shifted row is zero.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f64]) -> Tensor {
        Tensor::vector(v).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let a = g.constant(vec1(&[1.0, 2.0]));
        let b = g.constant(vec1(&[3.0, 4.0]));
        let z = g.constant(vec1(&[0.0, 0.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).values(), &[4.0, 6.0]);
        let m = g.mul(a, z).unwrap();
        assert_eq!(g.value(m).values(), &[0.0, 0.0]);
        let h = g.scale(a, 0.5).unwrap();
        assert_eq!(g.value(h).values(), &[0.5, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec1(&[1.0, 2.0]));
        let b = g.constant(vec1(&[1.0, 2.0, 3.0]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(p).values(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let p = g.matmul(r, c).unwrap();
        assert_eq!(g.value(p).values(), &[11.0]);

        let a = g.constant(Tensor::zeros(vec![3, 5]).unwrap());
        let b = g.constant(Tensor::zeros(vec![4, 2]).unwrap());
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::new();
        let x = g.constant(vec1(&[2.0, 4.0, 6.0]));
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), Some(4.0));

        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let (s, _) = g.reduce(x, Reduce::Sum, Some(0)).unwrap();
        assert_eq!(g.value(s).values(), &[4.0, 6.0]);

        let x = g.constant(vec1(&[1.0, 5.0, 2.0]));
        let (mx, idx) = g.reduce(x, Reduce::Max, None).unwrap();
        assert_eq!(g.value(mx).item(), Some(5.0));
        assert_eq!(idx, vec![1]);

        assert!(matches!(
            g.reduce(x, Reduce::Sum, Some(1)),
            Err(TensorError::AxisOutOfRange { .. })
        ));
    }

    #[test]
    fn max_ties_pick_lowest_index() {
        let mut g = Graph::new();
        let x = g.constant(vec1(&[3.0, 3.0, 1.0]));
        let (_, idx) = g.reduce(x, Reduce::Max, None).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().values(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_mean() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, -2.0, 3.0, 0.5]));
        let loss = g.mean(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().values(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
        assert!(matches!(g.backward(Var(99)), Err(TensorError::Detached(99))));
    }

    #[test]
    fn parents_precede_children() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z).unwrap();
        for v in [y, z, s] {
            let (_, parents) = g.node_info(v).unwrap();
            assert!(parents.iter().all(|&p| p < v.index()));
        }
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let x = g.param(vec1(&[1.0, 2.0]));
        let c = g.constant(vec1(&[5.0, 5.0]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().values(), &[5.0, 5.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(vec1(&[0.0]));
        assert!(matches!(
            g.map_unary(x, Unary::Ln),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn sum_over_power_of_two_equals_mean() {
        let mut g = Graph::new();
        let x = g.constant(vec1(&[0.1, 0.7, -3.3, 2.9, 1e-3, 5.5, -0.25, 9.0]));
        let s = g.sum(x).unwrap();
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(s).item().unwrap() / 8.0, g.value(m).item().unwrap());
    }

    #[test]
    fn conv_same_padding_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::build(vec![2, 8, 8, 3], 1.0).unwrap());
        let k = g.constant(Tensor::build(vec![3, 3, 3, 4], 0.1).unwrap());
        let y = g.conv2d(x, k, 2).unwrap();
        assert_eq!(g.value(y).dims(), &[2, 4, 4, 4]);
        let dk = g.constant(Tensor::build(vec![3, 3, 3], 1.0).unwrap());
        let y = g.depthwise_conv2d(x, dk, 1).unwrap();
        assert_eq!(g.value(y).dims(), &[2, 8, 8, 3]);
        // centre pixel sees all nine taps, corner sees four
        assert_eq!(g.value(y).values()[(8 + 1) * 3], 9.0);
        assert_eq!(g.value(y).values()[0], 4.0);
    }
}
