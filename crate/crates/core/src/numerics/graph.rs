//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly as it is recorded, so building a graph
//! from a set of input bindings *is* the forward pass. Nodes are appended in
//! evaluation order, which makes the node list a valid topological order for
//! the backward sweep.
//!
//! Layout conventions: feature maps are `[H, W, C]`, matrices are
//! `[rows, cols]`, conv kernels are `[k, k, C_in, C_out]`.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Lower bound applied to the argument of [`Graph::neg_log`].
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inclusive rectangular window on an `[H, W, C]` map, `y` indexing rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolWindow {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl PoolWindow {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0 + 1) * (self.x1 - self.x0 + 1)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulChannels(NodeId, NodeId),
    Scale(NodeId, f64),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    },
    Conv1x1(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    GlobalAvgPool(NodeId),
    RegionAvgPool(NodeId, Vec<PoolWindow>),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    NegLog(NodeId),
    Sum(NodeId),
    Pick(NodeId, Vec<usize>),
    SliceRows(NodeId, usize),
    Reshape(NodeId),
    SquaredDistances(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulChannels(..) => "mul_channels",
            Op::Scale(..) => "scale",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv1x1(..) => "conv1x1",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::RegionAvgPool(..) => "region_avg_pool",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::NegLog(..) => "neg_log",
            Op::Sum(..) => "sum",
            Op::Pick(..) => "pick",
            Op::SliceRows(..) => "slice_rows",
            Op::Reshape(..) => "reshape",
            Op::SquaredDistances(..) => "squared_distances",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node`; zeros when the node is
    /// not reachable from the loss.
    pub fn get(&self, node: NodeId) -> Tensor {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    pub fn take(&mut self, node: NodeId) -> Tensor {
        self.grads[node.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[node.0]))
    }
}

/// Recorded computation; see the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        self.nodes[node.0].value.shape()
    }

    /// Binds a tensor that gradients should be tracked for.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Binds a constant input.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, false)
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(op, value, requires_grad)
    }

    fn parents(&self, op: &Op) -> Vec<NodeId> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulChannels(a, b)
            | Op::Conv1x1(a, b)
            | Op::SquaredDistances(a, b) => vec![a, b],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![input, weight];
                v.extend(bias);
                v
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::GlobalAvgPool(a)
            | Op::RegionAvgPool(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::NegLog(a)
            | Op::Sum(a)
            | Op::Pick(a, _)
            | Op::SliceRows(a, _)
            | Op::Reshape(a) => vec![a],
        }
    }

    fn shape_err(&self, op: &'static str, expected: String, actual: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            expected,
            actual,
        }
    }

    fn rows_cols(&self, op: &'static str, node: NodeId) -> Result<(usize, usize)> {
        match *self.shape(node) {
            [n] => Ok((1, n)),
            [r, c] => Ok((r, c)),
            ref s => Err(self.shape_err(op, "rank 1 or 2".into(), dims(s))),
        }
    }

    fn map3(&self, op: &'static str, node: NodeId) -> Result<(usize, usize, usize)> {
        match *self.shape(node) {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(self.shape_err(op, "[H, W, C]".into(), dims(s))),
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(op, dims(self.shape(a)), dims(self.shape(b))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = match *self.shape(a) {
            [m, k] => (m, k),
            ref s => return Err(self.shape_err("matmul", "[m, k]".into(), dims(s))),
        };
        let n = match *self.shape(b) {
            [kk, n] if kk == k => n,
            ref s => return Err(self.shape_err("matmul", format!("[{k}, n]"), dims(s))),
        };
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(Op::Mul(a, b), v))
    }

    /// `[m, n] + [n]`, broadcasting the vector over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.rows_cols("add_row", a)?;
        if self.shape(row) != [n] {
            return Err(self.shape_err("add_row", format!("[{n}]"), dims(self.shape(row))));
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).data();
        for i in 0..m {
            for (x, y) in v.data_mut()[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += y;
            }
        }
        Ok(self.push(Op::AddRow(a, row), v))
    }

    /// `[H, W, C] * [H, W]`, broadcasting the map over channels.
    pub fn mul_channels(&mut self, map: NodeId, mask: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.map3("mul_channels", map)?;
        if self.shape(mask) != [h, w] {
            return Err(self.shape_err("mul_channels", format!("[{h}, {w}]"), dims(self.shape(mask))));
        }
        let mut v = self.value(map).clone();
        let m = self.value(mask).data();
        for (p, &scale) in m.iter().enumerate() {
            for x in &mut v.data_mut()[p * c..(p + 1) * c] {
                *x *= scale;
            }
        }
        Ok(self.push(Op::MulChannels(map, mask), v))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        v.scale_assign(factor);
        Ok(self.push(Op::Scale(a, factor), v))
    }

    /// Same-padded 2-D convolution with an odd square kernel.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    ) -> Result<NodeId> {
        let (h, w, cin) = self.map3("conv2d", input)?;
        let (k, cout) = match *self.shape(weight) {
            [k1, k2, ci, co] if k1 == k2 && k1 % 2 == 1 && ci == cin => (k1, co),
            ref s => {
                return Err(self.shape_err("conv2d", format!("[k, k, {cin}, C_out] with k odd"), dims(s)))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(self.shape_err("conv2d", format!("bias [{cout}]"), dims(self.shape(b))));
            }
        }
        if stride == 0 {
            return Err(self.shape_err("conv2d", "stride >= 1".into(), "0".into()));
        }
        let geom = ConvGeom::new(h, w, cin, cout, k, stride);
        let out = geom.forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            },
            Tensor::new(vec![geom.oh, geom.ow, cout], out)?,
        ))
    }

    /// Per-pixel linear map `[H, W, C] x [C, D] -> [H, W, D]`.
    pub fn conv1x1(&mut self, input: NodeId, weight: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.map3("conv1x1", input)?;
        let d = match *self.shape(weight) {
            [cc, d] if cc == c => d,
            ref s => return Err(self.shape_err("conv1x1", format!("[{c}, D]"), dims(s))),
        };
        let out = matmul_raw(self.value(input).data(), self.value(weight).data(), h * w, c, d);
        Ok(self.push(Op::Conv1x1(input, weight), Tensor::new(vec![h, w, d], out)?))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            if *x <= 0.0 {
                *x = 0.0;
            }
        }
        Ok(self.push(Op::Relu(a), v))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = sigmoid(*x);
        }
        Ok(self.push(Op::Sigmoid(a), v))
    }

    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.map3("global_avg_pool", a)?;
        let mut out = vec![0.0; c];
        for px in self.value(a).data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        let inv = 1.0 / (h * w) as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Op::GlobalAvgPool(a), Tensor::vector(out)))
    }

    /// Mean over each window, producing one row per window: `[V, C]`.
    pub fn region_avg_pool(&mut self, a: NodeId, windows: Vec<PoolWindow>) -> Result<NodeId> {
        let (h, w, c) = self.map3("region_avg_pool", a)?;
        if let Some(bad) = windows
            .iter()
            .find(|r| r.y0 > r.y1 || r.x0 > r.x1 || r.y1 >= h || r.x1 >= w)
        {
            return Err(self.shape_err("region_avg_pool", format!("window inside {h}x{w}"), format!("{bad:?}")));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; windows.len() * c];
        for (row, win) in out.chunks_exact_mut(c).zip(&windows) {
            for y in win.y0..=win.y1 {
                for x in win.x0..=win.x1 {
                    let px = &src[(y * w + x) * c..(y * w + x + 1) * c];
                    for (o, v) in row.iter_mut().zip(px) {
                        *o += v;
                    }
                }
            }
            let inv = 1.0 / win.area() as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        let v = windows.len();
        Ok(self.push(Op::RegionAvgPool(a, windows), Tensor::new(vec![v, c], out)?))
    }

    /// Softmax along the last axis of a vector or matrix.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, n) = self.rows_cols("softmax", a)?;
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_exact_mut(n) {
            let s = super::tensor::softmax(row);
            row.copy_from_slice(&s);
        }
        Ok(self.push(Op::Softmax(a), v))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, n) = self.rows_cols("log_softmax", a)?;
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.push(Op::LogSoftmax(a), v))
    }

    /// `-ln(max(x, LOG_CLAMP))` elementwise; NaN propagates.
    pub fn neg_log(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            if !x.is_nan() {
                *x = -x.max(LOG_CLAMP).ln();
            }
        }
        Ok(self.push(Op::NegLog(a), v))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        Ok(self.push(Op::Sum(a), Tensor::scalar(s)))
    }

    /// Selects `x[i, indices[i]]` per row, giving a vector of length `rows`.
    pub fn pick(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let (m, n) = self.rows_cols("pick", a)?;
        if indices.len() != m || indices.iter().any(|&i| i >= n) {
            return Err(self.shape_err("pick", format!("{m} indices below {n}"), format!("{indices:?}")));
        }
        let src = self.value(a).data();
        let out = indices.iter().enumerate().map(|(r, &i)| src[r * n + i]).collect();
        Ok(self.push(Op::Pick(a, indices), Tensor::vector(out)))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(self.shape_err("slice_rows", format!("rows {start}..{}", start + len), dims(&shape)));
        }
        let stride: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * stride..(start + len) * stride].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        Ok(self.push(Op::SliceRows(a, start), Tensor::new(out_shape, data)?))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape).map_err(|_| {
            self.shape_err("reshape", dims(shape), dims(self.shape(a)))
        })?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// Pairwise squared Euclidean distances `[V, L] x [C, L] -> [V, C]`.
    pub fn squared_distances(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, l) = match *self.shape(a) {
            [v, l] => (v, l),
            ref s => return Err(self.shape_err("squared_distances", "[V, L]".into(), dims(s))),
        };
        let c = match *self.shape(b) {
            [c, ll] if ll == l => c,
            ref s => return Err(self.shape_err("squared_distances", format!("[C, {l}]"), dims(s))),
        };
        let (x, p) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; v * c];
        for i in 0..v {
            let xi = &x[i * l..(i + 1) * l];
            for j in 0..c {
                let pj = &p[j * l..(j + 1) * l];
                out[i * c + j] = xi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        Ok(self.push(Op::SquaredDistances(a, b), Tensor::new(vec![v, c], out)?))
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                node: loss.0,
                op: "backward",
                expected: "scalar loss".into(),
                actual: dims(self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn wants(&self, node: NodeId) -> bool {
        self.nodes[node.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        let mut acc = |target: NodeId, delta: Tensor| match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    // dA = dC * B^T
                    let bd = self.value(b).data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bd[p * n..(p + 1) * n];
                            da[i * k + p] = gi.iter().zip(br).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.wants(b) {
                    acc(b, Tensor::new(vec![k, n], matmul_at_b(self.value(a).data(), gd, m, k, n)).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    acc(a, g.clone());
                }
                if self.wants(b) {
                    acc(b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    acc(a, g.clone());
                }
                if self.wants(b) {
                    let mut n = g.clone();
                    n.scale_assign(-1.0);
                    acc(b, n);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().zip(self.value(b).data()).for_each(|(x, y)| *x *= y);
                    acc(a, d);
                }
                if self.wants(b) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().zip(self.value(a).data()).for_each(|(x, y)| *x *= y);
                    acc(b, d);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(a) {
                    acc(a, g.clone());
                }
                if self.wants(row) {
                    let n = self.shape(row)[0];
                    let mut d = vec![0.0; n];
                    for r in gd.chunks_exact(n) {
                        d.iter_mut().zip(r).for_each(|(x, y)| *x += y);
                    }
                    acc(row, Tensor::vector(d));
                }
            }
            Op::MulChannels(map, mask) => {
                let c = self.shape(map)[2];
                let m = self.value(mask).data();
                if self.wants(map) {
                    let mut d = g.clone();
                    for (p, &s) in m.iter().enumerate() {
                        d.data_mut()[p * c..(p + 1) * c].iter_mut().for_each(|x| *x *= s);
                    }
                    acc(map, d);
                }
                if self.wants(mask) {
                    let f = self.value(map).data();
                    let d: Vec<f64> = (0..m.len())
                        .map(|p| {
                            gd[p * c..(p + 1) * c]
                                .iter()
                                .zip(&f[p * c..(p + 1) * c])
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    acc(mask, Tensor::new(self.shape(mask).to_vec(), d).unwrap());
                }
            }
            Op::Scale(a, factor) => {
                let mut d = g.clone();
                d.scale_assign(factor);
                acc(a, d);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
            } => {
                let (h, w, cin) = (self.shape(input)[0], self.shape(input)[1], self.shape(input)[2]);
                let (k, cout) = (self.shape(weight)[0], self.shape(weight)[3]);
                let geom = ConvGeom::new(h, w, cin, cout, k, stride);
                let want_in = self.wants(input);
                let (gin, gw) = geom.backward(
                    self.value(input).data(),
                    self.value(weight).data(),
                    gd,
                    want_in,
                );
                if let Some(gin) = gin {
                    acc(input, Tensor::new(self.shape(input).to_vec(), gin).unwrap());
                }
                if self.wants(weight) {
                    acc(weight, Tensor::new(self.shape(weight).to_vec(), gw).unwrap());
                }
                if let Some(b) = bias {
                    if self.wants(b) {
                        let mut d = vec![0.0; cout];
                        for px in gd.chunks_exact(cout) {
                            d.iter_mut().zip(px).for_each(|(x, y)| *x += y);
                        }
                        acc(b, Tensor::vector(d));
                    }
                }
            }
            Op::Conv1x1(input, weight) => {
                let (h, w, c) = (self.shape(input)[0], self.shape(input)[1], self.shape(input)[2]);
                let d = self.shape(weight)[1];
                let wd = self.value(weight).data();
                if self.wants(input) {
                    let mut gi = vec![0.0; h * w * c];
                    for p in 0..h * w {
                        let gp = &gd[p * d..(p + 1) * d];
                        for ch in 0..c {
                            gi[p * c + ch] = gp.iter().zip(&wd[ch * d..(ch + 1) * d]).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(input, Tensor::new(vec![h, w, c], gi).unwrap());
                }
                if self.wants(weight) {
                    acc(weight, Tensor::new(vec![c, d], matmul_at_b(self.value(input).data(), gd, h * w, c, d)).unwrap());
                }
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                d.data_mut().iter_mut().zip(out.data()).for_each(|(x, &y)| {
                    if y <= 0.0 {
                        *x = 0.0
                    }
                });
                acc(a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                d.data_mut().iter_mut().zip(out.data()).for_each(|(x, &s)| *x *= s * (1.0 - s));
                acc(a, d);
            }
            Op::GlobalAvgPool(a) => {
                let (h, w, c) = (self.shape(a)[0], self.shape(a)[1], self.shape(a)[2]);
                let inv = 1.0 / (h * w) as f64;
                let row: Vec<f64> = gd.iter().map(|x| x * inv).collect();
                let mut d = Vec::with_capacity(h * w * c);
                for _ in 0..h * w {
                    d.extend_from_slice(&row);
                }
                acc(a, Tensor::new(vec![h, w, c], d).unwrap());
            }
            Op::RegionAvgPool(a, ref windows) => {
                let (w, c) = (self.shape(a)[1], self.shape(a)[2]);
                let mut d = Tensor::zeros(self.shape(a));
                let dd = d.data_mut();
                for (grow, win) in gd.chunks_exact(c).zip(windows) {
                    let inv = 1.0 / win.area() as f64;
                    for y in win.y0..=win.y1 {
                        for x in win.x0..=win.x1 {
                            let px = &mut dd[(y * w + x) * c..(y * w + x + 1) * c];
                            px.iter_mut().zip(grow).for_each(|(o, gv)| *o += gv * inv);
                        }
                    }
                }
                acc(a, d);
            }
            Op::Softmax(a) => {
                let n = *out.shape().last().unwrap();
                let mut d = g.clone();
                for (drow, srow) in d.data_mut().chunks_exact_mut(n).zip(out.data().chunks_exact(n)) {
                    let dot: f64 = drow.iter().zip(srow).map(|(x, y)| x * y).sum();
                    drow.iter_mut().zip(srow).for_each(|(x, s)| *x = s * (*x - dot));
                }
                acc(a, d);
            }
            Op::LogSoftmax(a) => {
                let n = *out.shape().last().unwrap();
                let mut d = g.clone();
                for (drow, lrow) in d.data_mut().chunks_exact_mut(n).zip(out.data().chunks_exact(n)) {
                    let total: f64 = drow.iter().sum();
                    drow.iter_mut().zip(lrow).for_each(|(x, l)| *x -= l.exp() * total);
                }
                acc(a, d);
            }
            Op::NegLog(a) => {
                let mut d = g.clone();
                d.data_mut().iter_mut().zip(self.value(a).data()).for_each(|(x, &v)| {
                    *x = if v > LOG_CLAMP { -*x / v } else { 0.0 };
                });
                acc(a, d);
            }
            Op::Sum(a) => acc(a, Tensor::full(self.shape(a), gd[0])),
            Op::Pick(a, ref indices) => {
                let n = *self.shape(a).last().unwrap();
                let mut d = Tensor::zeros(self.shape(a));
                for (r, (&i, &gv)) in indices.iter().zip(gd).enumerate() {
                    d.data_mut()[r * n + i] += gv;
                }
                acc(a, d);
            }
            Op::SliceRows(a, start) => {
                let mut d = Tensor::zeros(self.shape(a));
                let stride: usize = self.shape(a)[1..].iter().product();
                d.data_mut()[start * stride..start * stride + gd.len()].copy_from_slice(gd);
                acc(a, d);
            }
            Op::Reshape(a) => acc(a, g.clone().reshape(self.shape(a)).unwrap()),
            Op::SquaredDistances(a, b) => {
                let (v, l) = (self.shape(a)[0], self.shape(a)[1]);
                let c = self.shape(b)[0];
                let (x, p) = (self.value(a).data(), self.value(b).data());
                let mut da = vec![0.0; v * l];
                let mut db = vec![0.0; c * l];
                for i in 0..v {
                    for j in 0..c {
                        let gij = 2.0 * gd[i * c + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..l {
                            let diff = gij * (x[i * l + t] - p[j * l + t]);
                            da[i * l + t] += diff;
                            db[j * l + t] -= diff;
                        }
                    }
                }
                if self.wants(a) {
                    acc(a, Tensor::new(vec![v, l], da).unwrap());
                }
                if self.wants(b) {
                    acc(b, Tensor::new(vec![c, l], db).unwrap());
                }
            }
        }
    }

    /// Name of the operation that produced `node`, for diagnostics.
    pub fn op_name(&self, node: NodeId) -> &'static str {
        self.nodes[node.0].op.name()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `A^T * G` for `A: [m, k]`, `G: [m, n]`.
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(h: usize, w: usize, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let pad = (k - 1) / 2;
        ConvGeom {
            h,
            w,
            cin,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        }
    }

    /// Input pixel feeding output `(o, tap)`, if inside the map.
    #[inline]
    fn src(&self, o: usize, tap: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + tap).checked_sub(self.pad)?;
        (i < extent).then_some(i)
    }

    fn forward(&self, x: &[f64], wt: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (cin, cout) = (self.cin, self.cout);
        let mut out = vec![0.0; self.oh * self.ow * cout];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let o = &mut out[(oy * self.ow + ox) * cout..(oy * self.ow + ox + 1) * cout];
                if let Some(b) = bias {
                    o.copy_from_slice(b);
                }
                for ky in 0..self.k {
                    let Some(iy) = self.src(oy, ky, self.h) else { continue };
                    for kx in 0..self.k {
                        let Some(ix) = self.src(ox, kx, self.w) else { continue };
                        let inp = &x[(iy * self.w + ix) * cin..(iy * self.w + ix + 1) * cin];
                        let base = (ky * self.k + kx) * cin * cout;
                        for (c, &v) in inp.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let wrow = &wt[base + c * cout..base + (c + 1) * cout];
                            for (acc, wv) in o.iter_mut().zip(wrow) {
                                *acc += v * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, x: &[f64], wt: &[f64], g: &[f64], want_input: bool) -> (Option<Vec<f64>>, Vec<f64>) {
        let (cin, cout) = (self.cin, self.cout);
        let mut gw = vec![0.0; wt.len()];
        let mut gin = want_input.then(|| vec![0.0; x.len()]);
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let go = &g[(oy * self.ow + ox) * cout..(oy * self.ow + ox + 1) * cout];
                if go.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..self.k {
                    let Some(iy) = self.src(oy, ky, self.h) else { continue };
                    for kx in 0..self.k {
                        let Some(ix) = self.src(ox, kx, self.w) else { continue };
                        let pix = (iy * self.w + ix) * cin;
                        let base = (ky * self.k + kx) * cin * cout;
                        for c in 0..cin {
                            let v = x[pix + c];
                            let wrow = &wt[base + c * cout..base + (c + 1) * cout];
                            if let Some(gi) = gin.as_mut() {
                                gi[pix + c] += wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if v != 0.0 {
                                let gwrow = &mut gw[base + c * cout..base + (c + 1) * cout];
                                for (acc, gv) in gwrow.iter_mut().zip(go) {
                                    *acc += v * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        (gin, gw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_zeros_is_half() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gap_of_small_map() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 5.0]).unwrap());
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.75]);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[0.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        let p = g.pick(s, vec![0]).unwrap();
        let nl = g.neg_log(p).unwrap();
        let l = g.sum(nl).unwrap();
        let grad = g.backward(l).unwrap().get(x);
        assert!(close(grad.data(), &[-0.5, 0.5], 1e-15));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::vector(vec![5.0]));
        let l = g.sum(x).unwrap();
        assert_eq!(g.backward(l).unwrap().get(unused).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_fault_names_node() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[4, 1]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("node 2") && err.contains("matmul") && err.contains("[4, 1]"), "{err}");
    }

    #[test]
    fn conv_output_shape_and_same_padding() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[5, 5, 1], 1.0));
        let w = g.input(Tensor::full(&[3, 3, 1, 1], 1.0));
        let y = g.conv2d(x, w, None, 1).unwrap();
        assert_eq!(g.shape(y), &[5, 5, 1]);
        // corner sees 4 cells, edge 6, interior 9
        assert_eq!(g.value(y).get(&[0, 0, 0]).unwrap(), 4.0);
        assert_eq!(g.value(y).get(&[0, 2, 0]).unwrap(), 6.0);
        assert_eq!(g.value(y).get(&[2, 2, 0]).unwrap(), 9.0);
        let y2 = g.conv2d(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y2), &[3, 3, 1]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (h, w, cin, cout, k, stride) = (6, 5, 2, 3, 3, 2);
        let x = Tensor::from_fn(&[h, w, cin], |i| ((i * 7) % 11) as f64 - 5.0);
        let wt = Tensor::from_fn(&[k, k, cin, cout], |i| ((i * 5) % 13) as f64 * 0.1 - 0.6);
        let b = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let mut g = Graph::new();
        let (xi, wi, bi) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
        let y = g.conv2d(xi, wi, Some(bi), stride).unwrap();
        let pad = 1isize;
        let (oh, ow) = (3, 3);
        assert_eq!(g.shape(y), &[oh, ow, cout]);
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..cout {
                    let mut s = b.data()[o];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad;
                            let ix = (ox * stride + kx) as isize - pad;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                s += x.get(&[iy as usize, ix as usize, c]).unwrap()
                                    * wt.get(&[ky, kx, c, o]).unwrap();
                            }
                        }
                    }
                    assert!((g.value(y).get(&[oy, ox, o]).unwrap() - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn region_pool_mean() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[4, 4, 1], |i| (i + 1) as f64));
        let p = g
            .region_avg_pool(x, vec![PoolWindow { y0: 0, x0: 0, y1: 2, x1: 2 }])
            .unwrap();
        assert_eq!(g.value(p).data(), &[6.0]);
    }

    #[test]
    fn forward_is_bit_identical_on_repeat() {
        let build = || {
            let mut g = Graph::new();
            let x = g.input(Tensor::from_fn(&[4, 4, 2], |i| (i as f64).sin()));
            let w = g.param(Tensor::from_fn(&[3, 3, 2, 3], |i| (i as f64 * 0.3).cos()));
            let y = g.conv2d(x, w, None, 1).unwrap();
            let r = g.relu(y).unwrap();
            let p = g.global_avg_pool(r).unwrap();
            let s = g.softmax(p).unwrap();
            g.value(s).clone()
        };
        assert_eq!(build().data(), build().data());
    }
}
