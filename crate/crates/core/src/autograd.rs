//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a tape of operation records in topological order; every op
//! checks operand shapes, verifies its output is finite, and knows how to push
//! gradients back to its inputs. The op set is exactly what the model needs:
//! dense layers, softmax attention, a shallow 2D convolution with pooling, a
//! fused cross-entropy, and the attention-weighted squared distance used by
//! the prototype regularizer.

use crate::error::{GrnError, Result};

/// Dense row-major tensor. A scalar has an empty shape and one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(GrnError::Shape {
                op: "tensor",
                details: format!("shape {:?} needs {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Scalar extraction; panics if the tensor is not single-element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    fn assert_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(GrnError::NonFinite(format!("output of {op}")))
        }
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// rhs is a rank-1 bias broadcast over the rows of a rank-2 lhs.
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    MeanPoolSpatial(NodeId),
    MeanAxis(NodeId, usize),
    Concat(Vec<NodeId>),
    Scale(NodeId, f64),
    Square(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    /// `out[b] = sum_m weights[b,m] * ||emb[b] - protos[m]||^2`
    WeightedSqDist {
        emb: NodeId,
        protos: NodeId,
        weights: NodeId,
    },
    CrossEntropyWithLogits {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations; node insertion order is a topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Gradient of the last `backward` call w.r.t. node `id`.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn shape_err(op: &'static str, details: String) -> GrnError {
        GrnError::Shape { op, details }
    }

    /// Elementwise add, or bias-add when rhs is rank-1 matching the columns of
    /// a rank-2 lhs. No other broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa == sb {
            let data: Vec<f64> = self.nodes[a]
                .value
                .data()
                .iter()
                .zip(self.nodes[b].value.data())
                .map(|(x, y)| x + y)
                .collect();
            let value = Tensor::new(sa.to_vec(), data)?;
            value.assert_finite("add")?;
            let req = self.requires(&[a, b]);
            Ok(self.push(value, Op::Add(a, b), req))
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let (rows, cols) = (sa[0], sa[1]);
            let mut data = self.nodes[a].value.data().to_vec();
            let bias = self.nodes[b].value.data();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += bias[c];
                }
            }
            let value = Tensor::new(vec![rows, cols], data)?;
            value.assert_finite("add")?;
            let req = self.requires(&[a, b]);
            Ok(self.push(value, Op::AddBias(a, b), req))
        } else {
            Err(Self::shape_err("add", format!("{sa:?} vs {sb:?}")))
        }
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Self::shape_err("sub", format!("{sa:?} vs {sb:?}")));
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        value.assert_finite("sub")?;
        let req = self.requires(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), req))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Self::shape_err("mul", format!("{sa:?} vs {sb:?}")));
        }
        let data: Vec<f64> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        value.assert_finite("mul")?;
        let req = self.requires(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), req))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::shape_err("matmul", format!("{sa:?} vs {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let da = self.nodes[a].value.data();
        let db = self.nodes[b].value.data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let av = da[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[l * m..(l + 1) * m];
                let orow = &mut data[i * m..(i + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        value.assert_finite("matmul")?;
        let req = self.requires(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), req))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a].value.shape();
        if sa.len() != 2 {
            return Err(Self::shape_err("transpose", format!("{sa:?}")));
        }
        let (n, m) = (sa[0], sa[1]);
        let da = self.nodes[a].value.data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = da[i * m + j];
            }
        }
        let value = Tensor::new(vec![m, n], data)?;
        let req = self.requires(&[a]);
        Ok(self.push(value, Op::Transpose(a), req))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        value.assert_finite("relu")?;
        let req = self.requires(&[a]);
        Ok(self.push(value, Op::Relu(a), req))
    }

    fn rows_cols_last_axis(shape: &[usize]) -> (usize, usize) {
        let cols = *shape.last().unwrap_or(&1);
        let rows = shape.iter().product::<usize>() / cols.max(1);
        (rows, cols)
    }

    /// Row-stable softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a].value.shape().to_vec();
        if shape.is_empty() {
            return Err(Self::shape_err("softmax", "scalar input".into()));
        }
        let (rows, cols) = Self::rows_cols_last_axis(&shape);
        let da = self.nodes[a].value.data();
        let mut data = vec![0.0; da.len()];
        for r in 0..rows {
            let row = &da[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                data[r * cols + i] = e;
                sum += e;
            }
            for v in &mut data[r * cols..(r + 1) * cols] {
                *v /= sum;
            }
        }
        let value = Tensor::new(shape, data)?;
        value.assert_finite("softmax")?;
        let req = self.requires(&[a]);
        Ok(self.push(value, Op::Softmax(a), req))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a].value.shape().to_vec();
        if shape.is_empty() {
            return Err(Self::shape_err("log_softmax", "scalar input".into()));
        }
        let (rows, cols) = Self::rows_cols_last_axis(&shape);
        let da = self.nodes[a].value.data();
        let mut data = vec![0.0; da.len()];
        for r in 0..rows {
            let row = &da[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for (i, &v) in row.iter().enumerate() {
                data[r * cols + i] = v - lse;
            }
        }
        let value = Tensor::new(shape, data)?;
        value.assert_finite("log_softmax")?;
        let req = self.requires(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), req))
    }

    /// 2D convolution, stride 1, no padding. Input `[n, ci, h, w]`, kernel
    /// `[co, ci, kh, kw]`, bias `[co]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let si = self.nodes[input].value.shape().to_vec();
        let sk = self.nodes[kernel].value.shape().to_vec();
        let sb = self.nodes[bias].value.shape().to_vec();
        if si.len() != 4 || sk.len() != 4 || sb.len() != 1 || si[1] != sk[1] || sb[0] != sk[0] {
            return Err(Self::shape_err(
                "conv2d",
                format!("input {si:?}, kernel {sk:?}, bias {sb:?}"),
            ));
        }
        let (n, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let (co, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if h < kh || w < kw {
            return Err(Self::shape_err(
                "conv2d",
                format!("spatial input {h}x{w} smaller than kernel {kh}x{kw}"),
            ));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let di = self.nodes[input].value.data();
        let dk = self.nodes[kernel].value.data();
        let dbias = self.nodes[bias].value.data();
        let mut data = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = dbias[o];
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    acc += di[((b * ci + c) * h + y + ky) * w + x + kx]
                                        * dk[((o * ci + c) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        data[((b * co + o) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, co, oh, ow], data)?;
        value.assert_finite("conv2d")?;
        let req = self.requires(&[input, kernel, bias]);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias }, req))
    }

    /// Global average over the two trailing spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn mean_pool_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a].value.shape().to_vec();
        if sa.len() != 4 {
            return Err(Self::shape_err("mean_pool_spatial", format!("{sa:?}")));
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let da = self.nodes[a].value.data();
        let mut data = vec![0.0; n * c];
        let inv = 1.0 / (h * w) as f64;
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                data[b * c + ch] = da[base..base + h * w].iter().sum::<f64>() * inv;
            }
        }
        let value = Tensor::new(vec![n, c], data)?;
        value.assert_finite("mean_pool_spatial")?;
        let req = self.requires(&[a]);
        Ok(self.push(value, Op::MeanPoolSpatial(a), req))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.nodes[a].value.shape().to_vec();
        if axis >= sa.len() {
            return Err(Self::shape_err(
                "mean_axis",
                format!("axis {axis} out of range for {sa:?}"),
            ));
        }
        let outer: usize = sa[..axis].iter().product();
        let len = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let da = self.nodes[a].value.data();
        let mut out_shape = sa.clone();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        let inv = 1.0 / len as f64;
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += da[base + i] * inv;
                }
            }
        }
        let value = Tensor::new(out_shape, data)?;
        value.assert_finite("mean_axis")?;
        let req = self.requires(&[a]);
        Ok(self.push(value, Op::MeanAxis(a, axis), req))
    }

    /// Concatenate rank-2 tensors along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat", "no inputs".into()));
        }
        let rows = self.nodes[parts[0]].value.shape()[0];
        let mut cols = 0;
        for &p in parts {
            let sp = self.nodes[p].value.shape();
            if sp.len() != 2 || sp[0] != rows {
                return Err(Self::shape_err(
                    "concat",
                    format!("expected rank-2 with {rows} rows, got {sp:?}"),
                ));
            }
            cols += sp[1];
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let sp = self.nodes[p].value.shape();
            let pc = sp[1];
            let dp = self.nodes[p].value.data();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&dp[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let req = self.requires(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), req))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        value.assert_finite("scale")?;
        let req = self.requires(&[a]);
        Ok(self.push(value, Op::Scale(a, factor), req))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a].value.data().iter().map(|v| v * v).collect();
        let value = Tensor::new(self.nodes[a].value.shape().to_vec(), data)?;
        value.assert_finite("square")?;
        let req = self.requires(&[a]);
        Ok(self.push(value, Op::Square(a), req))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a].value.data().iter().sum();
        let value = Tensor::scalar(s);
        value.assert_finite("sum")?;
        let req = self.requires(&[a]);
        Ok(self.push(value, Op::Sum(a), req))
    }

    /// View with a new shape; element count must match.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a].value.numel() {
            return Err(Self::shape_err(
                "reshape",
                format!(
                    "{:?} ({} elements) to {:?} ({} elements)",
                    self.nodes[a].value.shape(),
                    self.nodes[a].value.numel(),
                    shape,
                    numel
                ),
            ));
        }
        let value = Tensor::new(shape, self.nodes[a].value.data().to_vec())?;
        let req = self.requires(&[a]);
        Ok(self.push(value, Op::Reshape(a), req))
    }

    /// Attention-weighted squared distances between embeddings and prototypes:
    /// `out[b] = sum_m weights[b,m] * ||emb[b] - protos[m]||^2`.
    pub fn weighted_sqdist(
        &mut self,
        emb: NodeId,
        protos: NodeId,
        weights: NodeId,
    ) -> Result<NodeId> {
        let se = self.nodes[emb].value.shape().to_vec();
        let sp = self.nodes[protos].value.shape().to_vec();
        let sw = self.nodes[weights].value.shape().to_vec();
        if se.len() != 2
            || sp.len() != 2
            || sw.len() != 2
            || se[1] != sp[1]
            || sw[0] != se[0]
            || sw[1] != sp[0]
        {
            return Err(Self::shape_err(
                "weighted_sqdist",
                format!("emb {se:?}, protos {sp:?}, weights {sw:?}"),
            ));
        }
        let (n, d, m) = (se[0], se[1], sp[0]);
        let de = self.nodes[emb].value.data();
        let dp = self.nodes[protos].value.data();
        let dw = self.nodes[weights].value.data();
        let mut data = vec![0.0; n];
        for b in 0..n {
            let mut acc = 0.0;
            for mm in 0..m {
                let mut dist = 0.0;
                for j in 0..d {
                    let diff = de[b * d + j] - dp[mm * d + j];
                    dist += diff * diff;
                }
                acc += dw[b * m + mm] * dist;
            }
            data[b] = acc;
        }
        let value = Tensor::new(vec![n], data)?;
        value.assert_finite("weighted_sqdist")?;
        let req = self.requires(&[emb, protos, weights]);
        Ok(self.push(value, Op::WeightedSqDist { emb, protos, weights }, req))
    }

    /// Mean cross-entropy between logits `[n, L]` and integer labels, fused
    /// with the log-softmax for stability.
    pub fn cross_entropy_with_logits(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sl = self.nodes[logits].value.shape().to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Self::shape_err(
                "cross_entropy_with_logits",
                format!("logits {sl:?} vs {} labels", labels.len()),
            ));
        }
        let (n, l) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&lab| lab >= l) {
            return Err(GrnError::Invalid(format!(
                "label {bad} out of range for {l} classes"
            )));
        }
        let dl = self.nodes[logits].value.data();
        let mut total = 0.0;
        for (i, &lab) in labels.iter().enumerate() {
            let row = &dl[i * l..(i + 1) * l];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[lab];
        }
        let value = Tensor::scalar(total / n as f64);
        value.assert_finite("cross_entropy_with_logits")?;
        let req = self.requires(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropyWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            req,
        ))
    }

    /// Reverse accumulation from a scalar loss; populates gradients for every
    /// node that requires them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(GrnError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss].grad[0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                    self.nodes[id].grad = g;
                }
                Op::AddBias(a, b) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    self.accumulate(a, &g);
                    let cols = self.nodes[b].value.numel();
                    let rows = g.len() / cols;
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] += g[r * cols + c];
                        }
                    }
                    self.accumulate(b, &gb);
                    self.nodes[id].grad = g;
                }
                Op::Sub(a, b) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    self.accumulate(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                    self.nodes[id].grad = g;
                }
                Op::Mul(a, b) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                    self.nodes[id].grad = g;
                }
                Op::MatMul(a, b) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let (n, k) = {
                        let sa = self.nodes[a].value.shape();
                        (sa[0], sa[1])
                    };
                    let m = self.nodes[b].value.shape()[1];
                    let da = self.nodes[a].value.data().to_vec();
                    let db = self.nodes[b].value.data().to_vec();
                    // ga = g . b^T
                    let mut ga = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gv = g[i * m + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                ga[i * k + l] += gv * db[l * m + j];
                            }
                        }
                    }
                    // gb = a^T . g
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        for l in 0..k {
                            let av = da[i * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                gb[l * m + j] += av * g[i * m + j];
                            }
                        }
                    }
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                    self.nodes[id].grad = g;
                }
                Op::Transpose(a) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let (m, n) = {
                        let s = self.nodes[id].value.shape();
                        (s[0], s[1])
                    };
                    let mut ga = vec![0.0; n * m];
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] = g[i * n + j];
                        }
                    }
                    self.accumulate(a, &ga);
                    self.nodes[id].grad = g;
                }
                Op::Relu(a) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(gv, av)| if *av > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(a, &ga);
                    self.nodes[id].grad = g;
                }
                Op::Softmax(a) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let shape = self.nodes[id].value.shape().to_vec();
                    let (rows, cols) = Self::rows_cols_last_axis(&shape);
                    let y = self.nodes[id].value.data().to_vec();
                    let mut ga = vec![0.0; g.len()];
                    for r in 0..rows {
                        let dot: f64 = (0..cols).map(|c| g[r * cols + c] * y[r * cols + c]).sum();
                        for c in 0..cols {
                            ga[r * cols + c] = y[r * cols + c] * (g[r * cols + c] - dot);
                        }
                    }
                    self.accumulate(a, &ga);
                    self.nodes[id].grad = g;
                }
                Op::LogSoftmax(a) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let shape = self.nodes[id].value.shape().to_vec();
                    let (rows, cols) = Self::rows_cols_last_axis(&shape);
                    let y = self.nodes[id].value.data().to_vec();
                    let mut ga = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gsum: f64 = (0..cols).map(|c| g[r * cols + c]).sum();
                        for c in 0..cols {
                            let p = y[r * cols + c].exp();
                            ga[r * cols + c] = g[r * cols + c] - p * gsum;
                        }
                    }
                    self.accumulate(a, &ga);
                    self.nodes[id].grad = g;
                }
                Op::Conv2d { input, kernel, bias } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let si = self.nodes[input].value.shape().to_vec();
                    let sk = self.nodes[kernel].value.shape().to_vec();
                    let (n, ci, h, w) = (si[0], si[1], si[2], si[3]);
                    let (co, _, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let di = self.nodes[input].value.data().to_vec();
                    let dk = self.nodes[kernel].value.data().to_vec();
                    let mut gi = vec![0.0; di.len()];
                    let mut gk = vec![0.0; dk.len()];
                    let mut gb = vec![0.0; co];
                    for b in 0..n {
                        for o in 0..co {
                            for y in 0..oh {
                                for x in 0..ow {
                                    let gv = g[((b * co + o) * oh + y) * ow + x];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    gb[o] += gv;
                                    for c in 0..ci {
                                        for ky in 0..kh {
                                            for kx in 0..kw {
                                                let ii = ((b * ci + c) * h + y + ky) * w + x + kx;
                                                let ki = ((o * ci + c) * kh + ky) * kw + kx;
                                                gi[ii] += gv * dk[ki];
                                                gk[ki] += gv * di[ii];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(input, &gi);
                    self.accumulate(kernel, &gk);
                    self.accumulate(bias, &gb);
                    self.nodes[id].grad = g;
                }
                Op::MeanPoolSpatial(a) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let sa = self.nodes[a].value.shape().to_vec();
                    let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
                    let inv = 1.0 / (h * w) as f64;
                    let mut ga = vec![0.0; n * c * h * w];
                    for b in 0..n {
                        for ch in 0..c {
                            let gv = g[b * c + ch] * inv;
                            let base = (b * c + ch) * h * w;
                            for v in &mut ga[base..base + h * w] {
                                *v = gv;
                            }
                        }
                    }
                    self.accumulate(a, &ga);
                    self.nodes[id].grad = g;
                }
                Op::MeanAxis(a, axis) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let sa = self.nodes[a].value.shape().to_vec();
                    let outer: usize = sa[..axis].iter().product();
                    let len = sa[axis];
                    let inner: usize = sa[axis + 1..].iter().product();
                    let inv = 1.0 / len as f64;
                    let mut ga = vec![0.0; self.nodes[a].value.numel()];
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                ga[base + i] = g[o * inner + i] * inv;
                            }
                        }
                    }
                    self.accumulate(a, &ga);
                    self.nodes[id].grad = g;
                }
                Op::Concat(parts) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let rows = self.nodes[id].value.shape()[0];
                    let cols = self.nodes[id].value.shape()[1];
                    let mut offset = 0;
                    for &p in &parts {
                        let pc = self.nodes[p].value.shape()[1];
                        let mut gp = vec![0.0; rows * pc];
                        for r in 0..rows {
                            gp[r * pc..(r + 1) * pc]
                                .copy_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                        }
                        self.accumulate(p, &gp);
                        offset += pc;
                    }
                    self.nodes[id].grad = g;
                }
                Op::Scale(a, factor) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let ga: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    self.accumulate(a, &ga);
                    self.nodes[id].grad = g;
                }
                Op::Square(a) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(gv, av)| 2.0 * av * gv)
                        .collect();
                    self.accumulate(a, &ga);
                    self.nodes[id].grad = g;
                }
                Op::Sum(a) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let ga = vec![g[0]; self.nodes[a].value.numel()];
                    self.accumulate(a, &ga);
                    self.nodes[id].grad = g;
                }
                Op::Reshape(a) => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    self.accumulate(a, &g);
                    self.nodes[id].grad = g;
                }
                Op::WeightedSqDist { emb, protos, weights } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let (n, d) = {
                        let s = self.nodes[emb].value.shape();
                        (s[0], s[1])
                    };
                    let m = self.nodes[protos].value.shape()[0];
                    let de = self.nodes[emb].value.data().to_vec();
                    let dp = self.nodes[protos].value.data().to_vec();
                    let dw = self.nodes[weights].value.data().to_vec();
                    let mut ge = vec![0.0; n * d];
                    let mut gp = vec![0.0; m * d];
                    let mut gw = vec![0.0; n * m];
                    for b in 0..n {
                        let gv = g[b];
                        for mm in 0..m {
                            let wv = dw[b * m + mm];
                            let mut dist = 0.0;
                            for j in 0..d {
                                let diff = de[b * d + j] - dp[mm * d + j];
                                dist += diff * diff;
                                ge[b * d + j] += gv * wv * 2.0 * diff;
                                gp[mm * d + j] -= gv * wv * 2.0 * diff;
                            }
                            gw[b * m + mm] += gv * dist;
                        }
                    }
                    self.accumulate(emb, &ge);
                    self.accumulate(protos, &gp);
                    self.accumulate(weights, &gw);
                    self.nodes[id].grad = g;
                }
                Op::CrossEntropyWithLogits { logits, labels } => {
                    let g = std::mem::take(&mut self.nodes[id].grad);
                    let gv = g[0];
                    let (n, l) = {
                        let s = self.nodes[logits].value.shape();
                        (s[0], s[1])
                    };
                    let dl = self.nodes[logits].value.data().to_vec();
                    let mut gl = vec![0.0; n * l];
                    let inv = gv / n as f64;
                    for (i, &lab) in labels.iter().enumerate() {
                        let row = &dl[i * l..(i + 1) * l];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for c in 0..l {
                            let p = (row[c] - mx).exp() / sum;
                            gl[i * l + c] = (p - if c == lab { 1.0 } else { 0.0 }) * inv;
                        }
                    }
                    self.accumulate(logits, &gl);
                    self.nodes[id].grad = g;
                }
            }
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && !node.grad.iter().all(|v| v.is_finite()) {
                return Err(GrnError::NonFinite(format!("gradient of node {id}")));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        for (dst, src) in self.nodes[id].grad.iter_mut().zip(g) {
            *dst += src;
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Adam hyperparameters; weight decay is decoupled (applied straight to the
/// weights, not folded into the gradient).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One Adam update with bias correction and decoupled weight decay.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..param.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        param[i] -= cfg.lr * cfg.weight_decay * param[i];
    }
}
