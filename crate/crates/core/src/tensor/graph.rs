use super::{ParamId, ParamStore, Precision, Tensor};
use crate::error::{Error, Result};
use crate::tensor::store::Grads;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SegmentMax { x: Var, argmax: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Nodes are appended in evaluation order, so every
/// node's inputs precede it and a reverse sweep is a valid topological
/// order for backpropagation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    precision: Precision,
    bound: Vec<Option<Var>>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

// out[m×n] = a[m×k] · b[k×n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            precision,
            ..Self::default()
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, mut data: Vec<f64>, kind: Op) -> Result<Var> {
        self.precision.round_slice(&mut data);
        check_finite(op, &data)?;
        let requires_grad = match &kind {
            Op::Leaf => false,
            other => inputs(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value: Tensor::new(shape, data)?,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Result<Var> {
        self.precision.round_slice(t.data_mut());
        check_finite("leaf", t.data())?;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Binds a stored parameter, reusing the same node on repeated calls.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let i = id.index();
        if self.bound.len() <= i {
            self.bound.resize(i + 1, None);
        }
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let v = self.leaf(store.get(id).clone(), store.is_trainable(id))?;
        self.bound[i] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.value(x))?;
        let d = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], out, Op::Transpose(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, kind: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, kind)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[m×n] + bias[n]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = matrix_dims("add_row", self.value(x))?;
        if self.value(bias).len() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("add_row", shape, out, Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, c))
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| matrix_dims("concat", self.value(*p)))
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        for (p, &(r, c)) in parts.iter().zip(&dims) {
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => return Err(Error::arg(format!("concat axis {axis} not supported"))),
            };
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(*p).to_vec(),
                });
            }
        }
        let (shape, out) = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * c0);
            for p in parts {
                out.extend_from_slice(self.value(*p).data());
            }
            (vec![rows, c0], out)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for p in parts {
                    out.extend_from_slice(self.value(*p).row(i));
                }
            }
            (vec![r0, cols], out)
        };
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix_dims("slice_rows", self.value(x))?;
        if len == 0 || start + len > m {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                bound: m,
            });
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.push("slice_rows", vec![len, n], out, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix_dims("slice_cols", self.value(x))?;
        if len == 0 || start + len > n {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        self.push("slice_cols", vec![m, len], out, Op::SliceCols { x, start })
    }

    /// Selects rows by index; the same row may appear more than once.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.gather("gather_rows", x, idx)
    }

    /// Embedding lookup: one table row per token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather("embedding", table, ids)
    }

    fn gather(&mut self, op: &'static str, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = matrix_dims(op, self.value(x))?;
        if idx.is_empty() {
            return Err(Error::arg(format!("{op}: empty index list")));
        }
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index { op, index: i, bound: m });
            }
            out.extend_from_slice(self.value(x).row(i));
        }
        self.push(
            op,
            vec![idx.len(), n],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Per-row layer normalization with learnable `gain[n]` and `bias[n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = matrix_dims("layer_norm", self.value(x))?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let d = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    fn map(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, kind: Op) -> Result<Var> {
        let out = self.value(x).data().iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(op, shape, out, kind)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(
            "gelu",
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Row softmax restricted to entries where `allowed` is true; the rest get
    /// probability 0. Every row needs at least one allowed entry.
    pub fn softmax_rows_masked(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "softmax_rows_masked",
                lhs: self.shape(x).to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        self.softmax_impl(x, Some(allowed))
    }

    fn softmax_impl(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let (m, n) = matrix_dims("softmax_rows", self.value(x))?;
        let d = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ok = |j: usize| allowed.is_none_or(|a| a[i * n + j]);
            let row = &d[i * n..(i + 1) * n];
            let max = (0..n).filter(|&j| ok(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::arg(format!("softmax row {i} has no unmasked entries")));
            }
            let mut sum = 0.0;
            for j in 0..n {
                if ok(j) {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v /= sum;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("softmax_rows", shape, out, Op::Softmax(x))
    }

    /// Mean token-level cross-entropy over positions where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = matrix_dims("cross_entropy", self.value(logits))?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::arg("cross_entropy: no positions selected by mask"));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: targets[i],
                    bound: v,
                });
            }
            let row = &d[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[targets[i]];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        self.push(
            "cross_entropy",
            vec![1],
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let d = self.value(logits).data();
        if targets.len() != d.len() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total: f64 = d
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let n = d.len() as f64;
        self.push(
            "bce_with_logits",
            vec![1],
            vec![total / n],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(x))
    }

    /// Column-wise max over contiguous row segments `(start, len)`; one output row per segment.
    pub fn segment_max(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = matrix_dims("segment_max", self.value(x))?;
        let d = self.value(x).data();
        let mut out = vec![0.0; segments.len() * n];
        let mut argmax = vec![0; segments.len() * n];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > m {
                return Err(Error::Index {
                    op: "segment_max",
                    index: start + len,
                    bound: m,
                });
            }
            for j in 0..n {
                let mut best = start;
                for r in start + 1..start + len {
                    if d[r * n + j] > d[best * n + j] {
                        best = r;
                    }
                }
                out[s * n + j] = d[best * n + j];
                argmax[s * n + j] = best;
            }
        }
        self.push(
            "segment_max",
            vec![segments.len(), n],
            out,
            Op::SegmentMax { x, argmax },
        )
    }

    /// Reverse sweep from a scalar root. Gradients of earlier sweeps are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(root).to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradients for every parameter bound on this graph.
    pub fn param_grads(&self, store: &ParamStore) -> Grads {
        let mut out = Grads::new(store.len());
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.grad(*v) {
                    out.set(ParamId::new(i), g.to_vec());
                }
            }
        }
        out
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims("matmul", &nodes[a.0].value).unwrap();
                let n = node.value.cols();
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = matrix_dims("transpose", &nodes[x.0].value).unwrap();
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let n = node.value.cols();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| {
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += c * v;
                }
            }),
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        acc(*p, &mut |gp| add_into(gp, &g[off..off + len]));
                        off += len;
                    }
                } else {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut col = 0;
                    for p in parts {
                        let c = nodes[p.0].value.cols();
                        acc(*p, &mut |gp| {
                            for i in 0..rows {
                                add_into(&mut gp[i * c..(i + 1) * c], &g[i * total + col..i * total + col + c]);
                            }
                        });
                        col += c;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.value.cols();
                acc(*x, &mut |gx| add_into(&mut gx[start * n..start * n + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let n = nodes[x.0].value.cols();
                let len = node.value.cols();
                acc(*x, &mut |gx| {
                    for (i, grow) in g.chunks(len).enumerate() {
                        add_into(&mut gx[i * n + start..i * n + start + len], grow);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let n = node.value.cols();
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let m = node.value.rows();
                let gd = val(*gain);
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let scale = rstd[i] / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += scale * (n as f64 * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let v = xd[i];
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Exp(x) => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * y[i];
                }
            }),
            Op::Abs(x) => {
                let xd = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * sign(xd[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                acc(*x, &mut |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = nodes[logits.0].value.cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (i, &on) in mask.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        for j in 0..v {
                            gl[i * v + j] += scale * probs[i * v + j];
                        }
                        gl[i * v + targets[i]] -= scale;
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let xd = val(*logits);
                let scale = g[0] / xd.len() as f64;
                acc(*logits, &mut |gl| {
                    for i in 0..gl.len() {
                        gl[i] += scale * (sigmoid(xd[i]) - targets[i]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
            Op::SegmentMax { x, argmax } => {
                let n = node.value.cols();
                acc(*x, &mut |gx| {
                    for (k, &r) in argmax.iter().enumerate() {
                        gx[r * n + k % n] += g[k];
                    }
                });
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
        Op::Transpose(x)
        | Op::Scale(x, _)
        | Op::Gelu(x)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Exp(x)
        | Op::Abs(x)
        | Op::Softmax(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::SliceRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::GatherRows { x, .. }
        | Op::SegmentMax { x, .. } => vec![*x],
        Op::Concat { parts, .. } => parts.clone(),
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::CrossEntropy { logits, .. } | Op::BceWithLogits { logits, .. } => vec![*logits],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2)).unwrap();
        let mat = g.constant(m(&[&[1.5, -2.0], &[0.25, 7.0]])).unwrap();
        let p = g.matmul(i2, mat).unwrap();
        assert_eq!(g.value(p), g.value(mat));

        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let ones = g.constant(m(&[&[1.0], &[1.0]])).unwrap();
        let p = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 7.0]);
        assert_eq!(g.shape(p), &[2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[3.0, 3.0, 3.0, 3.0], &[0.0, 3f64.ln(), 0.0, 0.0]])).unwrap();
        let s = g.softmax_rows(x).unwrap();
        for v in g.value(s).row(0) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = g.constant(m(&[&[0.0, 3f64.ln()]])).unwrap();
        let s = g.softmax_rows(x).unwrap();
        let r = g.value(s).row(0);
        assert!((r[0] - 0.25).abs() < 1e-15 && (r[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[1000.0, 1001.0, 999.0]])).unwrap();
        let s = g.softmax_rows(x).unwrap();
        let sum: f64 = g.value(s).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[1.0, 2.0, 3.0]])).unwrap();
        let s = g.softmax_rows_masked(x, &[true, true, false]).unwrap();
        let r = g.value(s).row(0);
        assert_eq!(r[2], 0.0);
        assert!((r[0] + r[1] - 1.0).abs() < 1e-15);
        assert!(g.softmax_rows_masked(x, &[false; 3]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 8])).unwrap();
        let l = g.cross_entropy(z, &[1, 2, 7], &[true; 3]).unwrap();
        assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-12);

        let big = g.constant(m(&[&[200.0, 0.0], &[0.0, 200.0]])).unwrap();
        let l = g.cross_entropy(big, &[0, 1], &[true, true]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);

        // [[1,0],[0,2]] with targets (0,0):
        // row 0: -ln(e/(e+1)) = ln(1+e^-1); row 1: -ln(1/(1+e^2)) = ln(1+e^2)
        let h = g.constant(m(&[&[1.0, 0.0], &[0.0, 2.0]])).unwrap();
        let l = g.cross_entropy(h, &[0, 0], &[true, true]).unwrap();
        let e = std::f64::consts::E;
        let expected = ((1.0 + 1.0 / e).ln() + (1.0 + e * e).ln()) / 2.0;
        assert!((g.value(l).item() - expected).abs() < 1e-12);

        assert!(matches!(
            g.cross_entropy(h, &[0, 2], &[true, true]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_ignores_masked_positions() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[1.0, 0.0], &[5.0, -3.0]])).unwrap();
        let a = g.cross_entropy(x, &[0, 1], &[true, false]).unwrap();
        let y = g.constant(m(&[&[1.0, 0.0], &[-9.0, 4.0]])).unwrap();
        let b = g.cross_entropy(y, &[0, 0], &[true, false]).unwrap();
        assert_eq!(g.value(a).item(), g.value(b).item());
    }

    #[test]
    fn non_finite_is_reported_with_op_name() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[800.0]])).unwrap();
        match g.exp(x) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "exp"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn concat_then_slice_is_exact() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[0.1, 0.2], &[0.3, 0.4]])).unwrap();
        let b = g.constant(m(&[&[9.9, 8.8]])).unwrap();
        let c = g.concat(&[a, b], 0).unwrap();
        let s = g.slice_rows(c, 0, 2).unwrap();
        assert_eq!(g.value(s), g.value(a));
        let c = g.concat(&[a, a], 1).unwrap();
        let s = g.slice_cols(c, 2, 2).unwrap();
        assert_eq!(g.value(s), g.value(a));
    }

    #[test]
    fn backward_skips_constants() {
        let mut g = Graph::new();
        let a = g.variable(m(&[&[1.0, 2.0]])).unwrap();
        let b = g.constant(m(&[&[3.0, 4.0]])).unwrap();
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn f32_precision_rounds_values() {
        let mut g = Graph::with_precision(Precision::F32);
        let a = g.constant(Tensor::scalar(0.1)).unwrap();
        assert_eq!(g.value(a).item(), 0.1f32 as f64);
    }
}
