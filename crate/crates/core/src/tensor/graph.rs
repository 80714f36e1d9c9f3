use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose(usize),
    Add(usize, usize),
    AddRow { a: usize, row: usize },
    Mul(usize, usize),
    Scale(usize, f32),
    ScaleBy { a: usize, s: usize },
    Concat(Vec<usize>),
    Slice { a: usize, start: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f64>,
    },
    Gelu(usize),
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Gather { table: usize, ids: Vec<usize> },
    Sum(usize),
    Mean(usize),
    Element { a: usize, index: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy { .. } => "scale_by",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Gather { .. } => "gather",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Element { .. } => "element",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Records primitive operations in topological order for reverse-mode
/// differentiation. Nodes are append-only, so every input precedes its
/// consumers and the tape is acyclic by construction.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// In checked mode every op fails with [`Error::NonFinite`] as soon as it
    /// produces a NaN or infinity.
    pub fn checked() -> Self {
        Graph {
            checked: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            is_param: requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::MissingDependency(format!(
                "node {} does not belong to this graph",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul { a, b } | Op::Add(a, b) | Op::Mul(a, b) => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            Op::AddRow { a, row: b } | Op::ScaleBy { a, s: b } => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Slice { a, .. }
            | Op::Softmax(a)
            | Op::Element { a, .. } => self.nodes[*a].requires_grad,
            Op::Concat(parts) => parts.iter().any(|&p| self.nodes[p].requires_grad),
            Op::LayerNorm { x, gain, bias, .. } => [*x, *gain, *bias]
                .iter()
                .any(|&p| self.nodes[p].requires_grad),
            Op::CrossEntropy { logits, .. } => self.nodes[*logits].requires_grad,
            Op::Gather { table, .. } => self.nodes[*table].requires_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn matrix_dims(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[i].value.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.matrix_dims(ia, "matmul")?;
        let (k2, n) = self.matrix_dims(ib, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {m}×{k} · {k2}×{n}"),
            ));
        }
        let out = kernels::matmul(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            m,
            k,
            n,
        );
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a: ia, b: ib })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.matrix_dims(ia, "transpose")?;
        let out = kernels::transpose(self.nodes[ia].value.data(), r, c);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(ia))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Add(ia, ib))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.idx(a)?, self.idx(row)?);
        let (va, vr) = (&self.nodes[ia].value, &self.nodes[ir].value);
        let cols = va.cols();
        if vr.numel() != cols {
            return Err(Error::shape(
                "add_row",
                format!("row of {} values added to {cols} columns", vr.numel()),
            ));
        }
        let data = va
            .data()
            .chunks(cols)
            .flat_map(|r| r.iter().zip(vr.data()).map(|(x, y)| x + y))
            .collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::AddRow { a: ia, row: ir })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Mul(ia, ib))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let data = va.data().iter().map(|x| x * factor).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale(ia, factor))
    }

    /// Multiplies every element of `a` by the single-element node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ia, is) = (self.idx(a)?, self.idx(s)?);
        if self.nodes[is].value.numel() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("factor has shape {:?}", self.nodes[is].value.shape()),
            ));
        }
        let factor = self.nodes[is].value.item();
        let va = &self.nodes[ia].value;
        let data = va.data().iter().map(|x| x * factor).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::ScaleBy { a: ia, s: is })
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let mut dims = Vec::with_capacity(idx.len());
        for &i in &idx {
            dims.push(self.matrix_dims(i, "concat")?);
        }
        let rows = dims[0].0;
        if dims.iter().any(|&(r, _)| r != rows) {
            return Err(Error::shape("concat", format!("row counts differ: {dims:?}")));
        }
        let total: usize = dims.iter().map(|&(_, c)| c).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &(_, c)) in idx.iter().zip(&dims) {
                data.extend_from_slice(&self.nodes[i].value.data()[r * c..(r + 1) * c]);
            }
        }
        self.push(Tensor::from_parts(vec![rows, total], data), Op::Concat(idx))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (rows, cols) = self.matrix_dims(ia, "slice")?;
        if len == 0 || start + len > cols {
            return Err(Error::shape(
                "slice",
                format!("columns {start}..{} out of 0..{cols}", start + len),
            ));
        }
        let src = self.nodes[ia].value.data();
        let data = (0..rows)
            .flat_map(|r| src[r * cols + start..r * cols + start + len].iter().copied())
            .collect();
        self.push(
            Tensor::from_parts(vec![rows, len], data),
            Op::Slice { a: ia, start },
        )
    }

    /// Row-wise layer normalization over the last axis with `ε = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let vx = &self.nodes[ix].value;
        let d = vx.cols();
        if d < 2 {
            return Err(Error::Degenerate(format!(
                "layer_norm needs at least 2 features, got {d}"
            )));
        }
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if g.numel() != d || b.numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias of {}/{} values for {d} features", g.numel(), b.numel()),
            ));
        }
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(d) {
            let (h, inv) = kernels::layer_norm_row(row);
            out.extend(
                h.iter()
                    .zip(g.data().iter().zip(b.data()))
                    .map(|(&h, (&g, &b))| g * h + b),
            );
            xhat.extend(h);
            inv_std.push(inv);
        }
        let shape = vx.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                xhat,
                inv_std,
            },
        )
    }

    /// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let data = va.data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Gelu(ia))
    }

    /// Row-wise softmax. With `causal`, row `i` only attends to columns `0..=i`.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let cols = va.cols();
        let mut data = va.data().to_vec();
        for (r, row) in data.chunks_mut(cols).enumerate() {
            let len = if causal { (r + 1).min(cols) } else { cols };
            kernels::softmax_prefix(row, len);
        }
        let shape = va.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Softmax(ia))
    }

    /// Per-row `−log softmax(logits)[target]`, one value per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let vl = &self.nodes[il].value;
        let v = vl.cols();
        if targets.len() != vl.rows() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), vl.rows()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!("target {bad} out of range for {v} classes")));
        }
        let mut nll = Vec::with_capacity(targets.len());
        let mut probs = Vec::with_capacity(vl.numel());
        for (row, &t) in vl.data().chunks(v).zip(targets) {
            let lse = kernels::log_sum_exp(row);
            nll.push((lse - f64::from(row[t])) as f32);
            probs.extend(row.iter().map(|&x| (f64::from(x) - lse).exp() as f32));
        }
        self.push(
            Tensor::vector(nll),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Rows `ids` of `table`, stacked into an `ids.len() × cols` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let (rows, cols) = self.matrix_dims(it, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} out of range for {rows} rows")));
        }
        if ids.is_empty() {
            return Err(Error::shape("gather", "no rows requested"));
        }
        let src = self.nodes[it].value.data();
        let data = ids
            .iter()
            .flat_map(|&i| src[i * cols..(i + 1) * cols].iter().copied())
            .collect();
        self.push(
            Tensor::from_parts(vec![ids.len(), cols], data),
            Op::Gather {
                table: it,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().map(|&v| f64::from(v)).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(ia))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let s: f64 = va.data().iter().map(|&v| f64::from(v)).sum();
        let m = s / va.numel() as f64;
        self.push(Tensor::scalar(m as f32), Op::Mean(ia))
    }

    /// The `index`-th element (row-major) as a single-element node.
    pub fn element(&mut self, a: Var, index: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if index >= va.numel() {
            return Err(Error::Index(format!(
                "element {index} out of range for {} values",
                va.numel()
            )));
        }
        let v = va.data()[index];
        self.push(Tensor::scalar(v), Op::Element { a: ia, index })
    }

    // ---- reverse pass -----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to each of `params`.
    pub fn gradient(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let il = self.idx(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::shape(
                "gradient",
                format!("loss must be a scalar, got {:?}", self.nodes[il].value.shape()),
            ));
        }
        let targets = params.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        for &t in &targets {
            if !self.nodes[t].is_param {
                return Err(Error::MissingDependency(format!(
                    "node {t} is not a differentiable parameter"
                )));
            }
        }
        let grads = self.backward(il);
        targets
            .iter()
            .map(|&t| {
                grads[t]
                    .clone()
                    .map(|g| Tensor::from_parts(self.nodes[t].value.shape().to_vec(), g))
                    .ok_or_else(|| {
                        Error::MissingDependency(format!(
                            "loss does not depend on parameter node {t}"
                        ))
                    })
            })
            .collect()
    }

    fn backward(&self, loss: usize) -> Vec<Option<Vec<f32>>> {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        for i in (0..=loss).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        grads
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, node: &Node, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = dims(&self.nodes[*a].value);
                let n = node.value.cols();
                if self.wants(*a) {
                    let ga = kernels::matmul_nt(gout, self.nodes[*b].value.data(), m, n, k);
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = kernels::matmul_tn(self.nodes[*a].value.data(), gout, m, k, n);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims(&node.value);
                accumulate(grads, *a, kernels::transpose(gout, r, c));
            }
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if self.wants(p) {
                        accumulate(grads, p, gout.to_vec());
                    }
                }
            }
            Op::AddRow { a, row } => {
                if self.wants(*a) {
                    accumulate(grads, *a, gout.to_vec());
                }
                if self.wants(*row) {
                    let cols = node.value.cols();
                    let mut acc = vec![0.0f64; cols];
                    for r in gout.chunks(cols) {
                        for (s, &g) in acc.iter_mut().zip(r) {
                            *s += f64::from(g);
                        }
                    }
                    accumulate(grads, *row, acc.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.wants(*a) {
                    accumulate(grads, *a, gout.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, gout.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, f) => {
                accumulate(grads, *a, gout.iter().map(|g| g * f).collect());
            }
            Op::ScaleBy { a, s } => {
                let factor = self.nodes[*s].value.item();
                if self.wants(*a) {
                    accumulate(grads, *a, gout.iter().map(|g| g * factor).collect());
                }
                if self.wants(*s) {
                    let d = kernels::dot(gout, self.nodes[*a].value.data());
                    accumulate(grads, *s, vec![d as f32]);
                }
            }
            Op::Concat(parts) => {
                let (rows, total) = dims(&node.value);
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].value.cols();
                    if self.wants(p) {
                        let g = (0..rows)
                            .flat_map(|r| gout[r * total + offset..r * total + offset + c].iter().copied())
                            .collect();
                        accumulate(grads, p, g);
                    }
                    offset += c;
                }
            }
            Op::Slice { a, start } => {
                let (rows, cols) = dims(&self.nodes[*a].value);
                let len = node.value.cols();
                let mut g = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    g[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&gout[r * len..(r + 1) * len]);
                }
                accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let g = self.nodes[*gain].value.data();
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(gout.len());
                    for ((dy, h), &inv) in gout.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                        let dh: Vec<f64> =
                            dy.iter().zip(g).map(|(&dy, &g)| f64::from(dy * g)).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 =
                            dh.iter().zip(h).map(|(&a, &b)| a * f64::from(b)).sum();
                        let n = d as f64;
                        gx.extend(dh.iter().zip(h).map(|(&dh, &h)| {
                            (inv / n * (n * dh - sum_dh - f64::from(h) * sum_dh_h)) as f32
                        }));
                    }
                    accumulate(grads, *x, gx);
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = vec![0.0f64; d];
                    let mut gb = vec![0.0f64; d];
                    for (dy, h) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += f64::from(dy[j]) * f64::from(h[j]);
                            gb[j] += f64::from(dy[j]);
                        }
                    }
                    if self.wants(*gain) {
                        accumulate(grads, *gain, gg.into_iter().map(|v| v as f32).collect());
                    }
                    if self.wants(*bias) {
                        accumulate(grads, *bias, gb.into_iter().map(|v| v as f32).collect());
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.nodes[*a].value.data();
                accumulate(
                    grads,
                    *a,
                    gout.iter().zip(va).map(|(g, &x)| g * kernels::gelu_grad(x)).collect(),
                );
            }
            Op::Softmax(a) => {
                let cols = node.value.cols();
                let p = node.value.data();
                let mut ga = Vec::with_capacity(p.len());
                for (pr, gr) in p.chunks(cols).zip(gout.chunks(cols)) {
                    let s = kernels::dot(pr, gr);
                    ga.extend(
                        pr.iter()
                            .zip(gr)
                            .map(|(&p, &g)| (f64::from(p) * (f64::from(g) - s)) as f32),
                    );
                }
                accumulate(grads, *a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.nodes[*logits].value.cols();
                let mut gl = Vec::with_capacity(probs.len());
                for ((pr, &t), &g) in probs.chunks(v).zip(targets).zip(gout) {
                    gl.extend(pr.iter().enumerate().map(|(j, &p)| {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        g * (p - onehot)
                    }));
                }
                accumulate(grads, *logits, gl);
            }
            Op::Gather { table, ids } => {
                let (rows, cols) = dims(&self.nodes[*table].value);
                let mut acc = vec![0.0f64; rows * cols];
                for (r, &id) in ids.iter().enumerate() {
                    for (s, &g) in acc[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(&gout[r * cols..(r + 1) * cols])
                    {
                        *s += f64::from(g);
                    }
                }
                accumulate(grads, *table, acc.into_iter().map(|v| v as f32).collect());
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.numel();
                accumulate(grads, *a, vec![gout[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel();
                let g = (f64::from(gout[0]) / n as f64) as f32;
                accumulate(grads, *a, vec![g; n]);
            }
            Op::Element { a, index } => {
                let n = self.nodes[*a].value.numel();
                let mut g = vec![0.0f32; n];
                g[*index] = gout[0];
                accumulate(grads, *a, g);
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn accumulate(grads: &mut [Option<Vec<f32>>], i: usize, g: Vec<f32>) {
    match &mut grads[i] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
        slot @ None => *slot = Some(g),
    }
}
