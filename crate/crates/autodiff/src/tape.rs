//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and the inputs it
//! read, so the tape is topologically ordered by construction. `backward`
//! walks it once in reverse and accumulates vector-Jacobian products.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::optim::ParameterStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction applied within each segment by [`Tape::segment_aggregate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentMode {
    Mean,
    Max,
    Min,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryOp {
    Neg,
    Exp,
    Log,
    Square,
    Sqrt,
    Softplus,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    Columns { input: Var, start: usize },
    Gather { input: Var, index: Vec<usize> },
    Segment {
        input: Var,
        ids: Vec<usize>,
        mode: SegmentMode,
        counts: Vec<usize>,
        // Winning source row per output element for max/min (usize::MAX when empty).
        arg: Vec<usize>,
    },
    Sum(Var),
    RowSums(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
        relu: bool,
    },
    GatherSum {
        parts: Vec<(Var, Option<Vec<usize>>)>,
        bias: Var,
        relu: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
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

    /// Drops every node recorded at or after position `len`, so the tape can
    /// be reused for another pass over a shared prefix. Variables from the
    /// dropped suffix must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Parameters bound on this tape, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::ForeignVar(v.0))
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Binds a trainable parameter from `store`. Binding the same name twice
    /// returns the same variable.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.leaf(value, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng, "matmul")
    }

    /// `x·w + b` with `b` broadcast over rows, optionally rectified.
    pub fn dense(&mut self, x: Var, w: Var, b: Var, relu: bool) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: sx,
                rhs: sw,
            });
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        if sb.iter().product::<usize>() != n || sb.last() != Some(&n) {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                lhs: vec![m, n],
                rhs: sb,
            });
        }
        let bias = self.value(b).data();
        let mut out: Vec<f64> = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm_acc(m, k, n, self.value(x).data(), (k, 1), self.value(w).data(), (n, 1), &mut out);
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Dense { x, w, b, relu }, ng, "dense")
    }

    /// `Σ_k part_k[index_k] + bias` over `rows` rows, optionally rectified.
    /// A part without an index must already have `rows` rows.
    pub fn gather_sum(&mut self, parts: &[(Var, Option<&[usize]>)], bias: Var, rows: usize, relu: bool) -> Result<Var> {
        self.check(bias)?;
        let cols = self.value(bias).len();
        let mut out: Vec<f64> = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            out.extend_from_slice(self.value(bias).data());
        }
        for &(p, index) in parts {
            self.check(p)?;
            let (r, c) = self.matrix_shape(p, "gather_sum")?;
            let mismatch = || TensorError::ShapeMismatch {
                op: "gather_sum",
                lhs: vec![rows, cols],
                rhs: vec![r, c],
            };
            if c != cols {
                return Err(mismatch());
            }
            let src = self.value(p).data();
            match index {
                Some(index) => {
                    if index.len() != rows {
                        return Err(mismatch());
                    }
                    if let Some(&bad) = index.iter().find(|&&i| i >= r) {
                        return Err(TensorError::IndexOutOfRange { index: bad, rows: r });
                    }
                    for (dst, &i) in out.chunks_exact_mut(cols.max(1)).zip(index) {
                        dst.iter_mut().zip(&src[i * cols..(i + 1) * cols]).for_each(|(d, s)| *d += s);
                    }
                }
                None => {
                    if r != rows {
                        return Err(mismatch());
                    }
                    out.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        if relu {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let ng = self.needs(bias) || parts.iter().any(|&(p, _)| self.needs(p));
        let parts = parts.iter().map(|&(p, i)| (p, i.map(<[usize]>::to_vec))).collect();
        self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::GatherSum { parts, bias, relu },
            ng,
            "gather_sum",
        )
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var, name: &'static str) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let f = match op {
            BinaryOp::Add => |p: f64, q: f64| p + q,
            BinaryOp::Sub => |p: f64, q: f64| p - q,
            BinaryOp::Mul => |p: f64, q: f64| p * q,
            BinaryOp::Div => |p: f64, q: f64| p / q,
        };
        let mut out = Vec::with_capacity(n);
        broadcast_each(n, x.len(), y.len(), |_, ix, iy| out.push(f(x[ix], y[iy])));
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(shape, out), Op::Binary(op, a, b), ng, name)
    }

    /// Elementwise sum. One operand may broadcast over the other's leading
    /// dimensions (its shape must equal the other's trailing dimensions).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b, "div")
    }

    fn unary(&mut self, op: UnaryOp, a: Var, name: &'static str) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        match op {
            UnaryOp::Log if x.data().iter().any(|&v| v <= 0.0) => {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: "input must be strictly positive".into(),
                })
            }
            UnaryOp::Sqrt if x.data().iter().any(|&v| v < 0.0) => {
                return Err(TensorError::Domain {
                    op: "sqrt",
                    detail: "input must be nonnegative".into(),
                })
            }
            _ => {}
        }
        let out = match op {
            UnaryOp::Neg => x.map(|v| -v),
            UnaryOp::Exp => x.map(f64::exp),
            UnaryOp::Log => x.map(f64::ln),
            UnaryOp::Square => x.map(|v| v * v),
            UnaryOp::Sqrt => x.map(f64::sqrt),
            UnaryOp::Softplus => x.map(softplus),
            UnaryOp::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        };
        let ng = self.needs(a);
        self.push(out, Op::Unary(op, a), ng, name)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a, "neg")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a, "log")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a, "square")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, a, "sqrt")
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, a, "softplus")
    }

    /// Rectifier with subgradient 0 at the origin.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a, "relu")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|v| v * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|v| v + c);
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng, "add_scalar")
    }

    // ── structural ──────────────────────────────────────────────────

    fn matrix_shape(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    /// Concatenates 2-D operands along the last dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut widths = Vec::with_capacity(parts.len());
        let mut rows = None;
        for &p in parts {
            self.check(p)?;
            let (r, c) = self.matrix_shape(p, "concat")?;
            match rows {
                None => rows = Some(r),
                Some(r0) if r0 != r => {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0],
                        rhs: vec![r],
                    })
                }
                _ => {}
            }
            widths.push(c);
        }
        let rows = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::from_parts(vec![rows, total], out),
            Op::Concat(parts.to_vec()),
            ng,
            "concat",
        )
    }

    /// Selects a contiguous range of columns of a 2-D operand.
    pub fn columns(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        self.check(a)?;
        let (rows, cols) = self.matrix_shape(a, "columns")?;
        if range.start > range.end || range.end > cols {
            return Err(TensorError::ShapeMismatch {
                op: "columns",
                lhs: vec![rows, cols],
                rhs: vec![range.start, range.end],
            });
        }
        let w = range.end - range.start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + range.start..r * cols + range.end]);
        }
        let ng = self.needs(a);
        self.push(
            Tensor::from_parts(vec![rows, w], out),
            Op::Columns {
                input: a,
                start: range.start,
            },
            ng,
            "columns",
        )
    }

    /// `out[i] = a[index[i]]` row-wise. Backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        self.check(a)?;
        let (rows, cols) = self.matrix_shape(a, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange { index: bad, rows });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.needs(a);
        self.push(
            Tensor::from_parts(vec![index.len(), cols], out),
            Op::Gather {
                input: a,
                index: index.to_vec(),
            },
            ng,
            "gather_rows",
        )
    }

    /// Reduces the rows of `a` grouped by `segment_ids` into `num_segments`
    /// rows. Empty segments produce a zero row for every mode; max/min ties
    /// resolve to the lowest row index.
    pub fn segment_aggregate(
        &mut self,
        a: Var,
        segment_ids: &[usize],
        num_segments: usize,
        mode: SegmentMode,
    ) -> Result<Var> {
        self.check(a)?;
        let (rows, cols) = self.matrix_shape(a, "segment_aggregate")?;
        if segment_ids.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "segment_aggregate",
                lhs: vec![rows, cols],
                rhs: vec![segment_ids.len()],
            });
        }
        if let Some(&id) = segment_ids.iter().find(|&&s| s >= num_segments) {
            return Err(TensorError::SegmentOutOfRange { id, num_segments });
        }
        let src = self.value(a).data();
        let mut counts = vec![0usize; num_segments];
        for &s in segment_ids {
            counts[s] += 1;
        }
        let mut out = vec![0.0; num_segments * cols];
        let mut arg = Vec::new();
        match mode {
            SegmentMode::Sum | SegmentMode::Mean => {
                for (r, &s) in segment_ids.iter().enumerate() {
                    let dst = &mut out[s * cols..(s + 1) * cols];
                    for (d, &v) in dst.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                        *d += v;
                    }
                }
                if mode == SegmentMode::Mean {
                    for (s, &c) in counts.iter().enumerate() {
                        if c > 0 {
                            let inv = 1.0 / c as f64;
                            out[s * cols..(s + 1) * cols].iter_mut().for_each(|v| *v *= inv);
                        }
                    }
                }
            }
            SegmentMode::Max | SegmentMode::Min => {
                arg = vec![usize::MAX; num_segments * cols];
                let better = |new: f64, old: f64| match mode {
                    SegmentMode::Max => new > old,
                    _ => new < old,
                };
                for (r, &s) in segment_ids.iter().enumerate() {
                    for c in 0..cols {
                        let v = src[r * cols + c];
                        let slot = s * cols + c;
                        if arg[slot] == usize::MAX || better(v, out[slot]) {
                            out[slot] = v;
                            arg[slot] = r;
                        }
                    }
                }
            }
        }
        let ng = self.needs(a);
        self.push(
            Tensor::from_parts(vec![num_segments, cols], out),
            Op::Segment {
                input: a,
                ids: segment_ids.to_vec(),
                mode,
                counts,
                arg,
            },
            ng,
            "segment_aggregate",
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums of a 2-D operand, shape `[rows, 1]`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (rows, cols) = self.matrix_shape(a, "row_sums")?;
        let src = self.value(a).data();
        let out: Vec<f64> = if cols == 0 {
            vec![0.0; rows]
        } else {
            src.chunks(cols).map(|r| r.iter().sum()).collect()
        };
        let ng = self.needs(a);
        self.push(Tensor::from_parts(vec![rows, 1], out), Op::RowSums(a), ng, "row_sums")
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Propagates d`loss` back through the tape. Every leaf created with
    /// `requires_grad` receives a gradient, zero when unreachable.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut leaf_grads = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                leaf_grads.insert(i, Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        // Leaves recorded after the loss cannot influence it.
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                leaf_grads.insert(i, Tensor::zeros(node.value.shape()));
            }
        }
        for (i, g) in &leaf_grads {
            if !g.is_finite() {
                let name = self
                    .params
                    .iter()
                    .find(|(_, v)| v.0 == *i)
                    .map(|(n, _)| n.clone())
                    .unwrap_or_else(|| format!("var #{i}"));
                return Err(TensorError::NonFiniteGradient(name));
            }
        }
        Ok(Gradients {
            leaves: leaf_grads,
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // grad_a = g · bᵀ
                    let ga = self.acc(grads, *a);
                    gemm_acc(m, n, k, g, (n, 1), self.value(*b).data(), (1, n), ga);
                }
                if self.needs(*b) {
                    // grad_b = aᵀ · g
                    let gb = self.acc(grads, *b);
                    gemm_acc(k, m, n, self.value(*a).data(), (1, k), g, (n, 1), gb);
                }
            }
            Op::Binary(op, a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let (lx, ly, n) = (x.len(), y.len(), g.len());
                if lx == n && matches!(op, BinaryOp::Add | BinaryOp::Sub) && self.needs(*a) {
                    add_into(grads, *a, g);
                } else if self.needs(*a) {
                    let ga = self.acc(grads, *a);
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => broadcast_each(n, lx, ly, |i, ix, _| ga[ix] += g[i]),
                        BinaryOp::Mul => broadcast_each(n, lx, ly, |i, ix, iy| ga[ix] += g[i] * y[iy]),
                        BinaryOp::Div => broadcast_each(n, lx, ly, |i, ix, iy| ga[ix] += g[i] / y[iy]),
                    }
                }
                if ly == n && *op == BinaryOp::Add && self.needs(*b) {
                    add_into(grads, *b, g);
                } else if self.needs(*b) {
                    let gb = self.acc(grads, *b);
                    match op {
                        BinaryOp::Add => broadcast_each(n, lx, ly, |i, _, iy| gb[iy] += g[i]),
                        BinaryOp::Sub => broadcast_each(n, lx, ly, |i, _, iy| gb[iy] -= g[i]),
                        BinaryOp::Mul => broadcast_each(n, lx, ly, |i, ix, iy| gb[iy] += g[i] * x[ix]),
                        BinaryOp::Div => broadcast_each(n, lx, ly, |i, ix, iy| {
                            let q = y[iy];
                            gb[iy] -= g[i] * x[ix] / (q * q);
                        }),
                    }
                }
            }
            Op::Unary(op, a) => {
                let x = self.value(*a).data();
                let out = node.value.data();
                let ga = self.acc(grads, *a);
                let each = |ga: &mut [f64], d: &dyn Fn(usize) -> f64| {
                    for (i, (acc, &gi)) in ga.iter_mut().zip(g).enumerate() {
                        *acc += gi * d(i);
                    }
                };
                match op {
                    UnaryOp::Neg => ga.iter_mut().zip(g).for_each(|(acc, &gi)| *acc -= gi),
                    UnaryOp::Exp => ga.iter_mut().zip(g).zip(out).for_each(|((acc, &gi), &o)| *acc += gi * o),
                    UnaryOp::Log => ga.iter_mut().zip(g).zip(x).for_each(|((acc, &gi), &v)| *acc += gi / v),
                    UnaryOp::Square => ga.iter_mut().zip(g).zip(x).for_each(|((acc, &gi), &v)| *acc += 2.0 * gi * v),
                    UnaryOp::Sqrt => ga.iter_mut().zip(g).zip(out).for_each(|((acc, &gi), &o)| *acc += 0.5 * gi / o),
                    UnaryOp::Softplus => each(ga, &|i| sigmoid(x[i])),
                    UnaryOp::Relu => ga
                        .iter_mut()
                        .zip(g)
                        .zip(x)
                        .for_each(|((acc, &gi), &v)| *acc += if v > 0.0 { gi } else { 0.0 }),
                }
            }
            Op::Scale(a, c) => {
                let ga = self.acc(grads, *a);
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi * c;
                }
            }
            Op::AddScalar(a) => {
                let ga = self.acc(grads, *a);
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let gp = self.acc(grads, p);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (d, &s) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Columns { input, start } => {
                let cols = self.value(*input).cols();
                let w = node.value.cols();
                let rows = node.value.rows();
                let ga = self.acc(grads, *input);
                for r in 0..rows {
                    for c in 0..w {
                        ga[r * cols + start + c] += g[r * w + c];
                    }
                }
            }
            Op::Gather { input, index } => {
                let cols = node.value.cols();
                let ga = self.acc(grads, *input);
                for (r, &src) in index.iter().enumerate() {
                    for c in 0..cols {
                        ga[src * cols + c] += g[r * cols + c];
                    }
                }
            }
            Op::Segment {
                input,
                ids,
                mode,
                counts,
                arg,
            } => {
                let cols = node.value.cols();
                let ga = self.acc(grads, *input);
                match mode {
                    SegmentMode::Sum | SegmentMode::Mean => {
                        for (r, &s) in ids.iter().enumerate() {
                            let scale = if *mode == SegmentMode::Mean {
                                1.0 / counts[s] as f64
                            } else {
                                1.0
                            };
                            for c in 0..cols {
                                ga[r * cols + c] += g[s * cols + c] * scale;
                            }
                        }
                    }
                    SegmentMode::Max | SegmentMode::Min => {
                        for (slot, &r) in arg.iter().enumerate() {
                            if r != usize::MAX {
                                ga[r * cols + slot % cols] += g[slot];
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let ga = self.acc(grads, *a);
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::RowSums(a) => {
                let cols = self.value(*a).cols();
                let ga = self.acc(grads, *a);
                for (r, &gi) in g.iter().enumerate() {
                    ga[r * cols..(r + 1) * cols].iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::Dense { x, w, b, relu } => {
                let gz = rectified(g, node.value.data(), *relu);
                let (m, k, n) = (node.value.rows(), self.value(*w).rows(), node.value.cols());
                if self.needs(*x) {
                    let gx = self.acc(grads, *x);
                    gemm_acc(m, n, k, &gz, (n, 1), self.value(*w).data(), (1, n), gx);
                }
                if self.needs(*w) {
                    let gw = self.acc(grads, *w);
                    gemm_acc(k, m, n, self.value(*x).data(), (1, k), &gz, (n, 1), gw);
                }
                if self.needs(*b) {
                    column_sums_into(&gz, n, self.acc(grads, *b));
                }
            }
            Op::GatherSum { parts, bias, relu } => {
                let gz = rectified(g, node.value.data(), *relu);
                let cols = node.value.cols();
                for (p, index) in parts {
                    if !self.needs(*p) {
                        continue;
                    }
                    if index.is_none() {
                        add_into(grads, *p, &gz);
                        continue;
                    }
                    let gp = self.acc(grads, *p);
                    match index {
                        Some(index) => {
                            for (src, &i) in gz.chunks_exact(cols.max(1)).zip(index) {
                                gp[i * cols..(i + 1) * cols].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                            }
                        }
                        None => gp.iter_mut().zip(gz.iter()).for_each(|(d, s)| *d += s),
                    }
                }
                if self.needs(*bias) {
                    column_sums_into(&gz, cols, self.acc(grads, *bias));
                }
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient with respect to a leaf created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.leaves.get(&v.0))
    }

    /// Gradients keyed by every name in `store`; parameters that were never
    /// bound on the tape get zeros.
    pub fn for_store(&self, store: &ParameterStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .map(|(name, value)| {
                let g = self
                    .param(name)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

/// Adds `g` to the gradient of `v`, copying it when `v` has none yet.
fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(d, s)| *d += s),
        slot => *slot = Some(g.to_vec()),
    }
}

/// `g` masked to the positive entries of `out` when `relu`.
fn rectified<'a>(g: &'a [f64], out: &[f64], relu: bool) -> std::borrow::Cow<'a, [f64]> {
    if relu {
        g.iter().zip(out).map(|(&gi, &o)| if o > 0.0 { gi } else { 0.0 }).collect::<Vec<_>>().into()
    } else {
        g.into()
    }
}

fn column_sums_into(g: &[f64], cols: usize, dst: &mut [f64]) {
    if cols == 0 {
        return;
    }
    for row in g.chunks_exact(cols) {
        dst.iter_mut().zip(row).for_each(|(d, s)| *d += s);
    }
}

/// Visits every output element `i` of a broadcast binary op with the
/// matching operand offsets. One operand length equals `n` and the other
/// divides it.
#[inline(always)]
fn broadcast_each(n: usize, lx: usize, ly: usize, mut f: impl FnMut(usize, usize, usize)) {
    if n == 0 {
        return;
    }
    if lx == ly {
        for i in 0..n {
            f(i, i, i);
        }
    } else if lx == n {
        for base in (0..n).step_by(ly) {
            for j in 0..ly {
                f(base + j, base + j, j);
            }
        }
    } else {
        for base in (0..n).step_by(lx) {
            for j in 0..lx {
                f(base + j, j, base + j);
            }
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    let covers = |big: &[usize], small: &[usize]| {
        let lead = small.iter().take_while(|&&d| d == 1).count();
        big.ends_with(&small[lead..])
    };
    if covers(a, b) {
        Ok(a.to_vec())
    } else if covers(b, a) {
        Ok(b.to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = a·b` for an `m×k` by `k×n` product with explicit (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    gemm_beta(m, k, n, a, sa, b, sb, c, 0.0);
}

/// `c += a·b`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64]) {
    gemm_beta(m, k, n, a, sa, b, sb, c, 1.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm_beta(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    assert!(a.len() >= (m - 1) * sa.0 + (k - 1) * sa.1 + 1);
    assert!(b.len() >= (k - 1) * sb.0 + (n - 1) * sb.1 + 1);
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
