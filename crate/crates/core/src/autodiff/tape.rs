//! Define-by-run tape. Every primitive is evaluated eagerly when recorded;
//! `backward` walks the record in reverse and accumulates gradients only
//! for nodes that depend on a registered leaf.

use std::collections::HashMap;

use super::tensor::{self, dot, matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention mask rule for a `[queries × keys]` score block. Query row `i`
/// sits at absolute position `q_offset + i`; it may see key `j` when
/// `j <= pos`, or when both lie inside the bidirectional prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnMask {
    pub q_offset: usize,
    pub bidir_prefix: usize,
}

impl AttnMask {
    #[inline]
    pub fn allows(&self, row: usize, key: usize) -> bool {
        let pos = self.q_offset + row;
        key <= pos || (pos < self.bidir_prefix && key < self.bidir_prefix)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// Broadcast a row vector over every row of a matrix.
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm(Var, Var, Var),
    Gelu(Var),
    Relu(Var),
    MaskedSoftmax(Var, AttnMask),
    GatherRows(Var, Vec<usize>),
    /// Flat gather; `None` reads as zero (used for padded im2col).
    Gather(Var, Vec<Option<usize>>, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy(Var, Vec<usize>, Vec<bool>),
    BceWithLogits(Var, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::LayerNorm(..) => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::GatherRows(..) => "gather_rows",
            Op::Gather(..) => "gather",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::BceWithLogits(..) => "bce_with_logits",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Const => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::LayerNorm(x, g, b) => vec![*x, *g, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::MaskedSoftmax(a, _)
            | Op::GatherRows(a, _)
            | Op::Gather(a, ..)
            | Op::SliceCols(a, ..)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::CrossEntropy(a, ..)
            | Op::BceWithLogits(a, _) => vec![*a],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<Var>,
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

    /// Registers a tensor as a gradient leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        self.leaves.push(v);
        v
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Const,
            value,
            requires_grad: false,
        });
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Recorded values in record order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        self.leaves.contains(&v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.push(Op::LayerNorm(x, gain, bias))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn masked_softmax(&mut self, x: Var, mask: AttnMask) -> Result<Var> {
        self.push(Op::MaskedSoftmax(x, mask))
    }

    /// Plain row softmax (no masking).
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        self.push(Op::MaskedSoftmax(
            x,
            AttnMask {
                q_offset: cols,
                bidir_prefix: 0,
            },
        ))
    }

    pub fn gather_rows(&mut self, table: Var, rows: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows(table, rows))
    }

    pub fn gather(&mut self, src: Var, idx: Vec<Option<usize>>, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Gather(src, idx, shape))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.push(Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.push(Op::ConcatCols(parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols(x, start, len))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    /// Mean over unmasked rows of `-log softmax(logits[row])[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, mask: Vec<bool>) -> Result<Var> {
        self.push(Op::CrossEntropy(logits, targets, mask))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>) -> Result<Var> {
        self.push(Op::BceWithLogits(logits, targets))
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = {
            let nodes = &self.nodes;
            let lookup = |v: Var| -> Result<&Tensor> {
                nodes
                    .get(v.0)
                    .map(|n| &n.value)
                    .ok_or(Error::OutOfRange {
                        what: "tape",
                        index: v.0,
                        size: nodes.len(),
                    })
            };
            eval(&op, &lookup)?
        };
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(v)
    }

    /// Re-evaluates every recorded primitive from its recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf | Op::Const => node.value.clone(),
                _ => {
                    let lookup = |v: Var| -> Result<&Tensor> { Ok(&values[v.0]) };
                    eval(&node.op, &lookup)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar `loss`, producing gradients for every
    /// registered leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        let mut out = HashMap::new();
        for &leaf in &self.leaves {
            let shape = self.value(leaf).shape().to_vec();
            let g = match grads.get_mut(leaf.0).and_then(Option::take) {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(&shape),
            };
            out.insert(leaf, g);
        }
        Ok(Gradients { by_leaf: out })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).rows_cols();
                let (_, n) = val(*b).rows_cols();
                if self.needs(*a) {
                    matmul_bt_into(g, val(*b).data(), acc(grads, *a, m * k), m, n, k);
                }
                if self.needs(*b) {
                    matmul_at_into(val(*a).data(), g, acc(grads, *b, k * n), m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = val(*a).rows_cols();
                let (n, _) = val(*b).rows_cols();
                if self.needs(*a) {
                    matmul_into(g, val(*b).data(), acc(grads, *a, m * k), m, n, k);
                }
                if self.needs(*b) {
                    matmul_at_into(g, val(*a).data(), acc(grads, *b, n * k), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = val(*b).data();
                    for ((o, gi), bi) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.needs(*b) {
                    let av = val(*a).data();
                    for ((o, gi), ai) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddRow(a, r) => {
                if self.needs(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.needs(*r) {
                    let n = val(*r).len();
                    let gr = acc(grads, *r, n);
                    for row in g.chunks(n) {
                        add_into(gr, row);
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    for (o, gi) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                        *o += c * gi;
                    }
                }
            }
            Op::LayerNorm(x, gain, bias) => {
                let xv = val(*x);
                let (rows, cols) = xv.rows_cols();
                let gv = val(*gain).data();
                let n = cols as f64;
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let row = xv.row(r);
                    let (mean, rstd) = tensor::row_stats(row);
                    let gr = &g[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * rstd;
                        dxhat[c] = gr[c] * gv[c];
                        dg[c] += gr[c] * xhat[c];
                        db[c] += gr[c];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = rstd / n * (n * dxhat[c] - sum_d - xhat[c] * sum_dx);
                    }
                }
                if self.needs(*x) {
                    add_into(acc(grads, *x, dx.len()), &dx);
                }
                if self.needs(*gain) {
                    add_into(acc(grads, *gain, cols), &dg);
                }
                if self.needs(*bias) {
                    add_into(acc(grads, *bias, cols), &db);
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let xv = val(*x).data();
                    for ((o, gi), xi) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                        *o += gi * tensor::gelu_grad_scalar(*xi);
                    }
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let xv = val(*x).data();
                    for ((o, gi), xi) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x, _) => {
                if self.needs(*x) {
                    let y = &node.value;
                    let (rows, cols) = y.rows_cols();
                    let gx = acc(grads, *x, rows * cols);
                    for r in 0..rows {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s = dot(yr, gr);
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::GatherRows(t, rows) => {
                if self.needs(*t) {
                    let tv = val(*t);
                    let (_, cols) = tv.rows_cols();
                    let gt = acc(grads, *t, tv.len());
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gt[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                }
            }
            Op::Gather(s, idx, _) => {
                if self.needs(*s) {
                    let gs = acc(grads, *s, val(*s).len());
                    for (gi, ix) in g.iter().zip(idx) {
                        if let Some(ix) = ix {
                            gs[*ix] += gi;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    if self.needs(*p) {
                        add_into(acc(grads, *p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.rows_cols();
                let mut col = 0;
                for p in parts {
                    let (_, c) = val(*p).rows_cols();
                    if self.needs(*p) {
                        let gp = acc(grads, *p, rows * c);
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + col..r * total + col + c]);
                        }
                    }
                    col += c;
                }
            }
            Op::SliceCols(x, start, len) => {
                if self.needs(*x) {
                    let (rows, cols) = val(*x).rows_cols();
                    let gx = acc(grads, *x, rows * cols);
                    for r in 0..rows {
                        add_into(
                            &mut gx[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::MeanRows(x) => {
                if self.needs(*x) {
                    let (rows, cols) = val(*x).rows_cols();
                    let gx = acc(grads, *x, rows * cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c] * inv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let n = val(*x).len();
                    for o in acc(grads, *x, n).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::CrossEntropy(logits, targets, mask) => {
                if self.needs(*logits) {
                    let lv = val(*logits);
                    let (rows, cols) = lv.rows_cols();
                    let count = mask.iter().filter(|m| **m).count() as f64;
                    let gl = acc(grads, *logits, rows * cols);
                    for r in 0..rows {
                        if !mask[r] {
                            continue;
                        }
                        let mut p = lv.row(r).to_vec();
                        tensor::softmax_in_place(&mut p);
                        p[targets[r]] -= 1.0;
                        for c in 0..cols {
                            gl[r * cols + c] += g[0] * p[c] / count;
                        }
                    }
                }
            }
            Op::BceWithLogits(logits, targets) => {
                if self.needs(*logits) {
                    let lv = val(*logits).data();
                    let n = lv.len() as f64;
                    let gl = acc(grads, *logits, lv.len());
                    for i in 0..lv.len() {
                        gl[i] += g[0] * (sigmoid(lv[i]) - targets[i]) / n;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradients keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, leaf: Var) -> Result<&Tensor> {
        self.by_leaf.get(&leaf).ok_or(Error::UnknownLeaf(leaf.0))
    }
}

/// Exact reverse-mode gradient of `loss` with respect to one leaf.
pub fn grad_wrt_leaf(tape: &Tape, loss: Var, leaf: Var) -> Result<Tensor> {
    if !tape.is_leaf(leaf) {
        return Err(Error::UnknownLeaf(leaf.0));
    }
    Ok(tape.backward(loss)?.wrt(leaf)?.clone())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn eval<'a>(op: &Op, val: &dyn Fn(Var) -> Result<&'a Tensor>) -> Result<Tensor> {
    match op {
        Op::Leaf | Op::Const => unreachable!("leaves and constants are not evaluated"),
        Op::MatMul(a, b) => tensor::matmul(val(*a)?, val(*b)?),
        Op::MatMulBt(a, b) => {
            let (a, b) = (val(*a)?, val(*b)?);
            let (m, k) = a.rows_cols();
            let (n, k2) = b.rows_cols();
            if a.shape().len() != 2 || b.shape().len() != 2 || k != k2 {
                return Err(Error::shape("matmul_bt", format!("{:?} x {:?}ᵀ", a.shape(), b.shape())));
            }
            let mut out = vec![0.0; m * n];
            matmul_bt_into(a.data(), b.data(), &mut out, m, k, n);
            Tensor::matrix(m, n, out)
        }
        Op::Add(a, b) => {
            let (a, b) = (val(*a)?, val(*b)?);
            same_shape("add", a, b)?;
            Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
        }
        Op::Mul(a, b) => {
            let (a, b) = (val(*a)?, val(*b)?);
            same_shape("mul", a, b)?;
            Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
        }
        Op::AddRow(a, r) => {
            let (a, r) = (val(*a)?, val(*r)?);
            let (_, cols) = a.rows_cols();
            if r.len() != cols {
                return Err(Error::shape("add_row", format!("{:?} + row {:?}", a.shape(), r.shape())));
            }
            let data = a
                .data()
                .chunks(cols)
                .flat_map(|row| row.iter().zip(r.data()).map(|(x, y)| x + y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        }
        Op::Scale(a, c) => Ok(val(*a)?.map(|x| x * c)),
        Op::LayerNorm(x, g, b) => tensor::layer_norm(val(*x)?, val(*g)?, val(*b)?),
        Op::Gelu(x) => Ok(tensor::gelu(val(*x)?)),
        Op::Relu(x) => Ok(val(*x)?.map(|v| v.max(0.0))),
        Op::MaskedSoftmax(x, mask) => {
            let x = val(*x)?;
            let (rows, cols) = x.rows_cols();
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = x.row(r);
                let o = &mut out[r * cols..(r + 1) * cols];
                let mut max = f64::NEG_INFINITY;
                for c in 0..cols {
                    if mask.allows(r, c) {
                        max = max.max(row[c]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::AllMasked);
                }
                let mut sum = 0.0;
                for c in 0..cols {
                    if mask.allows(r, c) {
                        o[c] = (row[c] - max).exp();
                        sum += o[c];
                    }
                }
                for v in o.iter_mut() {
                    *v /= sum;
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
        Op::GatherRows(t, rows) => {
            let t = val(*t)?;
            let (n, cols) = t.rows_cols();
            let mut out = Vec::with_capacity(rows.len() * cols);
            for &r in rows {
                if r >= n {
                    return Err(Error::OutOfRange {
                        what: "gather_rows",
                        index: r,
                        size: n,
                    });
                }
                out.extend_from_slice(t.row(r));
            }
            Tensor::matrix(rows.len(), cols, out)
        }
        Op::Gather(s, idx, shape) => {
            let s = val(*s)?;
            let mut out = Vec::with_capacity(idx.len());
            for ix in idx {
                out.push(match ix {
                    Some(i) => *s.data().get(*i).ok_or(Error::OutOfRange {
                        what: "gather",
                        index: *i,
                        size: s.len(),
                    })?,
                    None => 0.0,
                });
            }
            Tensor::new(shape.clone(), out)
        }
        Op::ConcatRows(parts) => {
            let first = val(*parts.first().ok_or(Error::Empty("concat_rows"))?)?;
            let (_, cols) = first.rows_cols();
            let mut rows = 0;
            let mut out = Vec::new();
            for p in parts {
                let t = val(*p)?;
                let (r, c) = t.rows_cols();
                if c != cols {
                    return Err(Error::shape("concat_rows", format!("{cols} vs {c} columns")));
                }
                rows += r;
                out.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, cols, out)
        }
        Op::ConcatCols(parts) => {
            let first = val(*parts.first().ok_or(Error::Empty("concat_cols"))?)?;
            let (rows, _) = first.rows_cols();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let (r, c) = val(*p)?.rows_cols();
                if r != rows {
                    return Err(Error::shape("concat_cols", format!("{rows} vs {r} rows")));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    out.extend_from_slice(val(*p)?.row(r));
                }
            }
            Tensor::matrix(rows, total, out)
        }
        Op::SliceCols(x, start, len) => {
            let x = val(*x)?;
            let (rows, cols) = x.rows_cols();
            if start + len > cols {
                return Err(Error::shape("slice_cols", format!("{start}+{len} > {cols}")));
            }
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&x.row(r)[*start..start + len]);
            }
            Tensor::matrix(rows, *len, out)
        }
        Op::MeanRows(x) => {
            let x = val(*x)?;
            let (rows, cols) = x.rows_cols();
            if rows == 0 {
                return Err(Error::Empty("mean_rows"));
            }
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                add_into(&mut out, x.row(r));
            }
            for v in out.iter_mut() {
                *v /= rows as f64;
            }
            Tensor::matrix(1, cols, out)
        }
        Op::Sum(x) => Ok(Tensor::scalar(val(*x)?.data().iter().sum())),
        Op::CrossEntropy(logits, targets, mask) => {
            let l = val(*logits)?;
            let (rows, cols) = l.rows_cols();
            if targets.len() != rows || mask.len() != rows {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("{rows} rows, {} targets, {} mask", targets.len(), mask.len()),
                ));
            }
            let mut total = 0.0;
            let mut count = 0usize;
            for r in 0..rows {
                if !mask[r] {
                    continue;
                }
                let t = targets[r];
                if t >= cols {
                    return Err(Error::OutOfRange {
                        what: "cross_entropy target",
                        index: t,
                        size: cols,
                    });
                }
                let row = l.row(r);
                total += tensor::log_sum_exp(row) - row[t];
                count += 1;
            }
            if count == 0 {
                return Err(Error::AllMasked);
            }
            Ok(Tensor::scalar(total / count as f64))
        }
        Op::BceWithLogits(logits, targets) => {
            let l = val(*logits)?;
            if l.len() != targets.len() || l.is_empty() {
                return Err(Error::shape("bce_with_logits", format!("{} logits, {} targets", l.len(), targets.len())));
            }
            let mut total = 0.0;
            for (&z, &y) in l.data().iter().zip(targets) {
                // log(1 + e^z) - y z, stable for either sign of z
                total += z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z;
            }
            Ok(Tensor::scalar(total / l.len() as f64))
        }
    }
}
