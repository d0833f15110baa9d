//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value, so node indices
//! are already a topological order and backward is a single reverse sweep.

use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedMeanPool {
        input: Var,
        mask: Vec<bool>,
        count: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for a single backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims(a, "transpose")?;
        let value = self.value(a).transpose();
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scaled(factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.len() != n {
            return Err(shape_err(
                "add_row",
                format!("{:?} + bias {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::Relu(a), &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax_rows(a, None)
    }

    /// Row-wise softmax where entries with `allowed[i] == false` are treated
    /// as −∞: they receive probability exactly 0 and no gradient.
    pub fn masked_softmax_rows(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        if let Some(mask) = allowed {
            if mask.len() != t.len() {
                return Err(shape_err(
                    "softmax",
                    format!("mask of {} for {:?}", mask.len(), t.shape()),
                ));
            }
        }
        let mut data = vec![0.0; t.len()];
        for (r, (row, out)) in t.data().chunks(n).zip(data.chunks_mut(n)).enumerate() {
            let keep = |j: usize| allowed.is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyMask);
            }
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    out[j] = (row[j] - max).exp();
                    total += out[j];
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Per-row `(x − mean)/sqrt(var + eps) · gain + bias`, biased variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err(
                "layer_norm",
                format!("input {:?} with gain/bias of other width", t.shape()),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(t.rows());
        let mut out = vec![0.0; t.len()];
        for (r, row) in t.data().chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Mean of the rows of a `T×d` matrix whose mask entry is set; returns shape `[d]`.
    pub fn masked_mean_pool(&mut self, h: Var, mask: &[bool]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(h, "masked_mean_pool")?;
        if mask.len() != rows {
            return Err(shape_err(
                "masked_mean_pool",
                format!("mask of {} for {rows} rows", mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let t = self.value(h);
        let mut out = vec![0.0; cols];
        for (row, _) in t.data().chunks(cols).zip(mask).filter(|(_, &m)| m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        let value = Tensor::vector(out)?;
        Ok(self.push(
            value,
            Op::MaskedMeanPool {
                input: h,
                mask: mask.to_vec(),
                count,
            },
            &[h],
        ))
    }

    /// Stacks `table[ids[t]]` into a `T×d` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::IdOutOfRange { id, vocab: rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput)?;
        let rows = self.matrix_dims(first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("row counts {rows} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput)?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", format!("widths {cols} and {}", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::Sum(a), &[a])
    }

    /// Weighted cross-entropy over the rows of an `N×C` logit matrix:
    /// `−(1/N)·Σᵢ w[yᵢ]·log softmax(logitsᵢ)[yᵢ]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (n, c) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if targets.len() != n || weights.len() != c {
            return Err(shape_err(
                "cross_entropy",
                format!("{n}×{c} logits, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let t = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, row) in t.data().chunks(c).enumerate() {
            let y = targets[i];
            if y >= c {
                return Err(shape_err("cross_entropy", format!("target {y} for {c} classes")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            loss -= weights[y] * (row[y] - lse);
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Propagates d(loss)/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad matches value shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            requires: self
                .nodes
                .iter()
                .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
                .collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(da) = self.slot(grads, *a) {
                    matmul_bt_into(g, tb.data(), da, m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    matmul_at_into(ta.data(), g, db, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            da[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        axpy(d, g, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(a, factor) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, g, *factor);
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, g, 1.0);
                }
                let n = node.value.cols();
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        axpy(db, row, 1.0);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, gv), xv) in da.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                if let Some(da) = self.slot(grads, *a) {
                    for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gv = self.value(*gain).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] += inv / n as f64 * (n as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for gr in g.chunks(n) {
                        axpy(db, gr, 1.0);
                    }
                }
            }
            Op::MaskedMeanPool { input, mask, count } => {
                let n = g.len();
                if let Some(dh) = self.slot(grads, *input) {
                    let scale = 1.0 / *count as f64;
                    for (row, _) in dh.chunks_mut(n).zip(mask).filter(|(_, &m)| m) {
                        axpy(row, g, scale);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let n = node.value.cols();
                if let Some(dt) = self.slot(grads, *table) {
                    for (t, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * n..(id + 1) * n], &g[t * n..(t + 1) * n], 1.0);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(dp) = self.slot(grads, *p) {
                        for (r, row) in dp.chunks_mut(w).enumerate() {
                            axpy(row, &g[r * total + offset..r * total + offset + w], 1.0);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(dp) = self.slot(grads, *p) {
                        axpy(dp, &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::Reshape(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    axpy(da, g, 1.0);
                }
            }
            Op::Sum(a) => {
                if let Some(da) = self.slot(grads, *a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = weights.len();
                let n = targets.len() as f64;
                if let Some(dl) = self.slot(grads, *logits) {
                    for (i, &y) in targets.iter().enumerate() {
                        let coef = g[0] * weights[y] / n;
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[i * c + j] += coef * (probs[i * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    requires: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a leaf that requires one; zeros if the loss does not
    /// depend on it, `None` for constants and intermediate nodes.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        if !self.requires[v.0] {
            return None;
        }
        Some(
            self.grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone())),
        )
    }

    /// Whether backward actually reached this leaf.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if !self.requires[v.0] {
            return None;
        }
        Some(
            self.grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone())),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

        let i = tape.constant(Tensor::identity(2));
        let ai = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(ai), tape.value(a));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn sum_of_product_gradient_is_ones_times_bt() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap(), true);
        let b = tape.leaf(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap(), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        // ones(2×2)·Bᵀ: row sums of B in each column
        assert_eq!(g.wrt(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        // Aᵀ·ones: column sums of A in each row
        assert_eq!(g.wrt(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_rows_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[0.0, 0.0], &[3f64.ln(), 0.0], &[5.0, 5.0]]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        assert!(close(tape.value(y).data(), &[0.5, 0.5, 0.75, 0.25, 0.5, 0.5], 1e-15));
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1000.0, 999.0]]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_zeroes_blocked_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap(), true);
        let y = tape.masked_softmax_rows(x, Some(&[true, false, true])).unwrap();
        assert_eq!(tape.value(y).data()[1], 0.0);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        assert_eq!(
            tape.masked_softmax_rows(x, Some(&[false, false])).unwrap_err(),
            Error::EmptyMask
        );
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap(), true);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let yy = tape.relu(y);
        assert_eq!(tape.value(yy), tape.value(y));
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn masked_mean_pool_examples() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap(), true);
        let p = tape.masked_mean_pool(h, &[true, true]).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 3.0]);

        let h2 = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[9.0, 9.0]]).unwrap(), true);
        let p2 = tape.masked_mean_pool(h2, &[true, false]).unwrap();
        assert_eq!(tape.value(p2).data(), &[1.0, 2.0]);
        let s = tape.sum(p2);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(h2).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);

        assert_eq!(tape.masked_mean_pool(h, &[false, false]).unwrap_err(), Error::EmptyMask);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[3.0, 3.0, 3.0], &[1.0, -1.0, 0.0]]).unwrap());
        let g = tape.constant(Tensor::ones(vec![3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).row(0).iter().all(|v| v.abs() < 1e-12));

        let x = tape.constant(Tensor::from_rows(&[&[1.0, -1.0]]).unwrap());
        let g = tape.constant(Tensor::ones(vec![2]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(close(tape.value(y).data(), &[1.0, -1.0], 1e-9));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap(), true);
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.5), true);
        let xx = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(xx).unwrap().wrt(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert_eq!(tape.backward(x).unwrap_err(), Error::NotScalar(vec![2]));
    }

    #[test]
    fn unreachable_leaves_get_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
        let unused = tape.leaf(Tensor::vector(vec![5.0]).unwrap(), true);
        let c = tape.constant(Tensor::vector(vec![1.0]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused).unwrap().data(), &[0.0]);
        assert!(!g.reached(unused));
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn reused_leaf_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
        let a = tape.scale(x, 2.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_rows(&[&[0.0, 0.0]]).unwrap());
        let l = tape.cross_entropy(z, &[1], &[1.0, 1.0]).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        let l2 = tape.cross_entropy(z, &[1], &[1.0, 2.0]).unwrap();
        assert!((tape.value(l2).data()[0] - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(tape.cross_entropy(z, &[], &[1.0, 1.0]).unwrap_err(), Error::EmptyBatch);
    }
}
