//! Reverse-mode autodiff over dense f64 matrices, sized for desk-scale
//! graphs: a flat tape of recorded ops, exact gradients on backward.

use crate::error::{Error, Result};
use std::sync::Arc;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// C = A * B, with optional transpose of B.
    fn matmul(&self, other: &Tensor, trans_b: bool) -> Tensor {
        let (bk, bc) = if trans_b {
            (other.cols, other.rows)
        } else {
            (other.rows, other.cols)
        };
        assert_eq!(self.cols, bk, "matmul inner dimension");
        let mut out = Tensor::zeros(self.rows, bc);
        if trans_b {
            // out[i][j] = sum_k a[i][k] * b[j][k]: rows of B are contiguous.
            for i in 0..self.rows {
                let arow = self.row(i);
                let orow = out.row_mut(i);
                for (j, ov) in orow.iter_mut().enumerate() {
                    let brow = &other.data[j * other.cols..(j + 1) * other.cols];
                    let mut acc = 0.0;
                    for (av, bv) in arow.iter().zip(brow) {
                        acc += av * bv;
                    }
                    *ov = acc;
                }
            }
        } else {
            for i in 0..self.rows {
                let arow = self.row(i);
                let orow = &mut out.data[i * bc..(i + 1) * bc];
                for (k, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &other.data[k * bc..(k + 1) * bc];
                    for (ov, bv) in orow.iter_mut().zip(brow) {
                        *ov += av * bv;
                    }
                }
            }
        }
        out
    }

    /// C = A^T * B.
    fn matmul_ta(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "matmul_ta inner dimension");
        let mut out = Tensor::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let arow = self.row(r);
            let brow = other.row(r);
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (ov, bv) in orow.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
        out
    }
}

pub type VarId = usize;

/// Norm floor for taped row normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: VarId,
        b: VarId,
        trans_b: bool,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Sub {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        c: f64,
    },
    AddRow {
        m: VarId,
        v: VarId,
    },
    Relu {
        x: VarId,
    },
    RowGroupMean {
        x: VarId,
        groups: Arc<Vec<Vec<usize>>>,
    },
    GatherConcat {
        x: VarId,
        pairs: Arc<Vec<(usize, usize)>>,
    },
    AppendCols {
        x: VarId,
    },
    RowL2Normalize {
        x: VarId,
    },
    RowLogSumExp {
        x: VarId,
    },
    Diag {
        x: VarId,
    },
    MeanAll {
        x: VarId,
    },
    CrossEntropyLogits {
        logits: VarId,
        labels: Arc<Vec<u8>>,
        clamp: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Scale { .. } => "scale",
            Op::AddRow { .. } => "add_row",
            Op::Relu { .. } => "relu",
            Op::RowGroupMean { .. } => "row_group_mean",
            Op::GatherConcat { .. } => "gather_concat",
            Op::AppendCols { .. } => "append_cols",
            Op::RowL2Normalize { .. } => "row_l2_normalize",
            Op::RowLogSumExp { .. } => "row_log_sum_exp",
            Op::Diag { .. } => "diag",
            Op::MeanAll { .. } => "mean_all",
            Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
        }
    }
}

/// Recorded computation. Push ops through the builder methods, then call
/// [`Tape::backward`] on a scalar node.
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id]
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Result<VarId> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: self.values.len(),
            });
        }
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        Ok(self.values.len() - 1)
    }

    /// A differentiable leaf (parameter).
    pub fn param(&mut self, value: Tensor) -> Result<VarId> {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable leaf (input data).
    pub fn constant(&mut self, value: Tensor) -> Result<VarId> {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.values[a].matmul(&self.values[b], false);
        let req = self.requires[a] || self.requires[b];
        self.push(v, Op::MatMul { a, b, trans_b: false }, req)
    }

    pub fn matmul_tb(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.values[a].matmul(&self.values[b], true);
        let req = self.requires[a] || self.requires[b];
        self.push(v, Op::MatMul { a, b, trans_b: true }, req)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.values[a], &self.values[b]);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "add shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let v = Tensor::from_vec(va.rows, va.cols, data);
        let req = self.requires[a] || self.requires[b];
        self.push(v, Op::Add { a, b }, req)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.values[a], &self.values[b]);
        assert_eq!((va.rows, va.cols), (vb.rows, vb.cols), "sub shape");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let v = Tensor::from_vec(va.rows, va.cols, data);
        let req = self.requires[a] || self.requires[b];
        self.push(v, Op::Sub { a, b }, req)
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> Result<VarId> {
        let vx = &self.values[x];
        let v = Tensor::from_vec(vx.rows, vx.cols, vx.data.iter().map(|t| t * c).collect());
        let req = self.requires[x];
        self.push(v, Op::Scale { x, c }, req)
    }

    /// Broadcast-add a 1-row vector to every row of a matrix.
    pub fn add_row(&mut self, m: VarId, v: VarId) -> Result<VarId> {
        let (vm, vv) = (&self.values[m], &self.values[v]);
        assert_eq!(vv.rows, 1, "add_row needs a row vector");
        assert_eq!(vm.cols, vv.cols, "add_row width");
        let mut out = vm.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&vv.data) {
                *o += b;
            }
        }
        let req = self.requires[m] || self.requires[v];
        self.push(out, Op::AddRow { m, v }, req)
    }

    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let vx = &self.values[x];
        let v = Tensor::from_vec(
            vx.rows,
            vx.cols,
            vx.data.iter().map(|t| t.max(0.0)).collect(),
        );
        let req = self.requires[x];
        self.push(v, Op::Relu { x }, req)
    }

    /// Row g of the output is the mean of `x`'s rows listed in `groups[g]`.
    pub fn row_group_mean(&mut self, x: VarId, groups: Arc<Vec<Vec<usize>>>) -> Result<VarId> {
        let vx = &self.values[x];
        let mut out = Tensor::zeros(groups.len(), vx.cols);
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "empty row group");
            let scale = 1.0 / members.len() as f64;
            let orow = out.row_mut(g);
            for &r in members {
                for (o, v) in orow.iter_mut().zip(vx.row(r)) {
                    *o += v * scale;
                }
            }
        }
        let req = self.requires[x];
        self.push(out, Op::RowGroupMean { x, groups }, req)
    }

    /// Row p of the output is `[x[i] ‖ x[j] ‖ extra[p]]` for pairs[p] = (i, j).
    pub fn gather_concat(
        &mut self,
        x: VarId,
        pairs: Arc<Vec<(usize, usize)>>,
        extra: Arc<Tensor>,
    ) -> Result<VarId> {
        let vx = &self.values[x];
        assert_eq!(extra.rows, pairs.len(), "extra rows = pair count");
        let d = vx.cols;
        let width = 2 * d + extra.cols;
        let mut out = Tensor::zeros(pairs.len(), width);
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let orow = out.row_mut(p);
            orow[..d].copy_from_slice(vx.row(i));
            orow[d..2 * d].copy_from_slice(vx.row(j));
            orow[2 * d..].copy_from_slice(extra.row(p));
        }
        let req = self.requires[x];
        self.push(out, Op::GatherConcat { x, pairs }, req)
    }

    /// Append constant columns (one row per input row).
    pub fn append_cols(&mut self, x: VarId, cols: Arc<Tensor>) -> Result<VarId> {
        let vx = &self.values[x];
        assert_eq!(vx.rows, cols.rows, "append_cols row count");
        let width = vx.cols + cols.cols;
        let mut out = Tensor::zeros(vx.rows, width);
        for r in 0..vx.rows {
            let orow = out.row_mut(r);
            orow[..vx.cols].copy_from_slice(vx.row(r));
            orow[vx.cols..].copy_from_slice(cols.row(r));
        }
        let req = self.requires[x];
        self.push(out, Op::AppendCols { x }, req)
    }

    /// Normalize each row to unit Euclidean length, with the norm floored at
    /// `NORM_EPS` so rows that die under ReLU scale toward zero instead of
    /// dividing by zero.
    pub fn row_l2_normalize(&mut self, x: VarId) -> Result<VarId> {
        let vx = &self.values[x];
        let mut out = vx.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let req = self.requires[x];
        self.push(out, Op::RowL2Normalize { x }, req)
    }

    /// Per-row log(sum(exp(x))), returned as an n×1 column.
    pub fn row_log_sum_exp(&mut self, x: VarId) -> Result<VarId> {
        let vx = &self.values[x];
        let mut out = Tensor::zeros(vx.rows, 1);
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            out.data[r] = mx + s.ln();
        }
        let req = self.requires[x];
        self.push(out, Op::RowLogSumExp { x }, req)
    }

    /// Main diagonal of a square matrix as an n×1 column.
    pub fn diag(&mut self, x: VarId) -> Result<VarId> {
        let vx = &self.values[x];
        assert_eq!(vx.rows, vx.cols, "diag needs a square matrix");
        let mut out = Tensor::zeros(vx.rows, 1);
        for r in 0..vx.rows {
            out.data[r] = vx.get(r, r);
        }
        let req = self.requires[x];
        self.push(out, Op::Diag { x }, req)
    }

    /// Mean over all entries, as a 1×1 scalar.
    pub fn mean_all(&mut self, x: VarId) -> Result<VarId> {
        let vx = &self.values[x];
        let n = (vx.rows * vx.cols) as f64;
        let v = Tensor::scalar(vx.data.iter().sum::<f64>() / n);
        let req = self.requires[x];
        self.push(v, Op::MeanAll { x }, req)
    }

    /// Mean two-class cross entropy from logits with probability clamping.
    /// `labels[i]` selects the target column of row i.
    pub fn cross_entropy_logits(
        &mut self,
        logits: VarId,
        labels: Arc<Vec<u8>>,
        clamp: f64,
    ) -> Result<VarId> {
        let vx = &self.values[logits];
        assert_eq!(vx.rows, labels.len(), "one label per row");
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let p = softmax_row(vx.row(r));
            let py = p[y as usize].clamp(clamp, 1.0 - clamp);
            total -= py.ln();
        }
        let v = Tensor::scalar(total / labels.len() as f64);
        let req = self.requires[logits];
        self.push(v, Op::CrossEntropyLogits { logits, labels, clamp }, req)
    }

    /// Reverse pass from a scalar node. Returns one gradient slot per node;
    /// only nodes that require grad are populated.
    pub fn backward(&mut self, loss: VarId) -> Result<Vec<Option<Tensor>>> {
        let lv = &self.values[loss];
        if !lv.is_scalar() {
            return Err(Error::LossNotScalar {
                rows: lv.rows,
                cols: lv.cols,
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            if !self.requires[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    op: self.ops[id].name(),
                    node: id,
                });
            }
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, id: VarId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |slot: &mut Option<Tensor>, delta: Tensor| match slot {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(&delta.data) {
                    *a += b;
                }
            }
            None => *slot = Some(delta),
        };
        match &self.ops[id] {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (&self.values[*a], &self.values[*b]);
                if *trans_b {
                    // C = A B^T: dA = dC B ; dB = dC^T A
                    if self.requires[*a] {
                        add_to(&mut grads[*a], g.matmul(vb, false));
                    }
                    if self.requires[*b] {
                        add_to(&mut grads[*b], g.matmul_ta(va));
                    }
                } else {
                    // C = A B: dA = dC B^T ; dB = A^T dC
                    if self.requires[*a] {
                        add_to(&mut grads[*a], g.matmul(vb, true));
                    }
                    if self.requires[*b] {
                        add_to(&mut grads[*b], va.matmul_ta(g));
                    }
                }
            }
            Op::Add { a, b } => {
                if self.requires[*a] {
                    add_to(&mut grads[*a], g.clone());
                }
                if self.requires[*b] {
                    add_to(&mut grads[*b], g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.requires[*a] {
                    add_to(&mut grads[*a], g.clone());
                }
                if self.requires[*b] {
                    let neg = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|v| -v).collect());
                    add_to(&mut grads[*b], neg);
                }
            }
            Op::Scale { x, c } => {
                if self.requires[*x] {
                    let d = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * c).collect());
                    add_to(&mut grads[*x], d);
                }
            }
            Op::AddRow { m, v } => {
                if self.requires[*m] {
                    add_to(&mut grads[*m], g.clone());
                }
                if self.requires[*v] {
                    let mut d = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, gv) in d.data.iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    add_to(&mut grads[*v], d);
                }
            }
            Op::Relu { x } => {
                if self.requires[*x] {
                    let vx = &self.values[*x];
                    let data = vx
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(v, gv)| if *v > 0.0 { *gv } else { 0.0 })
                        .collect();
                    add_to(&mut grads[*x], Tensor::from_vec(g.rows, g.cols, data));
                }
            }
            Op::RowGroupMean { x, groups } => {
                if self.requires[*x] {
                    let vx = &self.values[*x];
                    let mut d = Tensor::zeros(vx.rows, vx.cols);
                    for (gi, members) in groups.iter().enumerate() {
                        let scale = 1.0 / members.len() as f64;
                        for &r in members {
                            for (o, gv) in d.row_mut(r).iter_mut().zip(g.row(gi)) {
                                *o += gv * scale;
                            }
                        }
                    }
                    add_to(&mut grads[*x], d);
                }
            }
            Op::GatherConcat { x, pairs } => {
                if self.requires[*x] {
                    let vx = &self.values[*x];
                    let dcols = vx.cols;
                    let mut d = Tensor::zeros(vx.rows, vx.cols);
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        let grow = g.row(p);
                        for (o, gv) in d.row_mut(i).iter_mut().zip(&grow[..dcols]) {
                            *o += gv;
                        }
                        for (o, gv) in d.row_mut(j).iter_mut().zip(&grow[dcols..2 * dcols]) {
                            *o += gv;
                        }
                    }
                    add_to(&mut grads[*x], d);
                }
            }
            Op::AppendCols { x } => {
                if self.requires[*x] {
                    let vx = &self.values[*x];
                    let mut d = Tensor::zeros(vx.rows, vx.cols);
                    for r in 0..vx.rows {
                        d.row_mut(r).copy_from_slice(&g.row(r)[..vx.cols]);
                    }
                    add_to(&mut grads[*x], d);
                }
            }
            Op::RowL2Normalize { x } => {
                if self.requires[*x] {
                    let vx = &self.values[*x];
                    let vy = &self.values[id];
                    let mut d = Tensor::zeros(vx.rows, vx.cols);
                    for r in 0..vx.rows {
                        let norm = vx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let y = vy.row(r);
                        let gr = g.row(r);
                        if norm > NORM_EPS {
                            let ydotg: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(y).zip(gr) {
                                *o = (gv - yv * ydotg) / norm;
                            }
                        } else {
                            // Below the floor the map is linear: y = x / eps.
                            for (o, &gv) in d.row_mut(r).iter_mut().zip(gr) {
                                *o = gv / NORM_EPS;
                            }
                        }
                    }
                    add_to(&mut grads[*x], d);
                }
            }
            Op::RowLogSumExp { x } => {
                if self.requires[*x] {
                    let vx = &self.values[*x];
                    let mut d = Tensor::zeros(vx.rows, vx.cols);
                    for r in 0..vx.rows {
                        let p = softmax_row(vx.row(r));
                        let gv = g.data[r];
                        for (o, pv) in d.row_mut(r).iter_mut().zip(&p) {
                            *o = gv * pv;
                        }
                    }
                    add_to(&mut grads[*x], d);
                }
            }
            Op::Diag { x } => {
                if self.requires[*x] {
                    let vx = &self.values[*x];
                    let mut d = Tensor::zeros(vx.rows, vx.cols);
                    for r in 0..vx.rows {
                        d.set(r, r, g.data[r]);
                    }
                    add_to(&mut grads[*x], d);
                }
            }
            Op::MeanAll { x } => {
                if self.requires[*x] {
                    let vx = &self.values[*x];
                    let s = g.scalar_value() / (vx.rows * vx.cols) as f64;
                    add_to(
                        &mut grads[*x],
                        Tensor::from_vec(vx.rows, vx.cols, vec![s; vx.rows * vx.cols]),
                    );
                }
            }
            Op::CrossEntropyLogits {
                logits,
                labels,
                clamp,
            } => {
                if self.requires[*logits] {
                    let vx = &self.values[*logits];
                    let n = labels.len() as f64;
                    let gs = g.scalar_value();
                    let mut d = Tensor::zeros(vx.rows, vx.cols);
                    for (r, &y) in labels.iter().enumerate() {
                        let p = softmax_row(vx.row(r));
                        let py = p[y as usize];
                        // Inside the clamp the loss is constant, so no gradient.
                        if py <= *clamp || py >= 1.0 - *clamp {
                            continue;
                        }
                        for (c, (o, pv)) in d.row_mut(r).iter_mut().zip(&p).enumerate() {
                            let onehot = if c == y as usize { 1.0 } else { 0.0 };
                            *o = gs * (pv - onehot) / n;
                        }
                    }
                    add_to(&mut grads[*logits], d);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` w.r.t. the entries of `x0`.
    fn finite_diff(
        x0: &Tensor,
        eps: f64,
        mut f: impl FnMut(&Tensor) -> f64,
    ) -> Tensor {
        let mut g = Tensor::zeros(x0.rows, x0.cols);
        for i in 0..x0.data.len() {
            let mut plus = x0.clone();
            plus.data[i] += eps;
            let mut minus = x0.clone();
            minus.data[i] -= eps;
            g.data[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        g
    }

    fn assert_close(analytic: &Tensor, numeric: &Tensor, tol: f64, what: &str) {
        for (a, n) in analytic.data.iter().zip(&numeric.data) {
            let denom = a.abs().max(n.abs()).max(1.0);
            assert!(
                (a - n).abs() / denom < tol,
                "{what}: analytic {a} vs numeric {n}"
            );
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = rand_tensor(&mut rng, 3, 4);
        let b0 = rand_tensor(&mut rng, 4, 2);
        let run = |a: &Tensor, b: &Tensor| {
            let mut t = Tape::new();
            let av = t.param(a.clone()).unwrap();
            let bv = t.param(b.clone()).unwrap();
            let c = t.matmul(av, bv).unwrap();
            let l = t.mean_all(c).unwrap();
            (t, av, bv, l)
        };
        let (mut tape, av, bv, l) = run(&a0, &b0);
        let grads = tape.backward(l).unwrap();
        let na = finite_diff(&a0, 1e-5, |a| {
            let (mut t, _, _, l) = run(a, &b0);
            let _ = t.backward(l);
            t.value(l).scalar_value()
        });
        let nb = finite_diff(&b0, 1e-5, |b| {
            let (t, _, _, l) = run(&a0, b);
            t.value(l).scalar_value()
        });
        assert_close(grads[av].as_ref().unwrap(), &na, 1e-6, "matmul dA");
        assert_close(grads[bv].as_ref().unwrap(), &nb, 1e-6, "matmul dB");
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // Exercises matmul_tb, add_row, relu, group mean, gather_concat,
        // normalize, logsumexp, diag, sub, scale, mean in one expression.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_tensor(&mut rng, 5, 3);
        let w0 = rand_tensor(&mut rng, 3, 4);
        let b0 = rand_tensor(&mut rng, 1, 4);
        let groups = Arc::new(vec![vec![0, 1], vec![1, 2, 3], vec![4]]);
        let pairs = Arc::new(vec![(0, 1), (1, 2), (2, 0)]);
        let extra = Arc::new(rand_tensor(&mut rng, 3, 2));
        let teacher = rand_tensor(&mut rng, 3, 10);

        let run = |x: &Tensor, w: &Tensor, b: &Tensor| -> (Tape, VarId, VarId, VarId, VarId) {
            let mut t = Tape::new();
            let xv = t.param(x.clone()).unwrap();
            let wv = t.param(w.clone()).unwrap();
            let bv = t.param(b.clone()).unwrap();
            let h = t.matmul(xv, wv).unwrap();
            let h = t.add_row(h, bv).unwrap();
            let h = t.relu(h).unwrap();
            let gm = t.row_group_mean(h, groups.clone()).unwrap();
            let gc = t.gather_concat(gm, pairs.clone(), extra.clone()).unwrap();
            let nm = t.row_l2_normalize(gc).unwrap();
            let tv = t.constant(teacher.clone()).unwrap();
            let tn = t.row_l2_normalize(tv).unwrap();
            let sims = t.matmul_tb(tn, nm).unwrap();
            let sims = t.scale(sims, 2.0).unwrap();
            let lse = t.row_log_sum_exp(sims).unwrap();
            let dg = t.diag(sims).unwrap();
            let per = t.sub(lse, dg).unwrap();
            let l = t.mean_all(per).unwrap();
            (t, xv, wv, bv, l)
        };

        let (mut tape, xv, wv, bv, l) = run(&x0, &w0, &b0);
        let grads = tape.backward(l).unwrap();
        let eval = |x: &Tensor, w: &Tensor, b: &Tensor| {
            let (t, _, _, _, l) = run(x, w, b);
            t.value(l).scalar_value()
        };
        let nx = finite_diff(&x0, 1e-5, |x| eval(x, &w0, &b0));
        let nw = finite_diff(&w0, 1e-5, |w| eval(&x0, w, &b0));
        let nb = finite_diff(&b0, 1e-5, |b| eval(&x0, &w0, b));
        assert_close(grads[xv].as_ref().unwrap(), &nx, 1e-5, "composite dX");
        assert_close(grads[wv].as_ref().unwrap(), &nw, 1e-5, "composite dW");
        assert_close(grads[bv].as_ref().unwrap(), &nb, 1e-5, "composite dB");
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits0 = rand_tensor(&mut rng, 6, 2);
        let labels = Arc::new(vec![0u8, 1, 1, 0, 1, 0]);
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let xv = t.param(x.clone()).unwrap();
            let l = t.cross_entropy_logits(xv, labels.clone(), 1e-12).unwrap();
            (t, xv, l)
        };
        let (mut tape, xv, l) = run(&logits0);
        let grads = tape.backward(l).unwrap();
        let n = finite_diff(&logits0, 1e-6, |x| {
            let (t, _, l) = run(x);
            t.value(l).scalar_value()
        });
        assert_close(grads[xv].as_ref().unwrap(), &n, 1e-6, "xent dlogits");
    }

    #[test]
    fn append_cols_gradient_flows_left_only() {
        let x0 = Tensor::from_vec(2, 2, vec![0.3, -0.2, 0.5, 0.1]);
        let extra = Arc::new(Tensor::from_vec(2, 1, vec![9.0, -9.0]));
        let mut t = Tape::new();
        let xv = t.param(x0.clone()).unwrap();
        let ap = t.append_cols(xv, extra).unwrap();
        let l = t.mean_all(ap).unwrap();
        let grads = t.backward(l).unwrap();
        let gx = grads[xv].as_ref().unwrap();
        for v in &gx.data {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_terms_double_the_gradient() {
        let x0 = Tensor::from_vec(2, 2, vec![0.4, -0.7, 0.2, 0.9]);
        let single = {
            let mut t = Tape::new();
            let xv = t.param(x0.clone()).unwrap();
            let l = t.mean_all(xv).unwrap();
            let g = t.backward(l).unwrap();
            g[xv].clone().unwrap()
        };
        let double = {
            let mut t = Tape::new();
            let xv = t.param(x0.clone()).unwrap();
            let l1 = t.mean_all(xv).unwrap();
            let l2 = t.mean_all(xv).unwrap();
            let l = t.add(l1, l2).unwrap();
            let g = t.backward(l).unwrap();
            g[xv].clone().unwrap()
        };
        for (s, d) in single.data.iter().zip(&double.data) {
            assert_eq!(*d, 2.0 * s);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(
            t.backward(x),
            Err(Error::LossNotScalar { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn forward_rejects_non_finite() {
        let mut t = Tape::new();
        let a = t.param(Tensor::from_vec(1, 1, vec![1e308])).unwrap();
        let b = t.param(Tensor::from_vec(1, 1, vec![1e308])).unwrap();
        let err = t.add(a, b).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "add", .. }));
    }

    #[test]
    fn zero_loss_region_gives_zero_gradients() {
        // relu of strictly negative inputs: output identically zero nearby.
        let x0 = Tensor::from_vec(2, 2, vec![-1.0, -2.0, -0.5, -3.0]);
        let mut t = Tape::new();
        let xv = t.param(x0).unwrap();
        let r = t.relu(xv).unwrap();
        let l = t.mean_all(r).unwrap();
        let grads = t.backward(l).unwrap();
        assert!(grads[xv].as_ref().unwrap().data.iter().all(|v| *v == 0.0));
    }
}
