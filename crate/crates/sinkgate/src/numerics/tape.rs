//! Reverse-mode autodiff over a linear tape.
//!
//! Every primitive executed in a forward pass is recorded in execution order;
//! `backward` replays the tape in exact reverse order. Leaves are inserted
//! with an explicit trainable flag; frozen leaves may carry pass-through
//! gradients internally but never surface a parameter update.
//!
//! The op set is deliberately small: exactly what a decoder-only transformer
//! with key scaling, gating MLPs, and a next-token-prediction loss needs.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{softmax_in_place, Tensor};

/// Handle to a node on a `Tape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[m x n] + [n]` broadcast over rows.
    AddRowBroadcast(Var, Var),
    ScaleConst(Var, f64),
    /// Row `i` of `x` scaled by `s[i]`; `s` is a length-m vector.
    RowScale(Var, Var),
    Relu(Var),
    /// Row-wise softmax restricted to `mask` (false entries get exactly 0).
    MaskedSoftmaxRows(Var, Rc<Vec<bool>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    MeanRows(Var),
    Sum(Var),
    /// Rows of `table` selected by token ids.
    Gather(Var, Rc<Vec<usize>>),
    /// Constant vector `mask` scaled by a one-element node.
    MaskScale(Rc<Vec<f64>>, Var),
    /// Sum of `-log softmax(logits[row])[target]` over (row, target) pairs.
    CrossEntropyRows(Var, Rc<Vec<(usize, usize)>>),
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
}

/// Ordered record of primitive ops executed in a forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn eval() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, trainable: bool) -> Var {
        let needs_grad = self.grad_enabled
            && (trainable
                || self
                    .op_parents(&op)
                    .iter()
                    .any(|p| self.nodes[p.0].needs_grad));
        self.nodes.push(Node { value, op, trainable, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn op_parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRowBroadcast(a, b) | Op::RowScale(a, b) => {
                vec![*a, *b]
            }
            Op::ScaleConst(a, _)
            | Op::Relu(a)
            | Op::MaskedSoftmaxRows(a, _)
            | Op::Transpose(a)
            | Op::SliceCols { x: a, .. }
            | Op::SliceRows { x: a, .. }
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Gather(a, _)
            | Op::MaskScale(_, a)
            | Op::CrossEntropyRows(a, _) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn trainable_leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), false))
    }

    /// `x: [m x n]` plus a length-n bias broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let n = xv.cols();
        if bv.numel() != n {
            return Err(Error::ShapeMismatch(format!(
                "bias broadcast: cols {} vs bias {}",
                n,
                bv.numel()
            )));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRowBroadcast(x, bias), false))
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).scale(c);
        self.push(v, Op::ScaleConst(x, c), false)
    }

    /// Multiply row i of `x` by `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(s);
        if sv.numel() != xv.rows() {
            return Err(Error::ShapeMismatch(format!(
                "row_scale: {} rows vs {} coefficients",
                xv.rows(),
                sv.numel()
            )));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let c = sv.data()[i];
            for o in out.row_mut(i) {
                *o *= c;
            }
        }
        Ok(self.push(out, Op::RowScale(x, s), false))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for o in v.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        self.push(v, Op::Relu(x), false)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let numel = self.value(x).numel();
        self.masked_softmax_rows(x, Rc::new(vec![true; numel]))
    }

    pub fn masked_softmax_rows(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let xv = self.value(x);
        xv.check_finite("softmax input")?;
        if mask.len() != xv.numel() {
            return Err(Error::ShapeMismatch("softmax mask size".into()));
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for i in 0..out.rows() {
            let m = &mask[i * n..(i + 1) * n];
            let row = out.row_mut(i);
            masked_softmax_in_place(row, m);
        }
        Ok(self.push(out, Op::MaskedSoftmaxRows(x, mask), false))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = crate::numerics::tensor::layernorm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            eps,
        )?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, eps }, false))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x), false)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(vec![m, total]);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != m {
                return Err(Error::ShapeMismatch("concat_cols row mismatch".into()));
            }
            let w = pv.cols();
            for i in 0..m {
                out.row_mut(i)[off..off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), false))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::ShapeMismatch("slice_cols out of range".into()));
        }
        let m = xv.rows();
        let mut out = Tensor::zeros(vec![m, len]);
        for i in 0..m {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start, len }, false))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut data = Vec::with_capacity(total * n);
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != n {
                return Err(Error::ShapeMismatch("concat_rows col mismatch".into()));
            }
            data.extend_from_slice(pv.data());
        }
        let out = Tensor::new(vec![total, n], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), false))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(Error::ShapeMismatch("slice_rows out of range".into()));
        }
        let n = xv.cols();
        let data = xv.data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        Ok(self.push(out, Op::SliceRows { x, start, len }, false))
    }

    /// Mean over rows: `[m x n] -> [1 x n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(vec![1, n]);
        for i in 0..m {
            for (o, &v) in out.row_mut(0).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        for o in out.data_mut() {
            *o /= m as f64;
        }
        self.push(out, Op::MeanRows(x), false)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), false)
    }

    pub fn gather(&mut self, table: Var, ids: Rc<Vec<usize>>) -> Result<Var> {
        let tv = self.value(table);
        let n = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids.iter() {
            if id >= tv.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "gather: id {} out of {} rows",
                    id,
                    tv.rows()
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        Ok(self.push(out, Op::Gather(table, ids), false))
    }

    /// Constant vector scaled by a one-element node: `mask * scalar`.
    pub fn mask_scale(&mut self, mask: Rc<Vec<f64>>, scalar: Var) -> Result<Var> {
        let sv = self.value(scalar);
        if sv.numel() != 1 {
            return Err(Error::ShapeMismatch("mask_scale expects a one-element node".into()));
        }
        let c = sv.data()[0];
        let out = Tensor::new(vec![mask.len()], mask.iter().map(|m| m * c).collect())?;
        Ok(self.push(out, Op::MaskScale(mask, scalar), false))
    }

    /// Summed next-token-prediction loss over (row, target) pairs of a logit
    /// matrix. Returns a scalar node.
    pub fn cross_entropy_rows(&mut self, logits: Var, pairs: Rc<Vec<(usize, usize)>>) -> Result<Var> {
        let lv = self.value(logits);
        lv.check_finite("cross_entropy logits")?;
        let n = lv.cols();
        let mut loss = 0.0;
        for &(row, target) in pairs.iter() {
            if row >= lv.rows() || target >= n {
                return Err(Error::ShapeMismatch("cross_entropy index out of range".into()));
            }
            let r = lv.row(row);
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logz = r.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += logz - r[target];
        }
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropyRows(logits, pairs), false))
    }

    /// Reverse pass from a scalar `loss` node. Returns one gradient slot per
    /// node; only trainable leaves are populated (frozen leaves carry
    /// pass-through gradients internally but are not materialized).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Invariant("backward on an eval-mode tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Invariant("loss node is not on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Invariant("loss must be a scalar node".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            // keep gradients only for trainable leaves
            if matches!(self.nodes[idx].op, Op::Leaf) && self.nodes[idx].trainable {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, delta: Tensor) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.nodes[a.0].needs_grad {
                    let da = g.matmul(&bv.transpose()).expect("matmul backward");
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = av.transpose().matmul(g).expect("matmul backward");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRowBroadcast(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let n = g.cols();
                    let mut db = Tensor::zeros(vec![n]);
                    for i in 0..g.rows() {
                        for (o, &v) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::ScaleConst(x, c) => self.accumulate(grads, *x, g.scale(*c)),
            Op::RowScale(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                if self.nodes[x.0].needs_grad {
                    let mut dx = g.clone();
                    for i in 0..dx.rows() {
                        let c = sv.data()[i];
                        for o in dx.row_mut(i) {
                            *o *= c;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.nodes[s.0].needs_grad {
                    let mut ds = Tensor::zeros(vec![sv.numel()]);
                    for i in 0..xv.rows() {
                        ds.data_mut()[i] =
                            g.row(i).iter().zip(xv.row(i)).map(|(a, b)| a * b).sum();
                    }
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (o, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if v <= 0.0 {
                        *o = 0.0;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaskedSoftmaxRows(x, _mask) => {
                let y = &node.value;
                let mut dx = g.clone();
                let n = y.cols();
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let dot: f64 = dx.row(i).iter().zip(yr).map(|(a, b)| a * b).sum();
                    let row = dx.row_mut(i);
                    for j in 0..n {
                        row[j] = yr[j] * (row[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let d = xv.cols();
                let df = d as f64;
                let mut dx = Tensor::zeros(vec![xv.rows(), d]);
                let mut dgamma = Tensor::zeros(vec![d]);
                let mut dbeta = Tensor::zeros(vec![d]);
                for i in 0..xv.rows() {
                    let row = xv.row(i);
                    let gr = g.row(i);
                    let mean = row.iter().sum::<f64>() / df;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                    if var < *eps {
                        // output is beta: gradient flows to beta only
                        for (o, &v) in dbeta.data_mut().iter_mut().zip(gr) {
                            *o += v;
                        }
                        continue;
                    }
                    let inv = 1.0 / (var + eps).sqrt();
                    // x_hat and the two row means needed for dx
                    let mut mean_gg = 0.0;
                    let mut mean_ggx = 0.0;
                    let mut xhat = vec![0.0; d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv;
                        let gg = gr[j] * gv.data()[j];
                        mean_gg += gg;
                        mean_ggx += gg * xhat[j];
                    }
                    mean_gg /= df;
                    mean_ggx /= df;
                    for j in 0..d {
                        let gg = gr[j] * gv.data()[j];
                        dx.row_mut(i)[j] = (gg - mean_gg - xhat[j] * mean_ggx) * inv;
                        dgamma.data_mut()[j] += gr[j] * xhat[j];
                        dbeta.data_mut()[j] += gr[j];
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let m = g.rows();
                        let mut dp = Tensor::zeros(vec![m, w]);
                        for i in 0..m {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(vec![xv.rows(), xv.cols()]);
                for i in 0..xv.rows() {
                    dx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                let n = g.cols();
                for &p in parts {
                    let m = self.value(p).rows();
                    if self.nodes[p.0].needs_grad {
                        let data = g.data()[off * n..(off + m) * n].to_vec();
                        let dp = Tensor::new(vec![m, n], data).expect("concat_rows backward");
                        self.accumulate(grads, p, dp);
                    }
                    off += m;
                }
            }
            Op::SliceRows { x, start, len } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut dx = Tensor::zeros(vec![xv.rows(), n]);
                let dst = &mut dx.data_mut()[start * n..(start + len) * n];
                dst.copy_from_slice(g.data());
                self.accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                let inv = 1.0 / m as f64;
                for i in 0..m {
                    for (o, &v) in dx.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o = v * inv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let c = g.scalar_value();
                let dx = Tensor::new(xv.shape().to_vec(), vec![c; xv.numel()]).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::Gather(table, ids) => {
                if self.nodes[table.0].needs_grad {
                    let tv = self.value(*table);
                    let n = tv.cols();
                    let mut dt = Tensor::zeros(vec![tv.rows(), n]);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &v) in dt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            Op::MaskScale(mask, scalar) => {
                let ds: f64 = g.data().iter().zip(mask.iter()).map(|(a, b)| a * b).sum();
                self.accumulate(grads, *scalar, Tensor::new(vec![1, 1], vec![ds]).unwrap());
            }
            Op::CrossEntropyRows(logits, pairs) => {
                let lv = self.value(*logits);
                let upstream = g.scalar_value();
                let n = lv.cols();
                let mut dl = Tensor::zeros(vec![lv.rows(), n]);
                for &(row, target) in pairs.iter() {
                    let mut p = lv.row(row).to_vec();
                    softmax_in_place(&mut p);
                    let dst = dl.row_mut(row);
                    for j in 0..n {
                        dst[j] += upstream * p[j];
                    }
                    dst[target] -= upstream;
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn masked_softmax_in_place(row: &mut [f64], mask: &[bool]) {
    let mut max = f64::NEG_INFINITY;
    for (v, &m) in row.iter().zip(mask) {
        if m && *v > max {
            max = *v;
        }
    }
    let mut sum = 0.0;
    for (v, &m) in row.iter_mut().zip(mask) {
        if m {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    if sum > 0.0 {
        for (v, &m) in row.iter_mut().zip(mask) {
            if m {
                *v /= sum;
            }
        }
    }
}

/// Per-node gradient slots produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for frozen leaves and interior
    /// nodes, or when the loss does not depend on the leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    /// Gradient for a trainable leaf, zero-filled when the loss does not
    /// depend on it.
    pub fn get_or_zero(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Rng;

    /// Central finite differences oracle (f64, h=1e-5 unless stated).
    fn finite_diff<F>(f: F, leaf: &Tensor, h: f64) -> Tensor
    where
        F: Fn(&Tensor) -> f64,
    {
        let mut grad = Tensor::zeros(leaf.shape().to_vec());
        for i in 0..leaf.numel() {
            let mut plus = leaf.clone();
            plus.data_mut()[i] += h;
            let mut minus = leaf.clone();
            minus.data_mut()[i] -= h;
            grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grad
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let mut worst: f64 = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            worst = worst.max((x - y).abs() / denom);
        }
        worst
    }

    fn random_tensor(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn sum_of_matmul_gradient_is_outer_product() {
        // loss = sum(W . x): dL/dW = ones . x^T structure
        let mut rng = Rng::from_parts(1, "grad", 0);
        let w0 = random_tensor(vec![3, 4], &mut rng);
        let x0 = random_tensor(vec![4, 2], &mut rng);

        let mut tape = Tape::new();
        let w = tape.trainable_leaf(w0.clone());
        let x = tape.leaf(x0.clone());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(w).unwrap();

        let oracle = finite_diff(
            |wp| {
                let y = wp.matmul(&x0).unwrap();
                y.data().iter().sum()
            },
            &w0,
            1e-5,
        );
        assert!(rel_err(analytic, &oracle) < 1e-6);
    }

    #[test]
    fn loss_independent_of_leaf_gives_no_gradient() {
        let mut tape = Tape::new();
        let unused = tape.trainable_leaf(Tensor::zeros(vec![2, 2]));
        let x = tape.trainable_leaf(Tensor::from_rows(vec![vec![1.0, 2.0]]));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zero(unused, &[2, 2]), Tensor::zeros(vec![2, 2]));
    }

    #[test]
    fn backward_rejects_eval_tape_and_non_scalar() {
        let mut tape = Tape::eval();
        let x = tape.trainable_leaf(Tensor::scalar(1.0));
        assert!(tape.backward(x).is_err());

        let mut tape = Tape::new();
        let x = tape.trainable_leaf(Tensor::zeros(vec![2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn frozen_leaf_gets_no_materialized_gradient() {
        let mut tape = Tape::new();
        let frozen = tape.leaf(Tensor::from_rows(vec![vec![2.0, 3.0]]));
        let train = tape.trainable_leaf(Tensor::from_rows(vec![vec![5.0], vec![7.0]]));
        let y = tape.matmul(frozen, train).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(frozen).is_none());
        // d(2a+3b)/da = 2, /db = 3
        assert_eq!(grads.get(train).unwrap().data(), &[2.0, 3.0]);
    }

    /// Every differentiable op vs central finite differences on random input.
    #[test]
    fn per_op_jacobians_match_finite_differences() {
        let mut rng = Rng::from_parts(17, "per_op", 0);
        let x0 = random_tensor(vec![4, 6], &mut rng);

        type Builder = fn(&mut Tape, Var) -> Var;
        let cases: Vec<(&str, Builder)> = vec![
            ("relu", |t, x| t.relu(x)),
            ("softmax", |t, x| t.softmax_rows(x).unwrap()),
            ("transpose", |t, x| t.transpose(x)),
            ("mean_rows", |t, x| t.mean_rows(x)),
            ("scale", |t, x| t.scale_const(x, -1.75)),
            ("slice_cols", |t, x| t.slice_cols(x, 1, 3).unwrap()),
            ("slice_rows", |t, x| t.slice_rows(x, 1, 2).unwrap()),
        ];
        for (name, build) in cases {
            let mut tape = Tape::new();
            let x = tape.trainable_leaf(x0.clone());
            // column-weighted readout so the loss is not constant for
            // row-normalizing ops like softmax
            let readout = |t: &mut Tape, y: Var| -> Var {
                let cols = t.value(y).cols();
                let w = Tensor::new(
                    vec![cols, 1],
                    (0..cols).map(|j| 0.3 + 0.7 * j as f64).collect(),
                )
                .unwrap();
                let wv = t.leaf(w);
                let yw = t.matmul(y, wv).unwrap();
                t.sum(yw)
            };
            let y = build(&mut tape, x);
            let loss = readout(&mut tape, y);
            let grads = tape.backward(loss).unwrap();
            let analytic = grads.get(x).unwrap();

            let oracle = finite_diff(
                |xp| {
                    let mut t = Tape::new();
                    let xv = t.trainable_leaf(xp.clone());
                    let y = build(&mut t, xv);
                    let loss = readout(&mut t, y);
                    t.value(loss).scalar_value()
                },
                &x0,
                1e-5,
            );
            assert!(
                rel_err(analytic, &oracle) < 1e-4,
                "op {name} jacobian mismatch: {}",
                rel_err(analytic, &oracle)
            );
        }
    }

    #[test]
    fn layernorm_gradient_matches_finite_differences() {
        let mut rng = Rng::from_parts(23, "ln_grad", 0);
        let x0 = random_tensor(vec![3, 8], &mut rng);
        let g0 = random_tensor(vec![8], &mut rng);
        let b0 = random_tensor(vec![8], &mut rng);

        let run = |x: &Tensor, g: &Tensor, b: &Tensor| -> f64 {
            let mut t = Tape::new();
            let xv = t.trainable_leaf(x.clone());
            let gv = t.trainable_leaf(g.clone());
            let bv = t.trainable_leaf(b.clone());
            let y = t.layernorm(xv, gv, bv, 1e-6).unwrap();
            let s = t.leaf(Tensor::new(vec![3], vec![1.0, -0.5, 2.0]).unwrap());
            let sq = t.row_scale(y, s).unwrap();
            t.value(sq).data().iter().sum()
        };

        let mut tape = Tape::new();
        let xv = tape.trainable_leaf(x0.clone());
        let gv = tape.trainable_leaf(g0.clone());
        let bv = tape.trainable_leaf(b0.clone());
        let y = tape.layernorm(xv, gv, bv, 1e-6).unwrap();
        let s = tape.leaf(Tensor::new(vec![3], vec![1.0, -0.5, 2.0]).unwrap());
        let ys = tape.row_scale(y, s).unwrap();
        let loss = tape.sum(ys);
        let grads = tape.backward(loss).unwrap();

        for (leaf, v0, which) in [(xv, &x0, "x"), (gv, &g0, "gamma"), (bv, &b0, "beta")] {
            let oracle = finite_diff(
                |p| match which {
                    "x" => run(p, &g0, &b0),
                    "gamma" => run(&x0, p, &b0),
                    _ => run(&x0, &g0, p),
                },
                v0,
                1e-5,
            );
            let analytic = grads.get(leaf).unwrap();
            assert!(
                rel_err(analytic, &oracle) < 1e-4,
                "layernorm d{which} mismatch"
            );
        }
    }

    #[test]
    fn gate_through_softmax_composite_matches_finite_differences() {
        // signal -> MLP -> softmax -> coefficient scaling -> attention-like
        // readout, mirroring the learned-gate path on a toy instance.
        let mut rng = Rng::from_parts(31, "composite", 0);
        let d = 6;
        let hgate = 4;
        let t_len = 5;
        let w1_0 = random_tensor(vec![d, hgate], &mut rng);
        let w2_0 = random_tensor(vec![hgate, 2], &mut rng);
        let signal = random_tensor(vec![1, d], &mut rng);
        let keys = random_tensor(vec![t_len, d], &mut rng);
        let query = random_tensor(vec![1, d], &mut rng);
        let values = random_tensor(vec![t_len, 1], &mut rng);
        let mask_a: Rc<Vec<f64>> = Rc::new(vec![1.0, 1.0, 0.0, 0.0, 0.0]);
        let mask_b: Rc<Vec<f64>> = Rc::new(vec![0.0, 0.0, 1.0, 1.0, 1.0]);

        let run = |w1: &Tensor, w2: &Tensor| -> f64 {
            let mut t = Tape::new();
            let w1v = t.trainable_leaf(w1.clone());
            let w2v = t.trainable_leaf(w2.clone());
            let sig = t.leaf(signal.clone());
            let k = t.leaf(keys.clone());
            let q = t.leaf(query.clone());
            let v = t.leaf(values.clone());
            let h = t.matmul(sig, w1v).unwrap();
            let h = t.relu(h);
            let z = t.matmul(h, w2v).unwrap();
            let rho = t.softmax_rows(z).unwrap();
            let rho_a = t.slice_cols(rho, 0, 1).unwrap();
            let rho_b = t.slice_cols(rho, 1, 1).unwrap();
            let ca = t.mask_scale(mask_a.clone(), rho_a).unwrap();
            let cb = t.mask_scale(mask_b.clone(), rho_b).unwrap();
            let coeff = t.add(ca, cb).unwrap();
            let k_scaled = t.row_scale(k, coeff).unwrap();
            let kt = t.transpose(k_scaled);
            let logits = t.matmul(q, kt).unwrap();
            let attn = t.softmax_rows(logits).unwrap();
            let out = t.matmul(attn, v).unwrap();
            let loss = t.sum(out);
            t.value(loss).scalar_value()
        };

        let mut tape = Tape::new();
        let w1v = tape.trainable_leaf(w1_0.clone());
        let w2v = tape.trainable_leaf(w2_0.clone());
        let sig = tape.leaf(signal.clone());
        let k = tape.leaf(keys.clone());
        let q = tape.leaf(query.clone());
        let v = tape.leaf(values.clone());
        let h = tape.matmul(sig, w1v).unwrap();
        let h = tape.relu(h);
        let z = tape.matmul(h, w2v).unwrap();
        let rho = tape.softmax_rows(z).unwrap();
        let rho_a = tape.slice_cols(rho, 0, 1).unwrap();
        let rho_b = tape.slice_cols(rho, 1, 1).unwrap();
        let ca = tape.mask_scale(mask_a.clone(), rho_a).unwrap();
        let cb = tape.mask_scale(mask_b.clone(), rho_b).unwrap();
        let coeff = tape.add(ca, cb).unwrap();
        let k_scaled = tape.row_scale(k, coeff).unwrap();
        let kt = tape.transpose(k_scaled);
        let logits = tape.matmul(q, kt).unwrap();
        let attn = tape.softmax_rows(logits).unwrap();
        let out = tape.matmul(attn, v).unwrap();
        let loss = tape.sum(out);
        let grads = tape.backward(loss).unwrap();

        let o1 = finite_diff(|p| run(p, &w2_0), &w1_0, 1e-5);
        let o2 = finite_diff(|p| run(&w1_0, p), &w2_0, 1e-5);
        assert!(rel_err(grads.get(w1v).unwrap(), &o1) < 1e-4);
        assert!(rel_err(grads.get(w2v).unwrap(), &o2) < 1e-4);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::from_parts(5, "ce", 0);
        let l0 = random_tensor(vec![3, 7], &mut rng);
        let pairs: Rc<Vec<(usize, usize)>> = Rc::new(vec![(0, 2), (2, 5)]);

        let mut tape = Tape::new();
        let l = tape.trainable_leaf(l0.clone());
        let loss = tape.cross_entropy_rows(l, pairs.clone()).unwrap();
        let grads = tape.backward(loss).unwrap();

        let oracle = finite_diff(
            |p| {
                let mut t = Tape::new();
                let l = t.trainable_leaf(p.clone());
                let loss = t.cross_entropy_rows(l, pairs.clone()).unwrap();
                t.value(loss).scalar_value()
            },
            &l0,
            1e-5,
        );
        assert!(rel_err(grads.get(l).unwrap(), &oracle) < 1e-4);
    }

    #[test]
    fn causal_mask_rows_get_zero_and_sum_to_one() {
        let mut rng = Rng::from_parts(2, "mask", 0);
        let x = random_tensor(vec![4, 4], &mut rng);
        let mut mask = vec![false; 16];
        for i in 0..4 {
            for j in 0..=i {
                mask[i * 4 + j] = true;
            }
        }
        let mut tape = Tape::eval();
        let xv = tape.leaf(x);
        let y = tape.masked_softmax_rows(xv, Rc::new(mask)).unwrap();
        let yv = tape.value(y);
        for i in 0..4 {
            let row = yv.row(i);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for (j, &val) in row.iter().enumerate() {
                if j > i {
                    assert_eq!(val, 0.0);
                }
            }
        }
    }
}
