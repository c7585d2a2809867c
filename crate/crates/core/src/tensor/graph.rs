//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node, so node order is already a topological
//! order; `backward` walks it once in reverse. Inputs are never mutated.

use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, gemm};
use super::{mismatch, ParamId, ParamStore, Tensor, TensorError};

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-major boolean attention pattern; `true` means the query row may
/// attend to the key column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self, TensorError> {
        if allow.len() != rows * cols {
            return Err(mismatch("attn_mask", &[rows, cols], &[allow.len()]));
        }
        Ok(Self { rows, cols, allow })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allow = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self { rows, cols, allow }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Embedding { table: Var, ids: Vec<u32> },
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    Gelu(Var),
    Dropout { input: Var, keep_scale: Vec<f64> },
    MaskedSoftmax { input: Var },
    CrossEntropy { logits: Var, targets: Vec<u32>, select: Vec<bool>, count: usize },
    BceWithLogits { logits: Var, labels: Vec<f64>, select: Vec<bool>, count: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One forward pass. Owns its values; parameters are copied in on first use.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    track_params: bool,
    training: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph whose parameter leaves require gradients; dropout active.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            track_params: true,
            training: true,
            backward_done: false,
        }
    }

    /// Forward-only graph: dropout disabled, nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            training: false,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf; repeated calls for one id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() < store.len() {
            self.param_vars.resize(store.len(), None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, self.track_params);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        self.value(v)
            .dims2()
            .ok_or_else(|| mismatch(op, self.shape(v), &[0, 0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (x, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| mismatch("concat_last_dim", &[], &[]))?;
        let (m, _) = self.dims2(first, "concat_last_dim")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_last_dim")?;
            if r != m {
                return Err(mismatch("concat_last_dim", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_last_dim(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(a, "slice_last_dim")?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                size: n,
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::Slice { input: a, start }, rg))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var, TensorError> {
        let (v, d) = self.dims2(table, "embedding_lookup")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, size: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `x · w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(x, "linear")?;
        let (k2, n) = self.dims2(w, "linear")?;
        if k != k2 {
            return Err(mismatch("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != n || self.shape(b).len() != 1 {
                return Err(mismatch("linear", self.shape(w), self.shape(b)));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, 1.0, &mut out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims2(x, "layernorm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(mismatch("layernorm", self.shape(x), self.shape(gain)));
        }
        let mut out = vec![0.0; m * n];
        let mut stats = Vec::with_capacity(m);
        {
            let xs = self.value(x).data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for i in 0..m {
                stats.push(kernels::layernorm_row(&xs[i * n..(i + 1) * n], g, b, &mut out[i * n..(i + 1) * n]));
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = kernels::gelu(*x));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Inverted dropout; identity when `p == 0` or the graph is not training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Domain {
                name: "p",
                value: p,
                domain: "[0, 1)",
            });
        }
        if p == 0.0 || !self.training {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let keep_scale: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut out = self.value(a).clone();
        for (x, s) in out.data_mut().iter_mut().zip(&keep_scale) {
            *x *= s;
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout { input: a, keep_scale }, rg))
    }

    /// Row softmax where disallowed entries get an additive negative
    /// infinity, so their weight is exactly zero. `None` allows everything.
    pub fn masked_softmax(&mut self, scores: Var, mask: Option<Arc<AttnMask>>) -> Result<Var, TensorError> {
        let (n, m) = self.dims2(scores, "masked_softmax")?;
        if let Some(mask) = &mask {
            if mask.rows != n || mask.cols != m {
                return Err(mismatch("masked_softmax", &[n, m], &[mask.rows, mask.cols]));
            }
            if let Some(row) = (0..n).find(|&i| !mask.row(i).contains(&true)) {
                return Err(TensorError::FullyMaskedRow(row));
            }
        }
        let mut out = self.value(scores).clone();
        for (i, row) in out.data_mut().chunks_mut(m).enumerate() {
            kernels::softmax_row(row, mask.as_deref().map(|mk| mk.row(i)));
        }
        let rg = self.rg(scores);
        Ok(self.push(out, Op::MaskedSoftmax { input: scores }, rg))
    }

    /// Mean token cross-entropy over rows with `select[i]`; 0 when none selected.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], select: &[bool]) -> Result<Var, TensorError> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || select.len() != n {
            return Err(mismatch("cross_entropy", &[n, v], &[targets.len(), select.len()]));
        }
        let count = select.iter().filter(|&&s| s).count();
        let mut total = 0.0;
        let values = self.value(logits);
        for i in 0..n {
            if !select[i] {
                continue;
            }
            let t = targets[i] as usize;
            if t >= v {
                return Err(TensorError::IndexOutOfRange { index: t, size: v });
            }
            let row = values.row(i);
            total += kernels::log_sum_exp(row) - row[t];
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                select: select.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy on logits over selected elements.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64], select: &[bool]) -> Result<Var, TensorError> {
        let n = self.value(logits).numel();
        if labels.len() != n || select.len() != n {
            return Err(mismatch("bce_with_logits", self.shape(logits), &[labels.len(), select.len()]));
        }
        let count = select.iter().filter(|&&s| s).count();
        let xs = self.value(logits).data();
        let total: f64 = (0..n)
            .filter(|&i| select[i])
            .map(|i| {
                let x = xs[i];
                x.max(0.0) - x * labels[i] + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
                select: select.to_vec(),
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Reverse pass from a single-element output. Allowed once per graph.
    pub fn backward(&mut self, output: Var) -> Result<Gradients, TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        if self.value(output).numel() != 1 {
            return Err(mismatch("backward", self.shape(output), &[]));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));

        for id in (0..=output.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| Tensor::zeros(self.nodes[target.0].value.shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |da| gemm(m, n, k, gd, false, bv, true, 1.0, da));
                self.accumulate(grads, *b, |db| gemm(k, m, n, av, true, gd, false, 1.0, db));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += factor * y));
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                self.accumulate(grads, *a, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += gd[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, |d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
            }
            Op::Concat(parts) => {
                let (m, total) = out.dims2().unwrap();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).dims2().unwrap().1;
                    self.accumulate(grads, *p, |d| {
                        for i in 0..m {
                            for j in 0..w {
                                d[i * w + j] += gd[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { input, start } => {
                let (m, n) = self.value(*input).dims2().unwrap();
                let len = out.dims2().unwrap().1;
                self.accumulate(grads, *input, |d| {
                    for i in 0..m {
                        for j in 0..len {
                            d[i * n + start + j] += gd[i * len + j];
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d_model = self.value(*table).dims2().unwrap().1;
                self.accumulate(grads, *table, |d| {
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut d[id as usize * d_model..(id as usize + 1) * d_model];
                        for (x, y) in dst.iter_mut().zip(&gd[row * d_model..(row + 1) * d_model]) {
                            *x += y;
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.value(*x).dims2().unwrap();
                let n = self.value(*w).dims2().unwrap().1;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate(grads, *x, |dx| gemm(m, n, k, gd, false, wv, true, 1.0, dx));
                self.accumulate(grads, *w, |dw| gemm(k, m, n, xv, true, gd, false, 1.0, dw));
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| {
                        for row in gd.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let xhat = |i: usize, j: usize| (xv[i * n + j] - stats[i].0) * stats[i].1;
                self.accumulate(grads, *x, |dx| {
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let mut sum = 0.0;
                        let mut sum_xhat = 0.0;
                        for j in 0..n {
                            dxhat[j] = gd[i * n + j] * gv[j];
                            sum += dxhat[j];
                            sum_xhat += dxhat[j] * xhat(i, j);
                        }
                        let rstd = stats[i].1;
                        for j in 0..n {
                            dx[i * n + j] += rstd / n as f64 * (n as f64 * dxhat[j] - sum - xhat(i, j) * sum_xhat);
                        }
                    }
                });
                self.accumulate(grads, *gain, |dg| {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gd[i * n + j] * xhat(i, j);
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for row in gd.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * kernels::gelu_grad(av[i]);
                    }
                });
            }
            Op::Dropout { input, keep_scale } => {
                self.accumulate(grads, *input, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * keep_scale[i];
                    }
                });
            }
            Op::MaskedSoftmax { input } => {
                let (_, m) = out.dims2().unwrap();
                let y = out.data();
                self.accumulate(grads, *input, |d| {
                    for (r, (yr, gr)) in y.chunks(m).zip(gd.chunks(m)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            // Disallowed entries have y == 0, hence an exact zero here.
                            d[r * m + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                select,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let (_, v) = self.value(*logits).dims2().unwrap();
                let lv = self.value(*logits);
                let scale = gd[0] / *count as f64;
                self.accumulate(grads, *logits, |d| {
                    let mut probs = vec![0.0; v];
                    for (i, &sel) in select.iter().enumerate() {
                        if !sel {
                            continue;
                        }
                        probs.copy_from_slice(lv.row(i));
                        kernels::softmax_row(&mut probs, None);
                        probs[targets[i] as usize] -= 1.0;
                        for j in 0..v {
                            d[i * v + j] += scale * probs[j];
                        }
                    }
                });
            }
            Op::BceWithLogits {
                logits,
                labels,
                select,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let xs = self.value(*logits).data();
                let scale = gd[0] / *count as f64;
                self.accumulate(grads, *logits, |d| {
                    for i in 0..d.len() {
                        if select[i] {
                            d[i] += scale * (kernels::sigmoid(xs[i]) - labels[i]);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.accumulate(grads, *a, |d| d.iter_mut().for_each(|x| *x += g0));
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every parameter that took part in the pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| self.get(v)).map(|g| (ParamId(i), g)))
    }

    /// Dense per-parameter gradients, zeros for unused parameters.
    pub fn into_param_grads(self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        for (id, g) in self.param_grads() {
            out[id.0] = g.clone();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "shape mismatch in matmul: [2, 3] vs [2, 3]");
    }

    #[test]
    fn uniform_cross_entropy_is_log_vocab() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(&[5, 189]));
        let loss = g.cross_entropy(logits, &[0, 7, 188, 3, 100], &[true; 5]).unwrap();
        assert!((g.value(loss).item() - 189f64.ln()).abs() < 1e-12);
        assert!((189f64.ln() - 5.2417).abs() < 1e-4);
    }

    #[test]
    fn bce_at_zero_logit() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1]));
        let loss = g.bce_with_logits(x, &[1.0], &[true]).unwrap();
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_selection_gives_zero_loss_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[3, 4], 0.3));
        let loss = g.cross_entropy(x, &[0, 1, 2], &[false; 3]).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn masked_softmax_examples() {
        let mut g = Graph::new();
        let s = g.leaf(Tensor::zeros(&[2, 2]));
        let p = g.masked_softmax(s, None).unwrap();
        assert_eq!(g.value(p).data(), &[0.5; 4]);

        let s = g.leaf(t2(&[&[3.0, -1.0], &[0.2, 9.0]]));
        let eye = Arc::new(AttnMask::from_fn(2, 2, |i, j| i == j));
        let p = g.masked_softmax(s, Some(eye)).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.0, 1.0]);

        let s = g.leaf(t2(&[&[0.0, 3f64.ln()]]));
        let p = g.masked_softmax(s, None).unwrap();
        assert!((g.value(p).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(p).data()[1] - 0.75).abs() < 1e-15);

        let blocked = Arc::new(AttnMask::from_fn(2, 2, |i, _| i == 0));
        let s = g.leaf(Tensor::zeros(&[2, 2]));
        assert_eq!(g.masked_softmax(s, Some(blocked)), Err(TensorError::FullyMaskedRow(1)));
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.sum(x);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::BackwardAlreadyRun)));
    }

    #[test]
    fn parameter_used_twice_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![1, 1], vec![3.0]).unwrap(), true);
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let collected: Vec<_> = grads.param_grads().collect();
        assert_eq!(collected.len(), 1);
        assert_eq!(collected[0].1.data(), &[6.0]);
    }

    #[test]
    fn dropout_is_identity_at_inference() {
        let mut rng = rand::thread_rng();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::full(&[2, 2], 1.0));
        assert_eq!(g.dropout(x, 0.5, &mut rng).unwrap(), x);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[100, 10], 1.0));
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
