//! Reverse-mode automatic differentiation over 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! read by reference from a [`ParamStore`]; [`Tape::backward`] returns their
//! gradients without touching the store, so the optimizer can mutate it
//! once the tape is dropped.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    OuterAdd(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Exp(Var),
    Ln(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    CumsumCols(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    SumAll(Var),
    MeanRows(Var),
    SumCols(Var),
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Tensor, inv_std: Vec<f64> },
    RepeatCols(Var, usize),
    Transpose(Var),
    BceLogits { logits: Var, targets: Tensor, mask: Tensor },
    Im2Col { a: Var, h: usize, w: usize },
    AvgPool2 { a: Var, h: usize, w: usize },
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs: Vec<bool>,
    param_vars: HashMap<ParamId, Var>,
}

/// Position on a tape that [`Tape::rewind`] can return to.
#[derive(Clone, Copy, Debug)]
pub struct Mark(usize);

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, values: Vec::new(), ops: Vec::new(), needs: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn mark(&self) -> Mark {
        Mark(self.ops.len())
    }

    /// Drops every node recorded after `mark`.
    pub fn rewind(&mut self, mark: Mark) {
        self.values.truncate(mark.0);
        self.ops.truncate(mark.0);
        self.needs.truncate(mark.0);
        self.param_vars.retain(|_, v| v.0 < mark.0);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match self.ops[v.0] {
            Op::Param(p) => self.store.value(p),
            _ => &self.values[v.0],
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        Var(self.ops.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs[v.0])
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Tensor::default(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, false, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_ex(a, false, b, true)
    }

    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = self.value(a).matmul_ex(ta, self.value(b), tb);
        let needs = self.needs(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, needs)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Tensor::from_vec(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p + q);
        let needs = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p - q);
        let needs = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p * q);
        let needs = self.needs(&[a, b]);
        self.push(out, Op::Mul(a, b), needs)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "add_row expects a 1x{} row", x.cols);
        let mut out = x.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        let needs = self.needs(&[a, row]);
        self.push(out, Op::AddRow(a, row), needs)
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!((x.rows, 1), c.shape(), "mul_col expects a {}x1 column", x.rows);
        let mut out = x.clone();
        for i in 0..out.rows {
            let s = c.data[i];
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let needs = self.needs(&[a, col]);
        self.push(out, Op::MulCol(a, col), needs)
    }

    /// `out[i][j] = col[i] + row[j]`.
    pub fn outer_add(&mut self, col: Var, row: Var) -> Var {
        let (c, r) = (self.value(col), self.value(row));
        assert_eq!(c.cols, 1);
        assert_eq!(r.rows, 1);
        let mut out = Tensor::zeros(c.rows, r.cols);
        for i in 0..c.rows {
            for j in 0..r.cols {
                out.data[i * r.cols + j] = c.data[i] + r.data[j];
            }
        }
        let needs = self.needs(&[col, row]);
        self.push(out, Op::OuterAdd(col, row), needs)
    }

    /// `alpha * a + beta`.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let out = self.value(a).map(|x| alpha * x + beta);
        let needs = self.needs[a.0];
        self.push(out, Op::Affine(a, alpha), needs)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let needs = self.needs[a.0];
        self.push(out, op, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, move |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    /// Row-wise softmax. Entries where `mask` is false get probability
    /// exactly zero; every row must keep at least one entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        let out = softmax_rows(x, mask);
        let needs = self.needs[a.0];
        self.push(out, Op::SoftmaxRows(a), needs)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let needs = self.needs[a.0];
        self.push(out, Op::LogSoftmaxRows(a), needs)
    }

    /// Running sum along each row.
    pub fn cumsum_cols(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            for j in 1..row.len() {
                row[j] += row[j - 1];
            }
        }
        let needs = self.needs[a.0];
        self.push(out, Op::CumsumCols(a), needs)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "column slice out of range");
        let mut out = Tensor::zeros(x.rows, len);
        for i in 0..x.rows {
            out.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        let needs = self.needs[a.0];
        self.push(out, Op::SliceCols(a, start), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows, "row slice out of range");
        let out = Tensor::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        let needs = self.needs[a.0];
        self.push(out, Op::SliceRows(a, start), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + x.cols].copy_from_slice(x.row(i));
            }
            off += x.cols;
        }
        let needs = self.needs(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&x.data);
        }
        let rows = data.len() / cols.max(1);
        let needs = self.needs(parts);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), needs)
    }

    /// Embedding lookup: row `k` of the output is row `idx[k]` of `table`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(t.row(i));
        }
        let needs = self.needs[table.0];
        self.push(out, Op::GatherRows(table, idx.to_vec()), needs)
    }

    /// `out[i] = a[i][cols[i]]`, shape `m x 1`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows, cols.len());
        let out = Tensor::from_vec(x.rows, 1, cols.iter().enumerate().map(|(i, &c)| x.get(i, c)).collect());
        let needs = self.needs[a.0];
        self.push(out, Op::Pick(a, cols.to_vec()), needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let needs = self.needs[a.0];
        self.push(out, Op::SumAll(a), needs)
    }

    /// Mean over rows, shape `1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(1, x.cols);
        for i in 0..x.rows {
            for (o, v) in out.data.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / x.rows as f64);
        let needs = self.needs[a.0];
        self.push(out, Op::MeanRows(a), needs)
    }

    /// Sum of each row, shape `m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::from_vec(x.rows, 1, (0..x.rows).map(|i| x.row(i).iter().sum()).collect());
        let needs = self.needs[a.0];
        self.push(out, Op::SumCols(a), needs)
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (x, g, b) = (self.value(a), self.value(gain), self.value(bias));
        let n = x.cols as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let row = xhat.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for i in 0..out.rows {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * g.data[j] + b.data[j];
            }
        }
        let needs = self.needs(&[a, gain, bias]);
        self.push(out, Op::LayerNorm { a, gain, bias, xhat, inv_std }, needs)
    }

    /// Repeats every column `k` times: `[a, b] -> [a, a, b, b]` for `k = 2`.
    pub fn repeat_cols(&mut self, a: Var, k: usize) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, x.cols * k);
        for i in 0..x.rows {
            for j in 0..x.cols {
                let v = x.get(i, j);
                out.row_mut(i)[j * k..(j + 1) * k].iter_mut().for_each(|o| *o = v);
            }
        }
        let needs = self.needs[a.0];
        self.push(out, Op::RepeatCols(a, k), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let needs = self.needs[a.0];
        self.push(out, Op::Transpose(a), needs)
    }

    /// Masked binary cross-entropy on logits, summed: the negative
    /// Bernoulli log-likelihood of `targets`.
    pub fn bce_logits(&mut self, logits: Var, targets: Tensor, mask: Tensor) -> Var {
        let rows = self.bce_logits_rows(logits, targets, mask);
        self.sum_all(rows)
    }

    /// Masked binary cross-entropy summed within each row (`m x 1`).
    pub fn bce_logits_rows(&mut self, logits: Var, targets: Tensor, mask: Tensor) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape());
        assert_eq!(x.shape(), mask.shape());
        let mut out = Tensor::zeros(x.rows, 1);
        for r in 0..x.rows {
            let mut total = 0.0;
            for c in 0..x.cols {
                let i = r * x.cols + c;
                if mask.data[i] != 0.0 {
                    total += mask.data[i] * bce_term(x.data[i], targets.data[i]);
                }
            }
            out.data[r] = total;
        }
        let needs = self.needs[logits.0];
        self.push(out, Op::BceLogits { logits, targets, mask }, needs)
    }

    /// 3x3, stride 1, zero-padded patch extraction. `a` holds one channel
    /// per row over an `h x w` grid; output row `y*w + x` holds the
    /// `channels * 9` patch values around pixel `(y, x)`.
    pub fn im2col3x3(&mut self, a: Var, h: usize, w: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols, h * w);
        let c = x.rows;
        let mut out = Tensor::zeros(h * w, c * 9);
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                out.data[(yy * w + xx) * c * 9 + ch * 9 + ky * 3 + kx] =
                                    x.data[ch * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
        let needs = self.needs[a.0];
        self.push(out, Op::Im2Col { a, h, w }, needs)
    }

    /// 2x2 average pooling of per-channel rows over an `h x w` grid.
    pub fn avg_pool2(&mut self, a: Var, h: usize, w: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols, h * w);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(x.rows, oh * ow);
        for ch in 0..x.rows {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s += x.data[ch * h * w + (2 * y + dy) * w + 2 * xx + dx];
                        }
                    }
                    out.data[ch * oh * ow + y * ow + xx] = s / 4.0;
                }
            }
        }
        let needs = self.needs[a.0];
        self.push(out, Op::AvgPool2 { a, h, w }, needs)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.ops.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            if !self.needs[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let y = &self.values[idx];
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Param(p) => out.accumulate(*p, g),
                Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs[a.0] {
                        let ga = match (ta, tb) {
                            (false, false) => g.matmul_ex(false, bv, true),
                            (false, true) => g.matmul_ex(false, bv, false),
                            (true, false) => bv.matmul_ex(false, &g, true),
                            (true, true) => bv.matmul_ex(true, &g, true),
                        };
                        acc(&mut grads, *a, ga);
                    }
                    if self.needs[b.0] {
                        let gb = match (ta, tb) {
                            (false, false) => av.matmul_ex(true, &g, false),
                            (false, true) => g.matmul_ex(true, av, false),
                            (true, false) => av.matmul_ex(false, &g, false),
                            (true, true) => g.matmul_ex(true, av, true),
                        };
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    self.acc_if(&mut grads, *b, || g.clone());
                    self.acc_if(&mut grads, *a, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc_if(&mut grads, *b, || g.map(|v| -v));
                    self.acc_if(&mut grads, *a, || g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc_if(&mut grads, *a, || hadamard(&g, bv));
                    self.acc_if(&mut grads, *b, || hadamard(&g, av));
                }
                Op::AddRow(a, row) => {
                    self.acc_if(&mut grads, *row, || {
                        let mut r = Tensor::zeros(1, g.cols);
                        for i in 0..g.rows {
                            for (o, v) in r.data.iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        r
                    });
                    self.acc_if(&mut grads, *a, || g.clone());
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    self.acc_if(&mut grads, *col, || {
                        Tensor::from_vec(
                            g.rows,
                            1,
                            (0..g.rows).map(|i| g.row(i).iter().zip(av.row(i)).map(|(p, q)| p * q).sum()).collect(),
                        )
                    });
                    self.acc_if(&mut grads, *a, || {
                        let mut o = g.clone();
                        for i in 0..o.rows {
                            let s = cv.data[i];
                            o.row_mut(i).iter_mut().for_each(|v| *v *= s);
                        }
                        o
                    });
                }
                Op::OuterAdd(col, row) => {
                    self.acc_if(&mut grads, *col, || {
                        Tensor::from_vec(g.rows, 1, (0..g.rows).map(|i| g.row(i).iter().sum()).collect())
                    });
                    self.acc_if(&mut grads, *row, || {
                        let mut r = Tensor::zeros(1, g.cols);
                        for i in 0..g.rows {
                            for (o, v) in r.data.iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        r
                    });
                }
                Op::Affine(a, alpha) => self.acc_if(&mut grads, *a, || g.map(|v| v * alpha)),
                Op::Sigmoid(a) => self.acc_if(&mut grads, *a, || zip_map(&g, y, |d, s| d * s * (1.0 - s))),
                Op::Tanh(a) => self.acc_if(&mut grads, *a, || zip_map(&g, y, |d, t| d * (1.0 - t * t))),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    self.acc_if(&mut grads, *a, || zip_map(&g, x, |d, v| if v > 0.0 { d } else { 0.0 }))
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    self.acc_if(&mut grads, *a, || zip_map(&g, x, |d, v| if v > 0.0 { d } else { d * slope }))
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let gx = Tensor::from_vec(
                        g.rows,
                        g.cols,
                        (0..g.data.len())
                            .map(|i| if x.data[i] > 0.0 { g.data[i] } else { g.data[i] * (y.data[i] + 1.0) })
                            .collect(),
                    );
                    acc_needed(&mut grads, &self.needs, *a, gx);
                }
                Op::Exp(a) => self.acc_if(&mut grads, *a, || hadamard(&g, y)),
                Op::Ln(a) => {
                    let x = self.value(*a);
                    self.acc_if(&mut grads, *a, || zip_map(&g, x, |d, v| d / v))
                }
                Op::SoftmaxRows(a) => self.acc_if(&mut grads, *a, || {
                    let mut o = Tensor::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let (gr, yr) = (g.row(i), y.row(i));
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for (j, v) in o.row_mut(i).iter_mut().enumerate() {
                            *v = yr[j] * (gr[j] - dot);
                        }
                    }
                    o
                }),
                Op::LogSoftmaxRows(a) => self.acc_if(&mut grads, *a, || {
                    let mut o = Tensor::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let (gr, yr) = (g.row(i), y.row(i));
                        let total: f64 = gr.iter().sum();
                        for (j, v) in o.row_mut(i).iter_mut().enumerate() {
                            *v = gr[j] - yr[j].exp() * total;
                        }
                    }
                    o
                }),
                Op::CumsumCols(a) => self.acc_if(&mut grads, *a, || {
                    let mut o = g.clone();
                    for i in 0..o.rows {
                        let row = o.row_mut(i);
                        for j in (0..row.len().saturating_sub(1)).rev() {
                            row[j] += row[j + 1];
                        }
                    }
                    o
                }),
                Op::SliceCols(a, start) => self.acc_if(&mut grads, *a, || {
                    let src = self.value(*a);
                    let mut o = Tensor::zeros(src.rows, src.cols);
                    for i in 0..g.rows {
                        o.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                    }
                    o
                }),
                Op::SliceRows(a, start) => self.acc_if(&mut grads, *a, || {
                    let src = self.value(*a);
                    let mut o = Tensor::zeros(src.rows, src.cols);
                    o.data[start * src.cols..(start + g.rows) * src.cols].copy_from_slice(&g.data);
                    o
                }),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols;
                        self.acc_if(&mut grads, p, || {
                            let mut o = Tensor::zeros(g.rows, cols);
                            for i in 0..g.rows {
                                o.row_mut(i).copy_from_slice(&g.row(i)[off..off + cols]);
                            }
                            o
                        });
                        off += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        self.acc_if(&mut grads, p, || {
                            Tensor::from_vec(rows, g.cols, g.data[off * g.cols..(off + rows) * g.cols].to_vec())
                        });
                        off += rows;
                    }
                }
                Op::GatherRows(table, idx) => self.acc_if(&mut grads, *table, || {
                    let src = self.value(*table);
                    let mut o = Tensor::zeros(src.rows, src.cols);
                    for (k, &i) in idx.iter().enumerate() {
                        for (dst, v) in o.row_mut(i).iter_mut().zip(g.row(k)) {
                            *dst += v;
                        }
                    }
                    o
                }),
                Op::Pick(a, cols) => self.acc_if(&mut grads, *a, || {
                    let src = self.value(*a);
                    let mut o = Tensor::zeros(src.rows, src.cols);
                    for (i, &c) in cols.iter().enumerate() {
                        o.set(i, c, g.data[i]);
                    }
                    o
                }),
                Op::SumAll(a) => self.acc_if(&mut grads, *a, || {
                    let (r, c) = self.value(*a).shape();
                    Tensor::filled(r, c, g.item())
                }),
                Op::MeanRows(a) => self.acc_if(&mut grads, *a, || {
                    let (r, c) = self.value(*a).shape();
                    let mut o = Tensor::zeros(r, c);
                    for i in 0..r {
                        for (dst, v) in o.row_mut(i).iter_mut().zip(&g.data) {
                            *dst = v / r as f64;
                        }
                    }
                    o
                }),
                Op::SumCols(a) => self.acc_if(&mut grads, *a, || {
                    let (r, c) = self.value(*a).shape();
                    let mut o = Tensor::zeros(r, c);
                    for i in 0..r {
                        o.row_mut(i).iter_mut().for_each(|v| *v = g.data[i]);
                    }
                    o
                }),
                Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    self.acc_if(&mut grads, *bias, || {
                        let mut r = Tensor::zeros(1, g.cols);
                        for i in 0..g.rows {
                            for (o, v) in r.data.iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        r
                    });
                    self.acc_if(&mut grads, *gain, || {
                        let mut r = Tensor::zeros(1, g.cols);
                        for i in 0..g.rows {
                            for (j, o) in r.data.iter_mut().enumerate() {
                                *o += g.get(i, j) * xhat.get(i, j);
                            }
                        }
                        r
                    });
                    self.acc_if(&mut grads, *a, || {
                        let n = g.cols as f64;
                        let mut o = Tensor::zeros(g.rows, g.cols);
                        for i in 0..g.rows {
                            let dxh: Vec<f64> = (0..g.cols).map(|j| g.get(i, j) * gv.data[j]).collect();
                            let s1: f64 = dxh.iter().sum();
                            let s2: f64 = dxh.iter().zip(xhat.row(i)).map(|(p, q)| p * q).sum();
                            for (j, v) in o.row_mut(i).iter_mut().enumerate() {
                                *v = inv_std[i] / n * (n * dxh[j] - s1 - xhat.get(i, j) * s2);
                            }
                        }
                        o
                    });
                }
                Op::RepeatCols(a, k) => self.acc_if(&mut grads, *a, || {
                    let (r, c) = self.value(*a).shape();
                    let mut o = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            o.data[i * c + j] = g.row(i)[j * k..(j + 1) * k].iter().sum();
                        }
                    }
                    o
                }),
                Op::Transpose(a) => self.acc_if(&mut grads, *a, || g.transpose()),
                Op::BceLogits { logits, targets, mask } => self.acc_if(&mut grads, *logits, || {
                    let x = self.value(*logits);
                    Tensor::from_vec(
                        x.rows,
                        x.cols,
                        (0..x.data.len())
                            .map(|i| g.data[i / x.cols] * mask.data[i] * (sigmoid(x.data[i]) - targets.data[i]))
                            .collect(),
                    )
                }),
                Op::Im2Col { a, h, w } => self.acc_if(&mut grads, *a, || {
                    let (c, _) = self.value(*a).shape();
                    let (h, w) = (*h, *w);
                    let mut o = Tensor::zeros(c, h * w);
                    for ch in 0..c {
                        for yy in 0..h {
                            for xx in 0..w {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                            o.data[ch * h * w + sy as usize * w + sx as usize] +=
                                                g.data[(yy * w + xx) * c * 9 + ch * 9 + ky * 3 + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    o
                }),
                Op::AvgPool2 { a, h, w } => self.acc_if(&mut grads, *a, || {
                    let (c, _) = self.value(*a).shape();
                    let (oh, ow) = (h / 2, w / 2);
                    let mut o = Tensor::zeros(c, h * w);
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = g.data[ch * oh * ow + y * ow + xx] / 4.0;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        o.data[ch * h * w + (2 * y + dy) * w + 2 * xx + dx] += v;
                                    }
                                }
                            }
                        }
                    }
                    o
                }),
            }
        }
        out
    }

    fn acc_if(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.needs[v.0] {
            acc(grads, v, f());
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(slot) => slot.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn acc_needed(grads: &mut [Option<Tensor>], needs: &[bool], v: Var, g: Tensor) {
    if needs[v.0] {
        acc(grads, v, g);
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |p, q| p * q)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(&p, &q)| f(p, q)).collect())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log p(target)` for a Bernoulli with logit `x`, computed stably.
#[inline]
pub fn bce_term(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax with an optional keep-mask (true = allowed).
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Tensor {
    if let Some(m) = mask {
        assert_eq!(m.len(), x.data.len(), "softmax mask shape mismatch");
    }
    let mut out = Tensor::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let keep = |j: usize| mask.is_none_or(|m| m[i * x.cols + j]);
        let max = (0..x.cols).filter(|&j| keep(j)).map(|j| x.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        assert!(max.is_finite() || max == f64::INFINITY, "softmax row {i} has no unmasked entry");
        let mut total = 0.0;
        for j in 0..x.cols {
            if keep(j) {
                let e = (x.get(i, j) - max).exp();
                out.set(i, j, e);
                total += e;
            }
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut impl Rng, store: &mut ParamStore, name: &str, r: usize, c: usize) -> ParamId {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        store.add(name, Tensor::from_vec(r, c, data))
    }

    fn assert_grads(build: impl for<'a> Fn(&mut Tape<'a>, &[ParamId]) -> Var, shapes: &[(usize, usize)]) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> =
            shapes.iter().enumerate().map(|(i, &(r, c))| random(&mut rng, &mut store, &format!("p{i}"), r, c)).collect();
        let report = check_gradients(&mut store, |t| build(t, &ids), 1e-5, 64, &mut rng);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    fn total(t: &mut Tape, v: Var) -> Var {
        let sq = t.mul(v, v);
        t.sum_all(sq)
    }

    #[test]
    fn matmul_variants() {
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let a = if ta { (4, 3) } else { (3, 4) };
            let b = if tb { (5, 4) } else { (4, 5) };
            assert_grads(
                |t, p| {
                    let (x, y) = (t.param(p[0]), t.param(p[1]));
                    let m = t.matmul_ex(x, ta, y, tb);
                    total(t, m)
                },
                &[a, b],
            );
        }
    }

    #[test]
    fn elementwise_and_broadcast() {
        assert_grads(
            |t, p| {
                let (a, b, row, col) = (t.param(p[0]), t.param(p[1]), t.param(p[2]), t.param(p[3]));
                let s = t.add(a, b);
                let d = t.sub(s, b);
                let m = t.mul(d, b);
                let r = t.add_row(m, row);
                let c = t.mul_col(r, col);
                let o = t.outer_add(col, row);
                let o = t.slice_cols(o, 0, 3);
                let both = t.concat_rows(&[c, o]);
                let aff = t.affine(both, 0.7, 0.2);
                total(t, aff)
            },
            &[(3, 3), (3, 3), (1, 3), (3, 1)],
        );
    }

    #[test]
    fn nonlinearities() {
        assert_grads(
            |t, p| {
                let a = t.param(p[0]);
                let s = t.sigmoid(a);
                let h = t.tanh(a);
                let r = t.leaky_relu(a, 0.2);
                let e = t.elu(a);
                let x = t.exp(a);
                let pos = t.affine(a, 0.5, 2.0);
                let l = t.ln(pos);
                let rl = t.relu(a);
                let all = t.concat_cols(&[s, h, r, e, x, l, rl]);
                total(t, all)
            },
            &[(3, 4)],
        );
    }

    #[test]
    fn softmax_family() {
        let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
        assert_grads(
            |t, p| {
                let (a, w) = (t.param(p[0]), t.param(p[1]));
                let s = t.softmax_rows(a, Some(&mask));
                let ls = t.log_softmax_rows(a);
                let cs = t.cumsum_cols(s);
                let both = t.concat_cols(&[s, ls, cs]);
                let weighted = t.mul(both, w);
                t.sum_all(weighted)
            },
            &[(3, 4), (3, 12)],
        );
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let x = Tensor::from_vec(1, 3, vec![5.0, 1.0, 2.0]);
        let p = softmax_rows(&x, Some(&[false, true, true]));
        assert_eq!(p.get(0, 0), 0.0);
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn indexing_and_reductions() {
        assert_grads(
            |t, p| {
                let (table, g, b) = (t.param(p[0]), t.param(p[1]), t.param(p[2]));
                let rows = t.gather_rows(table, &[2, 0, 2, 1]);
                let ln = t.layer_norm(rows, g, b);
                let picked = t.pick(ln, &[0, 3, 1, 2]);
                let mean = t.mean_rows(ln);
                let sums = t.sum_cols(ln);
                let rep = t.repeat_cols(mean, 2);
                let tr = t.transpose(sums);
                let sl = t.slice_rows(ln, 1, 2);
                let a = total(t, picked);
                let b = total(t, rep);
                let c = total(t, tr);
                let d = total(t, sl);
                let ab = t.add(a, b);
                let cd = t.add(c, d);
                t.add(ab, cd)
            },
            &[(3, 4), (1, 4), (1, 4)],
        );
    }

    #[test]
    fn bce_matches_manual_sum() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::from_vec(1, 3, vec![0.3, -1.2, 2.0]));
        let l = t.bce_logits(x, Tensor::from_vec(1, 3, vec![1.0, 0.0, 1.0]), Tensor::from_vec(1, 3, vec![1.0, 1.0, 0.0]));
        let expected = -(sigmoid(0.3).ln() + (1.0 - sigmoid(-1.2)).ln());
        assert!((t.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn bce_and_conv_gradients() {
        let targets = Tensor::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let mask = Tensor::from_vec(2, 3, vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert_grads(
            |t, p| {
                let (a, img, k) = (t.param(p[0]), t.param(p[1]), t.param(p[2]));
                let b = t.bce_logits(a, targets.clone(), mask.clone());
                let cols = t.im2col3x3(img, 4, 4);
                let conv = t.matmul_nt(k, cols);
                let pooled = t.avg_pool2(conv, 4, 4);
                let c = total(t, pooled);
                t.add(b, c)
            },
            &[(2, 3), (2, 16), (3, 18)],
        );
    }

    #[test]
    fn rewind_drops_later_nodes() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut t = Tape::new(&store);
        let mark = t.mark();
        let w = t.param(id);
        let _ = t.mul(w, w);
        t.rewind(mark);
        assert!(t.is_empty());
        let w = t.param(id);
        let sq = t.mul(w, w);
        let g = t.backward(sq);
        assert_eq!(g.get(id).unwrap().item(), 4.0);
    }
}
