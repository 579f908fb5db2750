//! Reverse-mode differentiation over a closed set of matrix operations.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its output value. Parameters enter the tape by copy ([`Tape::param`]) or
//! by row lookup ([`Tape::gather`]); [`Tape::backward`] walks the nodes in
//! reverse once and adds `d loss / d param` into the gradient buffers of
//! every trainable tensor in the [`ParamStore`]. Gradients accumulate; the
//! caller zeroes them between steps.

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Probability clamp used by [`Tape::bce`].
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    SliceCols { x: Var, start: usize },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RepeatBlocks { x: Var, width: usize },
    Sum(Var),
    Mean(Var),
    Bce { y: Var, labels: Vec<f64> },
    #[cfg(test)]
    BrokenSigmoid(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Which elementwise rule to apply in [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Relu,
    ConcatCols,
}

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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).unwrap()
    }

    fn dims(&self, v: Var) -> [usize; 2] {
        let (r, c) = self.shape(v);
        [r, c]
    }

    // ----- leaves -------------------------------------------------------

    /// Non-differentiable input.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() || rows == 0 || cols == 0 {
            return Err(Error::dim("constant", &[rows, cols], &[value.len()]));
        }
        Ok(self.push(rows, cols, value, Op::Constant))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Constant)
    }

    /// Whole parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Param(id))
    }

    /// Selected rows of a parameter matrix (embedding lookup).
    pub fn gather(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<Var> {
        let t = store.get(id);
        let (n, c) = (t.rows(), t.cols());
        if rows.is_empty() {
            return Err(Error::Usage("gather with no rows".into()));
        }
        let mut value = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "embedding row",
                    index: r,
                    bound: n,
                });
            }
            value.extend_from_slice(t.row(r));
        }
        Ok(self.push(
            rows.len(),
            c,
            value,
            Op::Gather {
                param: id,
                rows: rows.to_vec(),
            },
        ))
    }

    // ----- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul", &self.dims(a), &self.dims(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    /// `a * b^T`; weights stored as `out x in` use this form.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul_bt", &self.dims(a), &self.dims(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMulBt(a, b)))
    }

    // ----- elementwise ---------------------------------------------------

    /// Dispatch by kind; `operands` must have the arity the kind expects.
    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = |n: usize| {
            if operands.len() == n {
                Ok(())
            } else {
                Err(Error::Usage(format!(
                    "{kind:?} takes {n} operands, got {}",
                    operands.len()
                )))
            }
        };
        match kind {
            Elementwise::Add => {
                arity(2)?;
                let (a, b) = (operands[0], operands[1]);
                if self.shape(b).0 == 1 && self.shape(a).0 != 1 {
                    self.add_row(a, b)
                } else {
                    self.add(a, b)
                }
            }
            Elementwise::Mul => {
                arity(2)?;
                self.mul(operands[0], operands[1])
            }
            Elementwise::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(operands[0]))
            }
            Elementwise::Relu => {
                arity(1)?;
                Ok(self.relu(operands[0]))
            }
            Elementwise::ConcatCols => self.concat_cols(operands),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", &self.dims(a), &self.dims(b)));
        }
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    /// `a[m x n] + row[1 x n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(Error::dim("add_row", &self.dims(a), &self.dims(row)));
        }
        let rv = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(rv) {
                *o += b;
            }
        }
        Ok(self.push(m, n, out, Op::AddRow(a, row)))
    }

    /// Hadamard product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", &self.dims(a), &self.dims(b)));
        }
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(r, c, out, Op::Mul(a, b)))
    }

    /// Multiplies row `i` of `a[m x n]` by `s[i]`, where `s` is `m x 1`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(s) != (m, 1) {
            return Err(Error::dim("scale_rows", &self.dims(a), &self.dims(s)));
        }
        let sv = self.value(s);
        let mut out = self.value(a).to_vec();
        for (chunk, &k) in out.chunks_mut(n).zip(sv) {
            chunk.iter_mut().for_each(|x| *x *= k);
        }
        Ok(self.push(m, n, out, Op::ScaleRows(a, s)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * k).collect();
        self.push(r, c, out, Op::Scale(a, k))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        self.push(r, c, out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(r, c, out, Op::Relu(a))
    }

    // ----- structural -----------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let m = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != m {
                return Err(Error::dim("concat_cols", &self.dims(first), &self.dims(p)));
            }
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(m, n, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let n = self.shape(first).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            if self.shape(p).1 != n {
                return Err(Error::dim("concat_rows", &self.dims(first), &self.dims(p)));
            }
            m += self.shape(p).0;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(m, n, out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows of `x` in the given order; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(x);
        if rows.is_empty() {
            return Err(Error::Usage("select_rows with no rows".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    bound: m,
                });
            }
            out.extend_from_slice(&self.value(x)[r * n..(r + 1) * n]);
        }
        Ok(self.push(rows.len(), n, out, Op::SelectRows(x, rows.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        Ok(self.push(m, len, out, Op::SliceCols { x, start }))
    }

    /// `x[m x S] -> y[m x D]` with `y[:, j] = x[:, j * S / D]`, so each input
    /// column fills a contiguous block of `D / S` output columns.
    pub fn repeat_blocks(&mut self, x: Var, out_cols: usize) -> Result<Var> {
        let (m, s) = self.shape(x);
        if !out_cols.is_multiple_of(s) {
            return Err(Error::dim("repeat_blocks", &[m, s], &[out_cols]));
        }
        let width = out_cols / s;
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * out_cols);
        for i in 0..m {
            for &a in &v[i * s..(i + 1) * s] {
                out.extend(std::iter::repeat_n(a, width));
            }
        }
        Ok(self.push(m, out_cols, out, Op::RepeatBlocks { x, width }))
    }

    // ----- normalisation -------------------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, None)
    }

    /// Row softmax with max subtraction. `key_mask[j] == false` removes
    /// column `j` from every row; a row with no admissible column is all
    /// zeros.
    pub fn softmax_rows_masked(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.shape(x);
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::dim("softmax mask", &[m, n], &[mask.len()]));
            }
        }
        let v = self.value(x);
        if v.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let keep = |j: usize| key_mask.is_none_or(|mask| mask[j]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            o.iter_mut().for_each(|z| *z /= sum);
        }
        Ok(self.push(m, n, out, Op::Softmax(x)))
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gain + bias` with population
    /// variance. `gain` and `bias` are `1 x n`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Usage("layer_norm eps must be positive".into()));
        }
        let (m, n) = self.shape(x);
        if self.shape(gain) != (1, n) || self.shape(bias) != (1, n) {
            return Err(Error::dim("layer_norm", &self.dims(x), &self.dims(gain)));
        }
        let v = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    // ----- reductions and losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(1, 1, vec![s], Op::Mean(x))
    }

    /// Elementwise binary cross-entropy of probabilities `y` against
    /// `labels`, with `y` clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&mut self, y: Var, labels: &[f64]) -> Result<Var> {
        let (m, n) = self.shape(y);
        if labels.len() != m * n {
            return Err(Error::dim("bce", &[m, n], &[labels.len()]));
        }
        let out = self
            .value(y)
            .iter()
            .zip(labels)
            .map(|(&p, &l)| bce_value(p, l))
            .collect();
        Ok(self.push(
            m,
            n,
            out,
            Op::Bce {
                y,
                labels: labels.to_vec(),
            },
        ))
    }

    #[cfg(test)]
    pub(crate) fn broken_sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        self.push(r, c, out, Op::BrokenSigmoid(a))
    }

    // ----- backward ------------------------------------------------------

    /// Accumulates `d loss / d p` into every trainable tensor `p` of
    /// `params` that took part in the recorded computation.
    pub fn backward(&self, loss: Var, params: &mut ParamStore) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if let Some(pg) = params.get_mut(*id).grad_mut() {
                        add_into(pg, &g);
                    }
                }
                Op::Gather { param, rows } => {
                    let c = node.cols;
                    if let Some(pg) = params.get_mut(*param).grad_mut() {
                        for (i, &r) in rows.iter().enumerate() {
                            add_into(&mut pg[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    gemm_nt(&g, bv, slot(&mut grads, *a, m * k), m, n, k);
                    gemm_tn(av, &g, slot(&mut grads, *b, k * n), k, m, n);
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    gemm_nn(&g, bv, slot(&mut grads, *a, m * k), m, n, k);
                    gemm_tn(&g, av, slot(&mut grads, *b, n * k), n, m, k);
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::AddRow(a, row) => {
                    let n = node.cols;
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    let rg = slot(&mut grads, *row, n);
                    for chunk in g.chunks(n) {
                        add_into(rg, chunk);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, &d), &y) in ga.iter_mut().zip(&g).zip(bv) {
                        *o += d * y;
                    }
                    let gb = slot(&mut grads, *b, g.len());
                    for ((o, &d), &x) in gb.iter_mut().zip(&g).zip(av) {
                        *o += d * x;
                    }
                }
                Op::ScaleRows(a, s) => {
                    let n = node.cols;
                    let (av, sv) = (self.value(*a), self.value(*s));
                    let ga = slot(&mut grads, *a, g.len());
                    for (i, &k) in sv.iter().enumerate() {
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] * k;
                        }
                    }
                    let gs = slot(&mut grads, *s, sv.len());
                    for (i, o) in gs.iter_mut().enumerate() {
                        *o += kernels::dot(&g[i * n..(i + 1) * n], &av[i * n..(i + 1) * n]);
                    }
                }
                Op::Scale(a, k) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for (o, &d) in ga.iter_mut().zip(&g) {
                        *o += d * k;
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, &d), &y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *o += d * y * (1.0 - y);
                    }
                }
                #[cfg(test)]
                Op::BrokenSigmoid(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, &d), &y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *o += d * y;
                    }
                }
                Op::Relu(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, &d), &y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        if y > 0.0 {
                            *o += d;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let n = node.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let (pm, pc) = self.shape(p);
                        let gp = slot(&mut grads, p, pm * pc);
                        for i in 0..pm {
                            add_into(
                                &mut gp[i * pc..(i + 1) * pc],
                                &g[i * n + offset..i * n + offset + pc],
                            );
                        }
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        add_into(slot(&mut grads, p, len), &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::SelectRows(x, rows) => {
                    let n = node.cols;
                    let len = self.value(*x).len();
                    let gx = slot(&mut grads, *x, len);
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = self.shape(*x);
                    let len = node.cols;
                    let gx = slot(&mut grads, *x, m * n);
                    for i in 0..m {
                        add_into(
                            &mut gx[i * n + start..i * n + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                }
                Op::RepeatBlocks { x, width } => {
                    let len = self.value(*x).len();
                    let gx = slot(&mut grads, *x, len);
                    for (o, chunk) in gx.iter_mut().zip(g.chunks(*width)) {
                        *o += chunk.iter().sum::<f64>();
                    }
                }
                Op::Softmax(x) => {
                    let n = node.cols;
                    let gx = slot(&mut grads, *x, g.len());
                    for (i, (y, d)) in node.value.chunks(n).zip(g.chunks(n)).enumerate() {
                        let inner = kernels::dot(y, d);
                        for j in 0..n {
                            gx[i * n + j] += y[j] * (d[j] - inner);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (m, n) = (node.rows, node.cols);
                    let gv = self.value(*gain);
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    let mut dx = vec![0.0; m * n];
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let h = &xhat[i * n..(i + 1) * n];
                        let d = &g[i * n..(i + 1) * n];
                        for j in 0..n {
                            dgain[j] += d[j] * h[j];
                            dbias[j] += d[j];
                            dxhat[j] = d[j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = kernels::dot(&dxhat, h);
                        let k = inv_std[i] / n as f64;
                        for j in 0..n {
                            dx[i * n + j] = k * (n as f64 * dxhat[j] - s1 - h[j] * s2);
                        }
                    }
                    add_into(slot(&mut grads, *x, m * n), &dx);
                    add_into(slot(&mut grads, *gain, n), &dgain);
                    add_into(slot(&mut grads, *bias, n), &dbias);
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    slot(&mut grads, *x, len).iter_mut().for_each(|o| *o += g[0]);
                }
                Op::Mean(x) => {
                    let len = self.value(*x).len();
                    let d = g[0] / len as f64;
                    slot(&mut grads, *x, len).iter_mut().for_each(|o| *o += d);
                }
                Op::Bce { y, labels } => {
                    let yv = self.value(*y);
                    let gy = slot(&mut grads, *y, g.len());
                    for (((o, &d), &p), &l) in gy.iter_mut().zip(&g).zip(yv).zip(labels) {
                        *o += d * bce_grad(p, l);
                    }
                }
            }
        }
        Ok(())
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn bce_value(p: f64, label: f64) -> f64 {
    let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -label * q.ln() - (1.0 - label) * (1.0 - q).ln()
}

fn bce_grad(p: f64, label: f64) -> f64 {
    if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
        return 0.0;
    }
    -label / p + (1.0 - label) / (1.0 - p)
}
