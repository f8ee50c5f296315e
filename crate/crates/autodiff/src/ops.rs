//! Forward implementations of every recorded operation.

use std::rc::Rc;

use nalgebra::{Matrix3, SVD};

use crate::error::{Result, TensorError};
use crate::param::{BufferId, ParamStore};
use crate::tape::{check_numel, Mode, Op, StatUpdate, Tape, Var};

/// Variance floor inside feature normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Weight given to the previous running statistic.
pub const NORM_MOMENTUM: f64 = 0.9;

/// (rows, cols) view where cols is the last axis.
pub(crate) fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape[..shape.len().saturating_sub(1)].iter().product();
    (rows, cols)
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

/// out[m×n] += a[m×k] · b[k×n], row-major, i-k-j order.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Which nonlinearity [`Tape::activation`] applies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    /// Softmax over the last axis, which holds the neighbors.
    SoftmaxOverNeighbors,
}

/// Reduction over the neighbor axis of an `[M, K, C]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Max,
    WeightedSum,
}

impl Tape {
    fn unary(&mut self, x: Var, data: Vec<f64>, op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, data, op, rg)
    }

    /// `y = x·w + b` applied to the last axis of `x` (any leading shape).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (rows, cin) = rows_cols(&xs);
        if ws.len() != 2 || ws[0] != cin {
            return Err(shape_err("linear", &xs, &ws));
        }
        let cout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("linear bias", &ws, self.shape(b)));
            }
        }
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = b {
            let bd = self.data(b);
            for r in 0..rows {
                out[r * cout..(r + 1) * cout].copy_from_slice(bd);
            }
        }
        gemm_acc(self.data(x), self.data(w), &mut out, rows, cin, cout);
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, out, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(shape_err("matmul", &as_, &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", &s, &[2]));
        }
        let t = transpose(self.data(x), s[0], s[1]);
        let rg = self.rg(x);
        Ok(self.push(vec![s[1], s[0]], t, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_numel("reshape", shape, self.data(x).len())?;
        let d = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), d, Op::Reshape(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let d = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), d, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let d = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), d, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let d = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), d, Op::Mul(a, b), rg))
    }

    /// Bias-style broadcast: adds `row` (shape `[C]`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.data(row).len() != cols {
            return Err(shape_err("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.data(row);
        let mut d = self.data(x).to_vec();
        for i in 0..rows {
            for (v, b) in d[i * cols..(i + 1) * cols].iter_mut().zip(r) {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(self.shape(x).to_vec(), d, Op::AddRow { x, row }, rg))
    }

    /// Scales row `i` of `x` by `col[i]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.data(col).len() != rows {
            return Err(shape_err("mul_col", self.shape(x), self.shape(col)));
        }
        let c = self.data(col);
        let mut d = self.data(x).to_vec();
        for i in 0..rows {
            for v in d[i * cols..(i + 1) * cols].iter_mut() {
                *v *= c[i];
            }
        }
        let rg = self.rg(x) || self.rg(col);
        Ok(self.push(self.shape(x).to_vec(), d, Op::MulCol { x, col }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let d = self.data(x).iter().map(|v| v * s).collect();
        self.unary(x, d, Op::Scale(x, s))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::LeakyRelu(slope) => self.leaky_relu(x, slope),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::SoftmaxOverNeighbors => self.softmax(x),
        }
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        ensure_finite("leaky_relu", self.data(x))?;
        let d = self.data(x).iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        Ok(self.unary(x, d, Op::LeakyRelu(x, slope)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        ensure_finite("sigmoid", self.data(x))?;
        let d = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        Ok(self.unary(x, d, Op::Sigmoid(x)))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        ensure_finite("softplus", self.data(x))?;
        let d = self.data(x).iter().map(|&v| softplus(v)).collect();
        Ok(self.unary(x, d, Op::Softplus(x)))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let d = self.data(x).iter().map(|v| v.abs()).collect();
        self.unary(x, d, Op::Abs(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        ensure_finite("softmax", self.data(x))?;
        let (rows, k) = rows_cols(self.shape(x));
        let mut d = self.data(x).to_vec();
        for r in 0..rows {
            let row = &mut d[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Ok(self.unary(x, d, Op::Softmax(x)))
    }

    /// Euclidean norm of every row; result drops the last axis.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&s);
        let xd = self.data(x);
        let d = (0..rows)
            .map(|r| xd[r * cols..(r + 1) * cols].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let rg = self.rg(x);
        self.push(shape, d, Op::RowNorm(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column sums of a `[rows, C]` view; result has shape `[C]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let xd = self.data(x);
        let mut d = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in d.iter_mut().zip(&xd[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        self.push(vec![cols], d, Op::SumRows(x), rg)
    }

    /// Sum over the last axis; result drops that axis.
    pub fn sum_last_axis(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&s);
        let xd = self.data(x);
        let d = (0..rows).map(|r| xd[r * cols..(r + 1) * cols].iter().sum()).collect();
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let rg = self.rg(x);
        self.push(shape, d, Op::SumLastAxis(x), rg)
    }

    /// Divides every element of `x` by the one-element node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.data(s).len() != 1 {
            return Err(shape_err("div_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.data(s)[0];
        let d = self.data(x).iter().map(|v| v / sv).collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(self.shape(x).to_vec(), d, Op::DivScalar { x, s }, rg))
    }

    /// Row gather: `out[i, :] = x[idx[i], :]`, with output leading shape
    /// `lead` (`[M, K]` for a neighbor table, `[M]` for plain selection).
    pub fn gather(&mut self, x: Var, idx: Rc<[usize]>, lead: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("gather", &xs, lead));
        }
        let (n, c) = (xs[0], xs[1]);
        check_numel("gather", lead, idx.len())?;
        let k = *lead.last().unwrap();
        let xd = self.data(x);
        let mut d = Vec::with_capacity(idx.len() * c);
        for (pos, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(TensorError::Index {
                    row: pos / k,
                    col: pos % k,
                    index: i,
                    len: n,
                });
            }
            d.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let mut shape = lead.to_vec();
        shape.push(c);
        let rg = self.rg(x);
        Ok(self.push(shape, d, Op::Gather { x, idx }, rg))
    }

    /// `gather` with a plain `M×K` index table.
    pub fn gather_neighbors(&mut self, x: Var, idx: Rc<[usize]>, m: usize, k: usize) -> Result<Var> {
        self.gather(x, idx, &[m, k])
    }

    /// Reduces `[M, K, C]` over K. `Max` routes its subgradient to the first
    /// maximal neighbor; `WeightedSum` needs `w` of shape `[M, K]`.
    pub fn reduce_neighbors(&mut self, x: Var, kind: Reduce, w: Option<Var>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("reduce_neighbors", &s, &[3]));
        }
        let (m, k, c) = (s[0], s[1], s[2]);
        let xd = self.data(x);
        match kind {
            Reduce::Max => {
                let mut d = vec![f64::NEG_INFINITY; m * c];
                let mut argmax = vec![0usize; m * c];
                for i in 0..m {
                    for j in 0..k {
                        let row = &xd[(i * k + j) * c..(i * k + j + 1) * c];
                        for ch in 0..c {
                            if row[ch] > d[i * c + ch] {
                                d[i * c + ch] = row[ch];
                                argmax[i * c + ch] = j;
                            }
                        }
                    }
                }
                let rg = self.rg(x);
                Ok(self.push(vec![m, c], d, Op::MaxNeighbors { x, argmax }, rg))
            }
            Reduce::WeightedSum => {
                let w = w.ok_or(TensorError::MissingWeights("weighted_sum"))?;
                if self.shape(w) != [m, k] {
                    return Err(shape_err("weighted_sum", &s, self.shape(w)));
                }
                let wd = self.data(w);
                let mut d = vec![0.0; m * c];
                for i in 0..m {
                    let out = &mut d[i * c..(i + 1) * c];
                    for j in 0..k {
                        let wij = wd[i * k + j];
                        let row = &xd[(i * k + j) * c..(i * k + j + 1) * c];
                        for (o, v) in out.iter_mut().zip(row) {
                            *o += wij * v;
                        }
                    }
                }
                let rg = self.rg(x) || self.rg(w);
                Ok(self.push(vec![m, c], d, Op::WeightedSum { x, w }, rg))
            }
        }
    }

    /// Maximum over the last (channel) axis; ties go to the first channel.
    pub fn max_last_axis(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&s);
        let xd = self.data(x);
        let mut d = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            d.push(row[best]);
            argmax.push(best);
        }
        let shape = if s.len() > 1 { s[..s.len() - 1].to_vec() } else { vec![1] };
        let rg = self.rg(x);
        self.push(shape, d, Op::MaxLastAxis { x, argmax }, rg)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let (rows, _) = rows_cols(&first);
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(shape_err("concat", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut d = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                d.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, d, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Per-channel standardization over all rows followed by an affine
    /// scale/shift. Train mode uses batch statistics and records a running
    /// average update; eval mode reads the running statistics.
    pub fn normalize_features(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running: (BufferId, BufferId),
        store: &ParamStore,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (rows, c) = rows_cols(&s);
        if rows == 0 {
            return Err(TensorError::EmptyBatch("normalize_features"));
        }
        if self.data(scale).len() != c || self.data(shift).len() != c {
            return Err(shape_err("normalize_features", &s, self.shape(scale)));
        }
        let xd = self.data(x);
        let (mean, var, batch_stats) = match self.mode() {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(&xd[r * c..(r + 1) * c]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        let dlt = xd[r * c + ch] - mean[ch];
                        var[ch] += dlt * dlt;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var, true)
            }
            Mode::Eval => (
                store.buffer(running.0).data.clone(),
                store.buffer(running.1).data.clone(),
                false,
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (g, b) = (self.data(scale), self.data(shift));
        let mut xhat = vec![0.0; rows * c];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for ch in 0..c {
                let h = (xd[r * c + ch] - mean[ch]) * inv_std[ch];
                xhat[r * c + ch] = h;
                out[r * c + ch] = h * g[ch] + b[ch];
            }
        }
        if batch_stats {
            self.record_stats(StatUpdate {
                mean_buf: running.0,
                var_buf: running.1,
                batch_mean: mean,
                batch_var: var,
            });
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(
            s,
            out,
            Op::Norm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Nearest proper rotation to a 3×3 matrix `h` in the Frobenius inner
    /// product sense: `R = U·diag(1, 1, det(UVᵀ))·Vᵀ` from `h = UΣVᵀ`.
    /// This is the rotation step of weighted Kabsch alignment when `h` is the
    /// cross-covariance `Σ wᵢ (dstᵢ − d̄)(srcᵢ − s̄)ᵀ`.
    pub fn polar_rotation(&mut self, h: Var, rel_tol: f64) -> Result<Var> {
        if self.shape(h) != [3, 3] {
            return Err(shape_err("polar_rotation", self.shape(h), &[3, 3]));
        }
        ensure_finite("polar_rotation", self.data(h))?;
        let m = Matrix3::from_row_slice(self.data(h));
        let (u, sigma, v) = sorted_svd(&m);
        if sigma[1] <= rel_tol * sigma[0] || sigma[0] == 0.0 {
            return Err(TensorError::Degenerate {
                op: "polar_rotation",
                detail: format!("singular values {sigma:?}"),
            });
        }
        let d = (u * v.transpose()).determinant().signum();
        let mut u_c = u;
        let mut sig = sigma;
        if d < 0.0 {
            for r in 0..3 {
                u_c[(r, 2)] = -u_c[(r, 2)];
            }
            sig[2] = -sig[2];
        }
        let r = u_c * v.transpose();
        let data = row_major(&r);
        let rg = self.rg(h);
        Ok(self.push(
            vec![3, 3],
            data.to_vec(),
            Op::Polar {
                h,
                u: row_major(&u_c),
                v: row_major(&v),
                sigma: sig,
            },
            rg,
        ))
    }
}

pub(crate) fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

/// SVD with singular values sorted in descending order.
pub fn sorted_svd(m: &Matrix3<f64>) -> (Matrix3<f64>, [f64; 3], Matrix3<f64>) {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut us = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    let mut sig = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        us.set_column(dst, &u.column(src));
        vs.set_column(dst, &v.column(src));
        sig[dst] = s[src];
    }
    (us, sig, vs)
}
