//! Forward constructors and reverse rules for every taped operation.

use super::gemm::gemm;
use super::tape::{BatchNormCache, GradSink, Node, Op, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn dim_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

#[inline]
fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::real(SQRT_2_OVER_PI);
    let a = T::real(GELU_CUBIC);
    let half = T::real(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::real(3.0) * a * x * x);
    (y, dy)
}

/// Tanh-approximated GELU.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    gelu_parts(x).0
}

fn softmax_rows_in_place<T: Real>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl<T: Real> Tape<T> {
    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, what: &str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(what, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Plain matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` over the last axis of `x`; leading axes are kept.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(dim_err("affine", &sx, &sw));
        }
        let (k, n) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(dim_err("affine bias", &sw, self.shape(b)));
            }
        }
        let m = self.value(x).len() / k;
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, b.is_some());
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::real(c);
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// Adds `tile` (shape `[L, D]`) to every consecutive `L`-row block of `x`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (sx, st) = (self.shape(x), self.shape(tile));
        let tlen = self.value(tile).len();
        if st.len() != 2 || *sx.last().unwrap() != st[1] || self.value(x).len() % tlen != 0 {
            return Err(dim_err("add_tiled", sx, st));
        }
        let t = self.value(tile).data();
        let mut value = self.value(x).clone();
        for block in value.data_mut().chunks_mut(tlen) {
            for (a, &b) in block.iter_mut().zip(t) {
                *a += b;
            }
        }
        Ok(self.push(value, Op::AddTiled(x, tile), &[x, tile]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), gelu_scalar)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    /// Softmax along the last axis, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let cols = value.cols();
        softmax_rows_in_place(value.data_mut(), cols);
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Normalizes over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(dim_err("layernorm", self.shape(x), self.shape(p)));
            }
        }
        let eps = T::real(eps);
        let dn = T::real(d as f64);
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for (r, (row, out)) in xv.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    fn bn_dims(&self, x: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::Dimension(format!("batchnorm needs [B, C, ...], got {s:?}")));
        }
        let spatial = s[2..].iter().product();
        Ok((s[0], s[1], spatial))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
    ) -> Result<Var> {
        let (b, c, s) = self.bn_dims(x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(dim_err("batchnorm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for i in base..base + s {
                    let h = (xv.data()[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = h * g[ci] + bt[ci];
                }
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Training-mode batch norm over `[B, C, ...]` using batch statistics.
    /// Returns the batch mean and unbiased variance for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchNormCache<T>)> {
        let (b, c, s) = self.bn_dims(x)?;
        if b < 2 {
            return Err(Error::Argument(format!(
                "training-mode batchnorm needs a batch of at least 2, got {b}"
            )));
        }
        let n = T::real((b * s) as f64);
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                mean[ci] += xv[base..base + s].iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                var[ci] += xv[base..base + s].iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
            }
        }
        let eps = T::real(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / n + eps).sqrt()).collect();
        let unbiased = var.iter().map(|&v| v / (n - T::one())).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std)?;
        Ok((out, BatchNormCache { mean, var: unbiased }))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.bn_dims(x)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Dimension(format!(
                "batchnorm running stats have {} entries, input has {c} channels",
                running_mean.len()
            )));
        }
        let eps = T::real(eps);
        let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, running_mean, inv_std)?;
        // Same forward arithmetic; only the reverse rule differs.
        if let Op::BatchNorm { x, gamma, beta, xhat, inv_std } =
            std::mem::replace(&mut self.nodes[out.0].op, Op::Leaf)
        {
            self.nodes[out.0].op = Op::BatchNormEval { x, gamma, beta, xhat, inv_std };
        }
        Ok(out)
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    /// `x: [B, C, H, W]`, `w: [Cout, C, 3, 3]`, `b: [Cout]` → `[B, Cout, H, W]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 {
            return Err(dim_err("conv3x3", &sx, &sw));
        }
        let cout = sw[0];
        if self.shape(b) != [cout] {
            return Err(dim_err("conv3x3 bias", &sw, self.shape(b)));
        }
        let (bn, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * wd;
        let k9 = c * 9;
        let cols = im2col(self.value(x).data(), bn, c, h, wd);
        let mut out_cl = vec![T::zero(); bn * hw * cout];
        gemm(bn * hw, k9, cout, &cols, false, self.value(w).data(), true, &mut out_cl, false);
        let bias = self.value(b).data();
        let mut out = vec![T::zero(); bn * cout * hw];
        for bi in 0..bn {
            for p in 0..hw {
                let src = &out_cl[(bi * hw + p) * cout..(bi * hw + p + 1) * cout];
                for co in 0..cout {
                    out[(bi * cout + co) * hw + p] = src[co] + bias[co];
                }
            }
        }
        let value = Tensor::from_parts(vec![bn, cout, h, wd], out);
        Ok(self.push(value, Op::Conv3x3 { x, w, b, cols }, &[x, w, b]))
    }

    /// Mean over all trailing spatial axes: `[B, C, ...]` → `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, s) = self.bn_dims(x)?;
        let inv = T::real(1.0 / s as f64);
        let data = self.value(x).data().chunks(s).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        Ok(self.push(Tensor::from_parts(vec![b, c], data), Op::GlobalAvgPool(x), &[x]))
    }

    /// Scaled dot-product attention with `heads` heads, applied independently
    /// within consecutive row groups of sizes `groups`. `q`, `k`, `v` are
    /// `[N, D]` with `N = sum(groups)`; no mixing happens across groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: &[usize], heads: usize) -> Result<Var> {
        self.same_shape("attention q/k", q, k)?;
        self.same_shape("attention q/v", q, v)?;
        let s = self.shape(q).to_vec();
        if s.len() != 2 || heads == 0 || s[1] % heads != 0 {
            return Err(Error::Dimension(format!("attention: {s:?} with {heads} heads")));
        }
        if groups.iter().sum::<usize>() != s[0] || groups.contains(&0) {
            return Err(Error::Dimension(format!("attention groups {groups:?} do not tile {} rows", s[0])));
        }
        let (d, dh) = (s[1], s[1] / heads);
        let scale = T::real(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); s[0] * d];
        let mut probs = Vec::with_capacity(groups.iter().map(|n| heads * n * n).sum());
        let mut offset = 0;
        for &n in groups {
            for h in 0..heads {
                let qh = head_block(qd, offset, n, d, h, dh);
                let kh = head_block(kd, offset, n, d, h, dh);
                let vh = head_block(vd, offset, n, d, h, dh);
                let mut p = vec![T::zero(); n * n];
                gemm(n, dh, n, &qh, false, &kh, true, &mut p, false);
                p.iter_mut().for_each(|x| *x *= scale);
                softmax_rows_in_place(&mut p, n);
                let mut oh = vec![T::zero(); n * dh];
                gemm(n, n, dh, &p, false, &vh, false, &mut oh, false);
                scatter_head_block(&mut out, &oh, offset, n, d, h, dh);
                probs.extend_from_slice(&p);
            }
            offset += n;
        }
        let op = Op::Attention { q, k, v, groups: groups.to_vec(), heads, probs };
        Ok(self.push(Tensor::from_parts(s, out), op, &[q, k, v]))
    }

    /// Selects rows (over the last axis) in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::Argument(format!("gather_rows: indices out of range for {n} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&xv.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::from_parts(vec![rows.len(), d], data);
        Ok(self.push(value, Op::GatherRows(x, rows.to_vec()), &[x]))
    }

    /// `out = base; out[rows[j]] += src[j]`. Rows must be distinct.
    pub fn index_add(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (bv, sv) = (self.value(base), self.value(src));
        let d = bv.cols();
        if sv.cols() != d || sv.rows() != rows.len() || rows.iter().any(|&r| r >= bv.rows()) {
            return Err(dim_err("index_add", bv.shape(), sv.shape()));
        }
        let mut value = bv.clone();
        for (j, &r) in rows.iter().enumerate() {
            let dst = &mut value.data_mut()[r * d..(r + 1) * d];
            for (a, &b) in dst.iter_mut().zip(&sv.data()[j * d..(j + 1) * d]) {
                *a += b;
            }
        }
        Ok(self.push(value, Op::IndexAdd { base, src, rows: rows.to_vec() }, &[base, src]))
    }

    /// `out = x; out[rows[j]] *= gate[j]`, with `gate` holding one value per entry of `rows`.
    pub fn gate_rows(&mut self, x: Var, gate: Var, rows: &[usize]) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gate));
        let d = xv.cols();
        if gv.len() != rows.len() || rows.iter().any(|&r| r >= xv.rows()) {
            return Err(dim_err("gate_rows", xv.shape(), gv.shape()));
        }
        let mut value = xv.clone();
        for (j, &r) in rows.iter().enumerate() {
            let g = gv.data()[j];
            value.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|a| *a *= g);
        }
        Ok(self.push(value, Op::GateRows { x, gate, rows: rows.to_vec() }, &[x, gate]))
    }

    /// Concatenates rank-2 tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(dim_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::from_parts(vec![rows, total], data);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks rank-2 tensors along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).cols() != d {
                return Err(dim_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / d;
        let value = Tensor::from_parts(vec![rows, d], data);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Averages each of `groups` consecutive row blocks: `[G·n, D]` → `[G, D]`.
    pub fn mean_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        if groups == 0 || rows % groups != 0 {
            return Err(Error::Dimension(format!("mean_groups: {rows} rows into {groups} groups")));
        }
        let n = rows / groups;
        let inv = T::real(1.0 / n as f64);
        let mut data = vec![T::zero(); groups * d];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let dst = &mut data[(r / n) * d..(r / n + 1) * d];
            for (a, &b) in dst.iter_mut().zip(row) {
                *a += b * inv;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![groups, d], data), Op::MeanGroups(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: logits {:?} with {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let c = lv.cols();
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Argument(format!("label {bad} outside 0..{c}")));
        }
        let mut probs = lv.data().to_vec();
        softmax_rows_in_place(&mut probs, c);
        let mut loss = T::zero();
        for (row, &l) in lv.data().chunks(c).zip(labels) {
            // log-sum-exp form keeps saturated logits finite.
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[l];
        }
        loss /= T::real(labels.len() as f64);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean squared error averaged over every entry (batch and features).
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = T::real(p.len() as f64);
        let loss = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target), &[pred, target]))
    }
}

fn head_block<T: Real>(data: &[T], offset: usize, n: usize, d: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * dh);
    for r in offset..offset + n {
        out.extend_from_slice(&data[r * d + h * dh..r * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head_block<T: Real>(dst: &mut [T], src: &[T], offset: usize, n: usize, d: usize, h: usize, dh: usize) {
    for i in 0..n {
        let r = offset + i;
        for (a, &b) in dst[r * d + h * dh..r * d + (h + 1) * dh].iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *a += b;
        }
    }
}

fn im2col<T: Real>(x: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let k9 = c * 9;
    let mut cols = vec![T::zero(); b * h * w * k9];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = &mut cols[((bi * h + y) * w + xx) * k9..((bi * h + y) * w + xx + 1) * k9];
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            row[ci * 9 + ky * 3 + kx] = plane[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], dx: &mut [T], b: usize, c: usize, h: usize, w: usize) {
    let k9 = c * 9;
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = &cols[((bi * h + y) * w + xx) * k9..((bi * h + y) * w + xx + 1) * k9];
                for ci in 0..c {
                    let plane = &mut dx[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            plane[sy as usize * w + sx as usize] += row[ci * 9 + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn norm_backward<T: Real>(
    g: &[T],
    nodes: &[Node<T>],
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    shape: NormShape,
    inv_std: &[T],
    batch_stats: bool,
    sink: &mut GradSink<'_, T>,
) {
    let NormShape { outer, channels, inner, by_channel } = shape;
    let gam = nodes[gamma.0].value.data();
    let group = |o: usize, ch: usize| if by_channel { ch } else { o };
    let at = |o: usize, ch: usize| (o * channels + ch) * inner;
    sink.with(gamma, |dg| {
        for o in 0..outer {
            for (ch, d) in dg.iter_mut().enumerate() {
                let i = at(o, ch);
                for s in i..i + inner {
                    *d += g[s] * xhat[s];
                }
            }
        }
    });
    sink.with(beta, |db| {
        for o in 0..outer {
            for (ch, d) in db.iter_mut().enumerate() {
                let i = at(o, ch);
                for &gs in &g[i..i + inner] {
                    *d += gs;
                }
            }
        }
    });
    if !sink.wants(x) {
        return;
    }
    if !batch_stats {
        sink.with(x, |dx| {
            for o in 0..outer {
                for ch in 0..channels {
                    let k = gam[ch] * inv_std[group(o, ch)];
                    let i = at(o, ch);
                    for s in i..i + inner {
                        dx[s] += g[s] * k;
                    }
                }
            }
        });
        return;
    }
    let groups = if by_channel { channels } else { outer };
    let n = T::real((g.len() / groups) as f64);
    let mut sum_d = vec![T::zero(); groups];
    let mut sum_dx = vec![T::zero(); groups];
    for o in 0..outer {
        for ch in 0..channels {
            let k = group(o, ch);
            let i = at(o, ch);
            for s in i..i + inner {
                let d = g[s] * gam[ch];
                sum_d[k] += d;
                sum_dx[k] += d * xhat[s];
            }
        }
    }
    sink.with(x, |dx| {
        for o in 0..outer {
            for ch in 0..channels {
                let k = group(o, ch);
                let scale = inv_std[k] / n;
                let (sd, sdx, gc) = (sum_d[k], sum_dx[k], gam[ch] * n);
                let i = at(o, ch);
                for s in i..i + inner {
                    dx[s] += scale * (gc * g[s] - sd - xhat[s] * sdx);
                }
            }
        }
    });
}

/// `[outer, channels, inner]` view of a normalized tensor. Statistics are
/// per channel (batch norm) or per outer row (layer norm).
#[derive(Clone, Copy)]
struct NormShape {
    outer: usize,
    channels: usize,
    inner: usize,
    by_channel: bool,
}

/// Reverse rule for one node: distributes `g` (dL/d node) to its inputs.
pub(crate) fn backward<T: Real>(node: &Node<T>, g: &[T], nodes: &[Node<T>], sink: &mut GradSink<'_, T>) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Reshape(x) => sink.add(*x, g),
        Op::MatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            sink.with(*a, |da| gemm(m, n, k, g, false, val(*b).data(), true, da, true));
            sink.with(*b, |db| gemm(k, m, n, val(*a).data(), true, g, false, db, true));
        }
        Op::Linear { x, w, b } => {
            let sw = val(*w).shape();
            let (k, n) = (sw[0], sw[1]);
            let m = g.len() / n;
            sink.with(*x, |dx| gemm(m, n, k, g, false, val(*w).data(), true, dx, true));
            sink.with(*w, |dw| gemm(k, m, n, val(*x).data(), true, g, false, dw, true));
            if let Some(b) = b {
                sink.with(*b, |db| {
                    for row in g.chunks(n) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                });
            }
        }
        Op::Add(a, b) => {
            sink.add(*a, g);
            sink.add(*b, g);
        }
        Op::Sub(a, b) => {
            sink.add(*a, g);
            sink.with(*b, |db| db.iter_mut().zip(g).for_each(|(d, &v)| *d -= v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            sink.with(*a, |da| {
                for i in 0..g.len() {
                    da[i] += g[i] * bv[i];
                }
            });
            sink.with(*b, |db| {
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            });
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            sink.with(*a, |da| {
                for i in 0..g.len() {
                    da[i] += g[i] / bv[i];
                }
            });
            sink.with(*b, |db| {
                for i in 0..g.len() {
                    db[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }
        Op::Scale(x, c) => sink.with(*x, |dx| dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v * *c)),
        Op::AddTiled(x, tile) => {
            sink.add(*x, g);
            let tlen = val(*tile).len();
            sink.with(*tile, |dt| {
                for block in g.chunks(tlen) {
                    dt.iter_mut().zip(block).for_each(|(d, &v)| *d += v);
                }
            });
        }
        Op::Relu(x) => {
            let xv = val(*x).data();
            sink.with(*x, |dx| {
                for i in 0..g.len() {
                    if xv[i] > T::zero() {
                        dx[i] += g[i];
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = val(*x).data();
            sink.with(*x, |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] * gelu_parts(xv[i]).1;
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            sink.with(*x, |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            });
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let cols = node.value.cols();
            sink.with(*x, |dx| {
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = val(*gamma).len();
            let rows = g.len() / d;
            let shape = NormShape { outer: rows, channels: d, inner: 1, by_channel: false };
            norm_backward(g, nodes, *x, *gamma, *beta, xhat, shape, inv_std, true, sink);
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std } | Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
            let s = val(*x).shape();
            let (b, c) = (s[0], s[1]);
            let sp: usize = s[2..].iter().product();
            let train = matches!(node.op, Op::BatchNorm { .. });
            let shape = NormShape { outer: b, channels: c, inner: sp, by_channel: true };
            norm_backward(g, nodes, *x, *gamma, *beta, xhat, shape, inv_std, train, sink);
        }
        Op::Conv3x3 { x, w, b, cols } => {
            let s = val(*x).shape();
            let (bn, c, h, wd) = (s[0], s[1], s[2], s[3]);
            let cout = val(*w).shape()[0];
            let hw = h * wd;
            let mut g_cl = vec![T::zero(); bn * hw * cout];
            for bi in 0..bn {
                for co in 0..cout {
                    for p in 0..hw {
                        g_cl[(bi * hw + p) * cout + co] = g[(bi * cout + co) * hw + p];
                    }
                }
            }
            sink.with(*w, |dw| gemm(cout, bn * hw, c * 9, &g_cl, true, cols, false, dw, true));
            sink.with(*b, |db| {
                for row in g_cl.chunks(cout) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
            });
            if sink.wants(*x) {
                let mut dcols = vec![T::zero(); bn * hw * c * 9];
                gemm(bn * hw, cout, c * 9, &g_cl, false, val(*w).data(), false, &mut dcols, false);
                sink.with(*x, |dx| col2im(&dcols, dx, bn, c, h, wd));
            }
        }
        Op::GlobalAvgPool(x) => {
            let xv = val(*x);
            let s = xv.len() / g.len();
            let inv = T::real(1.0 / s as f64);
            sink.with(*x, |dx| {
                for (ch, &gv) in dx.chunks_mut(s).zip(g) {
                    ch.iter_mut().for_each(|d| *d += gv * inv);
                }
            });
        }
        Op::Attention { q, k, v, groups, heads, probs } => {
            let d = val(*q).cols();
            let dh = d / heads;
            let scale = T::real(1.0 / (dh as f64).sqrt());
            let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
            let n_total = val(*q).rows();
            let mut dq = vec![T::zero(); n_total * d];
            let mut dk = vec![T::zero(); n_total * d];
            let mut dv = vec![T::zero(); n_total * d];
            let (mut offset, mut poff) = (0, 0);
            for &n in groups {
                for h in 0..*heads {
                    let p = &probs[poff..poff + n * n];
                    poff += n * n;
                    let qh = head_block(qd, offset, n, d, h, dh);
                    let kh = head_block(kd, offset, n, d, h, dh);
                    let vh = head_block(vd, offset, n, d, h, dh);
                    let goh = head_block(g, offset, n, d, h, dh);
                    let mut dp = vec![T::zero(); n * n];
                    gemm(n, dh, n, &goh, false, &vh, true, &mut dp, false);
                    let mut dvh = vec![T::zero(); n * dh];
                    gemm(n, n, dh, p, true, &goh, false, &mut dvh, false);
                    for r in 0..n {
                        let pr = &p[r * n..(r + 1) * n];
                        let dr = &mut dp[r * n..(r + 1) * n];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = pr[j] * (dr[j] - dot) * scale;
                        }
                    }
                    let mut dqh = vec![T::zero(); n * dh];
                    gemm(n, n, dh, &dp, false, &kh, false, &mut dqh, false);
                    let mut dkh = vec![T::zero(); n * dh];
                    gemm(n, n, dh, &dp, true, &qh, false, &mut dkh, false);
                    scatter_head_block(&mut dq, &dqh, offset, n, d, h, dh);
                    scatter_head_block(&mut dk, &dkh, offset, n, d, h, dh);
                    scatter_head_block(&mut dv, &dvh, offset, n, d, h, dh);
                }
                offset += n;
            }
            sink.add(*q, &dq);
            sink.add(*k, &dk);
            sink.add(*v, &dv);
        }
        Op::GatherRows(x, rows) => {
            let d = node.value.cols();
            sink.with(*x, |dx| {
                for (j, &r) in rows.iter().enumerate() {
                    dx[r * d..(r + 1) * d].iter_mut().zip(&g[j * d..(j + 1) * d]).for_each(|(a, &b)| *a += b);
                }
            });
        }
        Op::IndexAdd { base, src, rows } => {
            let d = node.value.cols();
            sink.add(*base, g);
            sink.with(*src, |ds| {
                for (j, &r) in rows.iter().enumerate() {
                    ds[j * d..(j + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, &b)| *a += b);
                }
            });
        }
        Op::GateRows { x, gate, rows } => {
            let d = node.value.cols();
            let (xv, gv) = (val(*x).data(), val(*gate).data());
            sink.with(*x, |dx| {
                dx.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                for (j, &r) in rows.iter().enumerate() {
                    let gj = gv[j];
                    for i in r * d..(r + 1) * d {
                        dx[i] += g[i] * (gj - T::one());
                    }
                }
            });
            sink.with(*gate, |dg| {
                for (j, &r) in rows.iter().enumerate() {
                    dg[j] += (r * d..(r + 1) * d).map(|i| g[i] * xv[i]).sum::<T>();
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut start = 0;
            for &p in parts {
                let w = val(p).cols();
                sink.with(p, |dp| {
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&g[r * total + start..r * total + start + w])
                            .for_each(|(a, &b)| *a += b);
                    }
                });
                start += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let len = val(p).len();
                sink.add(p, &g[start..start + len]);
                start += len;
            }
        }
        Op::MeanGroups(x) => {
            let xv = val(*x);
            let d = xv.cols();
            let groups = g.len() / d;
            let n = xv.rows() / groups;
            let inv = T::real(1.0 / n as f64);
            sink.with(*x, |dx| {
                for (r, row) in dx.chunks_mut(d).enumerate() {
                    let gr = &g[(r / n) * d..(r / n + 1) * d];
                    row.iter_mut().zip(gr).for_each(|(a, &b)| *a += b * inv);
                }
            });
        }
        Op::Sum(x) => sink.with(*x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
        Op::CrossEntropy { logits, labels, probs } => {
            let c = val(*logits).cols();
            let scale = g[0] / T::real(labels.len() as f64);
            sink.with(*logits, |dl| {
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == l { T::one() } else { T::zero() };
                        dl[r * c + j] += scale * (probs[r * c + j] - target);
                    }
                }
            });
        }
        Op::Mse(pred, target) => {
            let (p, t) = (val(*pred).data(), val(*target).data());
            let scale = g[0] * T::real(2.0 / p.len() as f64);
            sink.with(*pred, |dp| {
                for i in 0..p.len() {
                    dp[i] += scale * (p[i] - t[i]);
                }
            });
            sink.with(*target, |dt| {
                for i in 0..p.len() {
                    dt[i] -= scale * (p[i] - t[i]);
                }
            });
        }
    }
}
