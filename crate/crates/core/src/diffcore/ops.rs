//! Forward and backward kernels for the differentiable operations.
//!
//! Every kernel is a pure function of its inputs. Backward kernels take the
//! upstream gradient and return (or accumulate) gradients for each input.

use super::Array;
use crate::error::{invalid, shape, Error, Result};

/// `a[n x k] * b[k x m]`, accumulated into `out[n x m]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a[n x k]^T * b[n x m]`, accumulated into `out[k x m]`.
pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a[n x m] * b[k x m]^T`, accumulated into `out[n x k]`.
pub(crate) fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] += dot(arow, brow);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `y = x W + b` for `x[N x Din]`, `W[Din x Dout]`, `b[Dout]`.
pub fn affine(x: &Array, w: &Array, b: &Array) -> Result<Array> {
    let (n, din, dout) = affine_dims(x, w, b)?;
    let mut y = vec![0.0; n * dout];
    for row in y.chunks_mut(dout) {
        row.copy_from_slice(b.data());
    }
    matmul_acc(x.data(), w.data(), &mut y, n, din, dout);
    Array::from_vec(&[n, dout], y)
}

/// Gradients of `affine` with respect to `(x, W, b)`.
pub fn affine_backward(x: &Array, w: &Array, dy: &Array) -> Result<(Array, Array, Array)> {
    let n = x.rows();
    let din = x.cols();
    if w.shape() != [din, dy.cols()] || dy.rows() != n {
        return Err(shape("affine_backward", "upstream gradient shape"));
    }
    let dout = dy.cols();
    let mut dx = vec![0.0; n * din];
    let mut dw = vec![0.0; din * dout];
    let mut db = vec![0.0; dout];
    affine_backward_acc(x.data(), w.data(), dy.data(), n, din, dout, Some(&mut dx), &mut dw, &mut db);
    Ok((
        Array::from_vec(&[n, din], dx)?,
        Array::from_vec(&[din, dout], dw)?,
        Array::from_vec(&[dout], db)?,
    ))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_backward_acc(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    if let Some(dx) = dx {
        matmul_a_bt_acc(dy, w, dx, n, dout, din);
    }
    matmul_at_b_acc(x, dy, dw, n, din, dout);
    for row in dy.chunks(dout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

fn affine_dims(x: &Array, w: &Array, b: &Array) -> Result<(usize, usize, usize)> {
    if x.shape().len() != 2 || w.shape().len() != 2 {
        return Err(shape("affine", "x and W must be matrices"));
    }
    let (n, din) = (x.shape()[0], x.shape()[1]);
    if w.shape()[0] != din {
        return Err(shape(
            "affine",
            format!("x has {din} columns but W has {} rows", w.shape()[0]),
        ));
    }
    let dout = w.shape()[1];
    if b.len() != dout {
        return Err(shape("affine", format!("bias has {} entries, expected {dout}", b.len())));
    }
    Ok((n, din, dout))
}

/// Max-subtracted softmax of one slice, written into `out`.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Softmax over the last axis.
pub fn softmax_last_dim(x: &Array) -> Result<Array> {
    if !x.is_finite() {
        return Err(Error::NonFinite("softmax_last_dim input"));
    }
    let k = x.cols();
    let mut y = vec![0.0; x.len()];
    for (xs, ys) in x.data().chunks(k).zip(y.chunks_mut(k)) {
        softmax_into(xs, ys);
    }
    Array::from_vec(x.shape(), y)
}

/// Gradient through softmax given its output `y` and upstream `dy`.
pub fn softmax_backward(y: &Array, dy: &Array) -> Result<Array> {
    if y.shape() != dy.shape() {
        return Err(shape("softmax_backward", "y and dy differ"));
    }
    let k = y.cols();
    let mut dx = vec![0.0; y.len()];
    for ((ys, gs), out) in y.data().chunks(k).zip(dy.data().chunks(k)).zip(dx.chunks_mut(k)) {
        softmax_backward_slice(ys, gs, out);
    }
    Array::from_vec(y.shape(), dx)
}

pub(crate) fn softmax_backward_slice(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let s = dot(y, dy);
    for ((d, &p), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d = p * (g - s);
    }
}

/// Boolean attention mask: `allowed(i, j)` means position `i` may attend to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    size: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn full(size: usize) -> Self {
        Mask {
            size,
            bits: vec![true; size * size],
        }
    }

    pub fn identity(size: usize) -> Self {
        Self::from_fn(size, |i, j| i == j)
    }

    pub fn lower_triangular(size: usize) -> Self {
        Self::from_fn(size, |i, j| j <= i)
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                bits.push(f(i, j));
            }
        }
        Mask { size, bits }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.size..(i + 1) * self.size]
    }

    fn allowed_indices(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &b)| b.then_some(j))
            .collect()
    }

    /// Top-left `n x n` corner.
    pub fn truncate(&self, n: usize) -> Mask {
        Self::from_fn(n, |i, j| self.allowed(i, j))
    }
}

/// Intermediate values of a single-head attention forward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Per row: allowed key positions and their weights.
    weights: Vec<(Vec<usize>, Vec<f64>)>,
}

/// Scaled dot-product self-attention restricted by `mask`.
///
/// Row `i` of the output is `sum_j a_ij (x_j Wv)` over exactly the positions
/// with `mask(i, j)`; disallowed positions are never read, so they cannot
/// influence row `i` at all.
pub fn masked_self_attention(
    x: &Array,
    mask: &Mask,
    wq: &Array,
    wk: &Array,
    wv: &Array,
) -> Result<(Array, AttentionCache)> {
    let t = x.rows();
    let d = x.cols();
    if mask.size() != t {
        return Err(shape(
            "masked_self_attention",
            format!("mask is {0}x{0} but input has {t} rows", mask.size()),
        ));
    }
    for w in [wq, wk, wv] {
        if w.shape() != [d, d] {
            return Err(shape("masked_self_attention", "projection must be D x D"));
        }
    }
    let mut q = vec![0.0; t * d];
    let mut k = vec![0.0; t * d];
    let mut v = vec![0.0; t * d];
    matmul_acc(x.data(), wq.data(), &mut q, t, d, d);
    matmul_acc(x.data(), wk.data(), &mut k, t, d, d);
    matmul_acc(x.data(), wv.data(), &mut v, t, d, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut weights = Vec::with_capacity(t);
    for i in 0..t {
        let idx = mask.allowed_indices(i);
        if idx.is_empty() {
            return Err(invalid(
                "masked_self_attention",
                format!("mask row {i} allows no positions"),
            ));
        }
        let qi = &q[i * d..(i + 1) * d];
        let scores: Vec<f64> = idx.iter().map(|&j| dot(qi, &k[j * d..(j + 1) * d]) * scale).collect();
        let mut a = vec![0.0; idx.len()];
        softmax_into(&scores, &mut a);
        let orow = &mut out[i * d..(i + 1) * d];
        for (&j, &aw) in idx.iter().zip(&a) {
            for (o, vv) in orow.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += aw * vv;
            }
        }
        weights.push((idx, a));
    }
    Ok((Array::from_vec(&[t, d], out)?, AttentionCache { q, k, v, weights }))
}

/// Backward of [`masked_self_attention`]; gradients are accumulated into the
/// provided buffers (`dx` is `T x D`, the weight grads are `D x D`).
pub fn masked_self_attention_backward(
    x: &Array,
    wq: &Array,
    wk: &Array,
    wv: &Array,
    cache: &AttentionCache,
    dout: &[f64],
    dx: &mut [f64],
    dwq: &mut [f64],
    dwk: &mut [f64],
    dwv: &mut [f64],
) {
    let t = x.rows();
    let d = x.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let (q, k, v) = (&cache.q, &cache.k, &cache.v);
    for i in 0..t {
        let (idx, a) = &cache.weights[i];
        let gi = &dout[i * d..(i + 1) * d];
        let mut da = Vec::with_capacity(idx.len());
        for (&j, &aw) in idx.iter().zip(a) {
            da.push(dot(gi, &v[j * d..(j + 1) * d]));
            for (dvv, g) in dv[j * d..(j + 1) * d].iter_mut().zip(gi) {
                *dvv += aw * g;
            }
        }
        let s = dot(a, &da);
        let qi = &q[i * d..(i + 1) * d];
        for ((&j, &aw), &dav) in idx.iter().zip(a).zip(&da) {
            let ds = aw * (dav - s) * scale;
            if ds == 0.0 {
                continue;
            }
            let kj = &k[j * d..(j + 1) * d];
            for c in 0..d {
                dq[i * d + c] += ds * kj[c];
                dk[j * d + c] += ds * qi[c];
            }
        }
    }
    for (dproj, w, dw) in [(&dq, wq, dwq), (&dk, wk, dwk), (&dv, wv, dwv)] {
        matmul_a_bt_acc(dproj, w.data(), dx, t, d, d);
        matmul_at_b_acc(x.data(), dproj, dw, t, d, d);
    }
}

/// Cached activations of one gated recurrent step.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub z: Vec<f64>,
    pub c: Vec<f64>,
}

/// Weights of the gated recurrence
/// `z = sigmoid(x Wz + h Uz + bz)`, `c = tanh(x Wc + h Uc + bc)`,
/// `h' = (1 - z) * h + z * c`.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentWeights<'a> {
    pub wz: &'a Array,
    pub uz: &'a Array,
    pub bz: &'a Array,
    pub wc: &'a Array,
    pub uc: &'a Array,
    pub bc: &'a Array,
}

impl RecurrentWeights<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.wz.rows(), self.wz.cols())
    }

    fn check(&self, din: usize, d: usize) -> Result<()> {
        let ok = self.wz.shape() == [din, d]
            && self.wc.shape() == [din, d]
            && self.uz.shape() == [d, d]
            && self.uc.shape() == [d, d]
            && self.bz.len() == d
            && self.bc.len() == d;
        if ok {
            Ok(())
        } else {
            Err(shape("recurrent_step", "weight shapes disagree with input/state sizes"))
        }
    }
}

/// One step of the gated recurrence.
pub fn recurrent_step(h_prev: &[f64], x: &[f64], w: RecurrentWeights<'_>) -> Result<(Vec<f64>, StepCache)> {
    let (din, d) = w.dims();
    if x.len() != din || h_prev.len() != d {
        return Err(shape(
            "recurrent_step",
            format!("x has {} values (want {din}), h has {} (want {d})", x.len(), h_prev.len()),
        ));
    }
    w.check(din, d)?;
    let mut zpre = w.bz.data().to_vec();
    let mut cpre = w.bc.data().to_vec();
    matmul_acc(x, w.wz.data(), &mut zpre, 1, din, d);
    matmul_acc(h_prev, w.uz.data(), &mut zpre, 1, d, d);
    matmul_acc(x, w.wc.data(), &mut cpre, 1, din, d);
    matmul_acc(h_prev, w.uc.data(), &mut cpre, 1, d, d);
    let z: Vec<f64> = zpre.iter().map(|&v| sigmoid(v)).collect();
    let c: Vec<f64> = cpre.iter().map(|v| v.tanh()).collect();
    let h = (0..d).map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * c[i]).collect();
    Ok((h, StepCache { z, c }))
}

/// Gradient buffers for the six recurrence weights.
#[derive(Debug)]
pub struct RecurrentGrads<'a> {
    pub wz: &'a mut [f64],
    pub uz: &'a mut [f64],
    pub bz: &'a mut [f64],
    pub wc: &'a mut [f64],
    pub uc: &'a mut [f64],
    pub bc: &'a mut [f64],
}

/// Backward of one step. Returns `(dh_prev, dx)` and accumulates weight
/// gradients.
pub fn recurrent_step_backward(
    h_prev: &[f64],
    x: &[f64],
    w: RecurrentWeights<'_>,
    cache: &StepCache,
    dh: &[f64],
    g: &mut RecurrentGrads<'_>,
) -> (Vec<f64>, Vec<f64>) {
    let (din, d) = w.dims();
    let mut dh_prev = vec![0.0; d];
    let mut dzpre = vec![0.0; d];
    let mut dcpre = vec![0.0; d];
    for i in 0..d {
        let z = cache.z[i];
        let c = cache.c[i];
        dh_prev[i] = dh[i] * (1.0 - z);
        let dz = dh[i] * (c - h_prev[i]);
        let dc = dh[i] * z;
        dzpre[i] = dz * z * (1.0 - z);
        dcpre[i] = dc * (1.0 - c * c);
    }
    let mut dx = vec![0.0; din];
    matmul_a_bt_acc(&dzpre, w.wz.data(), &mut dx, 1, d, din);
    matmul_a_bt_acc(&dcpre, w.wc.data(), &mut dx, 1, d, din);
    matmul_a_bt_acc(&dzpre, w.uz.data(), &mut dh_prev, 1, d, d);
    matmul_a_bt_acc(&dcpre, w.uc.data(), &mut dh_prev, 1, d, d);
    matmul_at_b_acc(x, &dzpre, g.wz, 1, din, d);
    matmul_at_b_acc(x, &dcpre, g.wc, 1, din, d);
    matmul_at_b_acc(h_prev, &dzpre, g.uz, 1, d, d);
    matmul_at_b_acc(h_prev, &dcpre, g.uc, 1, d, d);
    for i in 0..d {
        g.bz[i] += dzpre[i];
        g.bc[i] += dcpre[i];
    }
    (dh_prev, dx)
}
