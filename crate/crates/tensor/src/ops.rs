//! Numeric forward/backward kernels behind the graph operations.
//!
//! Layouts: "channel" ops treat a tensor of shape `[N, C, rest...]` as
//! `N × C × L` with `L = prod(rest)` (1 when the rank is 2).

use crate::kernels::{col2im, gemm, im2col, ConvGeometry};

pub(crate) fn split_ncl(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected at least [N, C], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ---------------------------------------------------------------- activations

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ------------------------------------------------------------------ pointwise

/// `y[n, o, l] = Σ_c w[o, c] x[n, c, l] + b[o]`.
pub(crate) fn pointwise_forward(
    x: &[f64],
    (n, c, l): (usize, usize, usize),
    w: &[f64],
    o: usize,
    b: Option<&[f64]>,
) -> Vec<f64> {
    let mut y = vec![0.0; n * o * l];
    if l == 1 {
        // One gemm over the whole batch: Y[n, o] = X[n, c] · Wᵀ.
        gemm(n, c, o, x, false, w, true, &mut y, 0.0);
        if let Some(b) = b {
            for row in y.chunks_mut(o) {
                row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
            }
        }
        return y;
    }
    for i in 0..n {
        let yi = &mut y[i * o * l..(i + 1) * o * l];
        gemm(
            o,
            c,
            l,
            w,
            false,
            &x[i * c * l..(i + 1) * c * l],
            false,
            yi,
            0.0,
        );
        if let Some(b) = b {
            for (row, bv) in yi.chunks_mut(l).zip(b) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

pub(crate) struct PointwiseGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn pointwise_backward(
    dy: &[f64],
    x: &[f64],
    (n, c, l): (usize, usize, usize),
    w: &[f64],
    o: usize,
    need: (bool, bool, bool),
) -> PointwiseGrads {
    let (need_x, need_w, need_b) = need;
    let mut dx = need_x.then(|| vec![0.0; n * c * l]);
    let mut dw = need_w.then(|| vec![0.0; o * c]);
    let mut db = need_b.then(|| vec![0.0; o]);
    if l == 1 {
        if let Some(dx) = dx.as_mut() {
            gemm(n, o, c, dy, false, w, false, dx, 0.0);
        }
        if let Some(dw) = dw.as_mut() {
            gemm(o, n, c, dy, true, x, false, dw, 0.0);
        }
        if let Some(db) = db.as_mut() {
            for row in dy.chunks(o) {
                db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
        }
        return PointwiseGrads { dx, dw, db };
    }
    for i in 0..n {
        let dyi = &dy[i * o * l..(i + 1) * o * l];
        if let Some(dx) = dx.as_mut() {
            gemm(
                c,
                o,
                l,
                w,
                true,
                dyi,
                false,
                &mut dx[i * c * l..(i + 1) * c * l],
                0.0,
            );
        }
        if let Some(dw) = dw.as_mut() {
            gemm(
                o,
                l,
                c,
                dyi,
                false,
                &x[i * c * l..(i + 1) * c * l],
                true,
                dw,
                1.0,
            );
        }
        if let Some(db) = db.as_mut() {
            for (d, row) in db.iter_mut().zip(dyi.chunks(l)) {
                *d += row.iter().sum::<f64>();
            }
        }
    }
    PointwiseGrads { dx, dw, db }
}

// ---------------------------------------------------------------------- conv

pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    geo: &ConvGeometry,
    w: &[f64],
    o: usize,
    b: Option<&[f64]>,
) -> Vec<f64> {
    let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
    let in_per = geo.channels * geo.height * geo.width;
    let mut y = vec![0.0; n * o * cols_n];
    let mut cols = vec![0.0; rows * cols_n];
    for i in 0..n {
        im2col(&x[i * in_per..(i + 1) * in_per], geo, &mut cols);
        let yi = &mut y[i * o * cols_n..(i + 1) * o * cols_n];
        gemm(o, rows, cols_n, w, false, &cols, false, yi, 0.0);
        if let Some(b) = b {
            for (row, bv) in yi.chunks_mut(cols_n).zip(b) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

pub(crate) fn conv2d_backward(
    dy: &[f64],
    x: &[f64],
    n: usize,
    geo: &ConvGeometry,
    w: &[f64],
    o: usize,
    need: (bool, bool, bool),
) -> PointwiseGrads {
    let (need_x, need_w, need_b) = need;
    let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
    let in_per = geo.channels * geo.height * geo.width;
    let mut dx = need_x.then(|| vec![0.0; n * in_per]);
    let mut dw = need_w.then(|| vec![0.0; o * rows]);
    let mut db = need_b.then(|| vec![0.0; o]);
    let mut cols = vec![0.0; rows * cols_n];
    for i in 0..n {
        let dyi = &dy[i * o * cols_n..(i + 1) * o * cols_n];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[i * in_per..(i + 1) * in_per], geo, &mut cols);
            gemm(o, cols_n, rows, dyi, false, &cols, true, dw, 1.0);
        }
        if let Some(db) = db.as_mut() {
            for (d, row) in db.iter_mut().zip(dyi.chunks(cols_n)) {
                *d += row.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, o, cols_n, w, true, dyi, false, &mut cols, 0.0);
            col2im(&cols, geo, &mut dx[i * in_per..(i + 1) * in_per]);
        }
    }
    PointwiseGrads { dx, dw, db }
}

// ---------------------------------------------------------------- normalizers

/// Statistics of one normalization: per-group mean and reciprocal std.
pub(crate) struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Group norm over `[N, C, L]`: each (sample, group) block of `C/G · L`
/// contiguous values is normalized, then scaled per channel.
pub(crate) fn group_norm_forward(
    x: &[f64],
    (n, c, l): (usize, usize, usize),
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, NormStats) {
    let cpg = c / groups;
    let block = cpg * l;
    let mut y = vec![0.0; x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for (bi, (xs, ys)) in x.chunks(block).zip(y.chunks_mut(block)).enumerate() {
        let m = xs.iter().sum::<f64>() / block as f64;
        let var = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / block as f64;
        let r = 1.0 / (var + eps).sqrt();
        let g0 = (bi % groups) * cpg;
        for (ci, (xr, yr)) in xs.chunks(l).zip(ys.chunks_mut(l)).enumerate() {
            let (ga, be) = (gamma[g0 + ci], beta[g0 + ci]);
            for (yv, xv) in yr.iter_mut().zip(xr) {
                *yv = (xv - m) * r * ga + be;
            }
        }
        mean.push(m);
        rstd.push(r);
    }
    (y, NormStats { mean, rstd })
}

pub(crate) fn group_norm_backward(
    dy: &[f64],
    x: &[f64],
    (_, c, l): (usize, usize, usize),
    groups: usize,
    gamma: &[f64],
    stats: &NormStats,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cpg = c / groups;
    let block = cpg * l;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dxhat = vec![0.0; block];
    let mut xhat = vec![0.0; block];
    for (bi, ((xs, dys), dxs)) in x
        .chunks(block)
        .zip(dy.chunks(block))
        .zip(dx.chunks_mut(block))
        .enumerate()
    {
        let (m, r) = (stats.mean[bi], stats.rstd[bi]);
        let g0 = (bi % groups) * cpg;
        let (mut s1, mut s2) = (0.0, 0.0);
        for ci in 0..cpg {
            let ch = g0 + ci;
            for j in ci * l..(ci + 1) * l {
                let xh = (xs[j] - m) * r;
                xhat[j] = xh;
                dgamma[ch] += dys[j] * xh;
                dbeta[ch] += dys[j];
                let d = dys[j] * gamma[ch];
                dxhat[j] = d;
                s1 += d;
                s2 += d * xh;
            }
        }
        let (m1, m2) = (s1 / block as f64, s2 / block as f64);
        for j in 0..block {
            dxs[j] = r * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (dx, dgamma, dbeta)
}

/// Layer norm over the channel axis at each `(n, l)` position.
pub(crate) fn channel_norm_forward(
    x: &[f64],
    (n, c, l): (usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, NormStats) {
    let mut y = vec![0.0; x.len()];
    let mut mean = vec![0.0; n * l];
    let mut rstd = vec![0.0; n * l];
    for i in 0..n {
        let xs = &x[i * c * l..(i + 1) * c * l];
        let ys = &mut y[i * c * l..(i + 1) * c * l];
        let ms = &mut mean[i * l..(i + 1) * l];
        let rs = &mut rstd[i * l..(i + 1) * l];
        for row in xs.chunks(l) {
            ms.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        ms.iter_mut().for_each(|m| *m /= c as f64);
        for row in xs.chunks(l) {
            for ((r, v), m) in rs.iter_mut().zip(row).zip(ms.iter()) {
                *r += (v - m) * (v - m);
            }
        }
        rs.iter_mut()
            .for_each(|r| *r = 1.0 / (*r / c as f64 + eps).sqrt());
        for (ch, (xr, yr)) in xs.chunks(l).zip(ys.chunks_mut(l)).enumerate() {
            for j in 0..l {
                yr[j] = (xr[j] - ms[j]) * rs[j] * gamma[ch] + beta[ch];
            }
        }
    }
    (y, NormStats { mean, rstd })
}

pub(crate) fn channel_norm_backward(
    dy: &[f64],
    x: &[f64],
    (n, c, l): (usize, usize, usize),
    gamma: &[f64],
    stats: &NormStats,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut s1 = vec![0.0; l];
    let mut s2 = vec![0.0; l];
    for i in 0..n {
        let base = i * c * l;
        let ms = &stats.mean[i * l..(i + 1) * l];
        let rs = &stats.rstd[i * l..(i + 1) * l];
        s1.iter_mut().for_each(|v| *v = 0.0);
        s2.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..c {
            for j in 0..l {
                let idx = base + ch * l + j;
                let xh = (x[idx] - ms[j]) * rs[j];
                dgamma[ch] += dy[idx] * xh;
                dbeta[ch] += dy[idx];
                let d = dy[idx] * gamma[ch];
                s1[j] += d;
                s2[j] += d * xh;
            }
        }
        for ch in 0..c {
            for j in 0..l {
                let idx = base + ch * l + j;
                let xh = (x[idx] - ms[j]) * rs[j];
                let d = dy[idx] * gamma[ch];
                dx[idx] = rs[j] * (d - s1[j] / c as f64 - xh * s2[j] / c as f64);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch statistics per channel over `(n, l)`: biased variance.
pub(crate) fn channel_moments(x: &[f64], (n, c, l): (usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let count = (n * l) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let row = &x[(i * c + ch) * l..(i * c + ch + 1) * l];
            mean[ch] += row.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for i in 0..n {
        for ch in 0..c {
            let row = &x[(i * c + ch) * l..(i * c + ch + 1) * l];
            var[ch] += row
                .iter()
                .map(|v| (v - mean[ch]) * (v - mean[ch]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Per-channel affine normalization with given mean and reciprocal std.
pub(crate) fn channel_standardize(
    x: &[f64],
    (n, c, l): (usize, usize, usize),
    mean: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * l..(i * c + ch + 1) * l;
            let (m, r, ga, be) = (mean[ch], rstd[ch], gamma[ch], beta[ch]);
            for (yv, xv) in y[range.clone()].iter_mut().zip(&x[range]) {
                *yv = (xv - m) * r * ga + be;
            }
        }
    }
    y
}

/// Backward of batch norm with batch statistics (`train = true`) or with
/// fixed running statistics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward(
    dy: &[f64],
    x: &[f64],
    (n, c, l): (usize, usize, usize),
    gamma: &[f64],
    mean: &[f64],
    rstd: &[f64],
    train: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let count = (n * l) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * l..(i * c + ch + 1) * l;
            for (d, xv) in dy[range.clone()].iter().zip(&x[range]) {
                dgamma[ch] += d * (xv - mean[ch]) * rstd[ch];
                dbeta[ch] += d;
            }
        }
    }
    let mut dx = vec![0.0; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * l..(i * c + ch + 1) * l;
            let (m, r, ga) = (mean[ch], rstd[ch], gamma[ch]);
            for ((o, d), xv) in dx[range.clone()]
                .iter_mut()
                .zip(&dy[range.clone()])
                .zip(&x[range])
            {
                *o = if train {
                    let xh = (xv - m) * r;
                    ga * r * (d - dbeta[ch] / count - xh * dgamma[ch] / count)
                } else {
                    ga * r * d
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ------------------------------------------------------------------- softmax

pub(crate) fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(width).zip(y.chunks_mut(width)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (yv, xv) in yr.iter_mut().zip(xr) {
            *yv = (xv - max).exp();
            total += *yv;
        }
        yr.iter_mut().for_each(|v| *v /= total);
    }
    y
}

pub(crate) fn softmax_rows_backward(dy: &[f64], y: &[f64], width: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((dr, yr), dxr) in dy
        .chunks(width)
        .zip(y.chunks(width))
        .zip(dx.chunks_mut(width))
    {
        let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
        for ((o, d), yv) in dxr.iter_mut().zip(dr).zip(yr) {
            *o = yv * (d - dot);
        }
    }
    dx
}

// -------------------------------------------------------------------- matmul

/// Batched `op(A) · op(B)`; returns the `[B, M, N]` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_matmul(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a[i * m * k..(i + 1) * m * k],
            ta,
            &b[i * k * n..(i + 1) * k * n],
            tb,
            &mut c[i * m * n..(i + 1) * m * n],
            0.0,
        );
    }
    c
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_matmul_backward(
    dc: &[f64],
    a: &[f64],
    b: &[f64],
    batch: usize,
    (m, k, n): (usize, usize, usize),
    ta: bool,
    tb: bool,
    need: (bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut da = need.0.then(|| vec![0.0; batch * m * k]);
    let mut db = need.1.then(|| vec![0.0; batch * k * n]);
    for i in 0..batch {
        let dci = &dc[i * m * n..(i + 1) * m * n];
        let ai = &a[i * m * k..(i + 1) * m * k];
        let bi = &b[i * k * n..(i + 1) * k * n];
        if let Some(da) = da.as_mut() {
            let out = &mut da[i * m * k..(i + 1) * m * k];
            if ta {
                gemm(k, n, m, bi, tb, dci, true, out, 0.0);
            } else {
                gemm(m, n, k, dci, false, bi, !tb, out, 0.0);
            }
        }
        if let Some(db) = db.as_mut() {
            let out = &mut db[i * k * n..(i + 1) * k * n];
            if tb {
                gemm(n, m, k, dci, true, ai, ta, out, 0.0);
            } else {
                gemm(k, m, n, ai, !ta, dci, false, out, 0.0);
            }
        }
    }
    (da, db)
}

// ------------------------------------------------------------------- spatial

/// Source index for nearest-neighbour resampling of `len` to `out` cells.
pub(crate) fn nearest_index(i: usize, len: usize, out: usize) -> usize {
    (i * len) / out
}

/// Window `[start, end)` of output cell `i` under adaptive average pooling.
pub(crate) fn adaptive_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = (i * len) / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

pub(crate) fn resize_nearest_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let iy = nearest_index(oy, h, oh);
            for ox in 0..ow {
                dst[oy * ow + ox] = src[iy * w + nearest_index(ox, w, ow)];
            }
        }
    }
    y
}

pub(crate) fn resize_nearest_backward(
    dy: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let iy = nearest_index(oy, h, oh);
            for ox in 0..ow {
                dst[iy * w + nearest_index(ox, w, ow)] += src[oy * ow + ox];
            }
        }
    }
    dx
}

pub(crate) fn adaptive_pool_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let mut total = 0.0;
                for iy in y0..y1 {
                    total += src[iy * w + x0..iy * w + x1].iter().sum::<f64>();
                }
                y[p * oh * ow + oy * ow + ox] = total / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    y
}

pub(crate) fn adaptive_pool_backward(
    dy: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let share = dy[p * oh * ow + oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    dst[iy * w + x0..iy * w + x1]
                        .iter_mut()
                        .for_each(|v| *v += share);
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------- loss

/// Mean cross-entropy over rows; returns (loss, softmax probabilities).
pub(crate) fn cross_entropy_forward(
    logits: &[f64],
    classes: usize,
    labels: &[usize],
) -> (f64, Vec<f64>) {
    let probs = softmax_rows(logits, classes);
    let mut loss = 0.0;
    for (&label, row) in labels.iter().zip(logits.chunks(classes)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    (loss / labels.len() as f64, probs)
}
