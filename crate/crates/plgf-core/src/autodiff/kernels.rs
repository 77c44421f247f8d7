//! Pure array kernels shared by the tape's forward and backward passes.
//!
//! Everything here is shape-checked by the caller and operates on owned
//! standard-layout arrays. Convolutions are stride-1 (the network only ever
//! changes resolution through pooling, pixel shuffle, and nearest upsampling).

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, Axis, Ix2, Ix4, IxDyn};

use super::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Edge replication; keeps spatially constant inputs constant.
    Replicate,
}

pub fn reshape<E: Element>(x: &ArrayD<E>, shape: &[usize]) -> ArrayD<E> {
    let flat: Vec<E> = x.iter().copied().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("reshape: element count mismatch")
}

fn as4<E: Element>(x: &ArrayD<E>) -> ndarray::ArrayView4<'_, E> {
    x.view().into_dimensionality::<Ix4>().expect("expected 4-d array")
}

fn as2<E: Element>(x: &ArrayD<E>) -> ArrayView2<'_, E> {
    x.view().into_dimensionality::<Ix2>().expect("expected 2-d array")
}

pub fn pad2d<E: Element>(x: &ArrayD<E>, p: usize, mode: PadMode) -> Array4<E> {
    let x = as4(x);
    let (b, c, h, w) = x.dim();
    if p == 0 {
        return x.to_owned();
    }
    let mut out = Array4::<E>::zeros((b, c, h + 2 * p, w + 2 * p));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h + 2 * p {
                for j in 0..w + 2 * p {
                    let (si, sj) = match mode {
                        PadMode::Zero => {
                            if i < p || j < p || i >= h + p || j >= w + p {
                                continue;
                            }
                            (i - p, j - p)
                        }
                        PadMode::Replicate => (
                            (i.max(p) - p).min(h - 1),
                            (j.max(p) - p).min(w - 1),
                        ),
                    };
                    out[(bi, ci, i, j)] = x[(bi, ci, si, sj)];
                }
            }
        }
    }
    out
}

/// Adjoint of `pad2d`: folds padded-border gradients back onto their source
/// cells (dropped for zero padding, accumulated onto edges for replicate).
pub fn unpad2d_accumulate<E: Element>(gpad: &Array4<E>, p: usize, mode: PadMode, h: usize, w: usize) -> Array4<E> {
    let (b, c, hp, wp) = gpad.dim();
    if p == 0 {
        return gpad.clone();
    }
    let mut out = Array4::<E>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..hp {
                for j in 0..wp {
                    let (si, sj) = match mode {
                        PadMode::Zero => {
                            if i < p || j < p || i >= h + p || j >= w + p {
                                continue;
                            }
                            (i - p, j - p)
                        }
                        PadMode::Replicate => (
                            (i.max(p) - p).min(h - 1),
                            (j.max(p) - p).min(w - 1),
                        ),
                    };
                    out[(bi, ci, si, sj)] += gpad[(bi, ci, i, j)];
                }
            }
        }
    }
    out
}

fn im2col<E: Element>(xpad: &Array4<E>, bi: usize, kh: usize, kw: usize, oh: usize, ow: usize) -> Array2<E> {
    let (_, c, _, _) = xpad.dim();
    let mut cols = Array2::<E>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for i in 0..oh {
                    for j in 0..ow {
                        cols[(row, i * ow + j)] = xpad[(bi, ci, i + ki, j + kj)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<E: Element>(gpad: &mut Array4<E>, bi: usize, dcols: &Array2<E>, kh: usize, kw: usize, oh: usize, ow: usize) {
    let (_, c, _, _) = gpad.dim();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for i in 0..oh {
                    for j in 0..ow {
                        gpad[(bi, ci, i + ki, j + kj)] += dcols[(row, i * ow + j)];
                    }
                }
            }
        }
    }
}

/// Stride-1 2-D convolution; `w` is (Cout, Cin, kh, kw).
pub fn conv2d<E: Element>(x: &ArrayD<E>, w: &ArrayD<E>, b: Option<&ArrayD<E>>, pad: usize, mode: PadMode) -> ArrayD<E> {
    let xv = as4(x);
    let wv = as4(w);
    let (bs, cin, h, wdt) = xv.dim();
    let (cout, win, kh, kw) = wv.dim();
    assert_eq!(cin, win, "conv2d: channel mismatch");
    let oh = h + 2 * pad + 1 - kh;
    let ow = wdt + 2 * pad + 1 - kw;
    let xpad = pad2d(x, pad, mode);
    let wmat = wv
        .to_owned()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let mut out = Array4::<E>::zeros((bs, cout, oh, ow));
    for bi in 0..bs {
        let cols = im2col(&xpad, bi, kh, kw, oh, ow);
        let res = wmat.dot(&cols);
        for co in 0..cout {
            let bias = b.map(|bb| bb[[co]]).unwrap_or_else(E::zero);
            for i in 0..oh {
                for j in 0..ow {
                    out[(bi, co, i, j)] = res[(co, i * ow + j)] + bias;
                }
            }
        }
    }
    out.into_dyn()
}

/// Returns (dx, dw, db) for `conv2d`.
pub fn conv2d_backward<E: Element>(
    g: &ArrayD<E>,
    x: &ArrayD<E>,
    w: &ArrayD<E>,
    has_bias: bool,
    pad: usize,
    mode: PadMode,
) -> (ArrayD<E>, ArrayD<E>, Option<ArrayD<E>>) {
    let gv = as4(g);
    let xv = as4(x);
    let wv = as4(w);
    let (bs, cin, h, wdt) = xv.dim();
    let (cout, _, kh, kw) = wv.dim();
    let (_, _, oh, ow) = gv.dim();
    let xpad = pad2d(x, pad, mode);
    let wmat = wv
        .to_owned()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let mut dwmat = Array2::<E>::zeros((cout, cin * kh * kw));
    let mut gpad = Array4::<E>::zeros((bs, cin, h + 2 * pad, wdt + 2 * pad));
    let mut db = Array1::<E>::zeros(cout);
    for bi in 0..bs {
        let mut gmat = Array2::<E>::zeros((cout, oh * ow));
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let val = gv[(bi, co, i, j)];
                    gmat[(co, i * ow + j)] = val;
                    db[co] += val;
                }
            }
        }
        let cols = im2col(&xpad, bi, kh, kw, oh, ow);
        dwmat = dwmat + gmat.dot(&cols.t());
        let dcols = wmat.t().dot(&gmat);
        col2im_add(&mut gpad, bi, &dcols, kh, kw, oh, ow);
    }
    let dx = unpad2d_accumulate(&gpad, pad, mode, h, wdt).into_dyn();
    let dw = dwmat
        .into_shape_with_order((cout, cin, kh, kw))
        .unwrap()
        .into_dyn();
    let db = has_bias.then(|| db.into_dyn());
    (dx, dw, db)
}

/// Average pooling with kernel == stride == k.
pub fn avg_pool2d<E: Element>(x: &ArrayD<E>, k: usize) -> ArrayD<E> {
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    assert!(h % k == 0 && w % k == 0, "avg_pool2d: dims not divisible by {k}");
    let inv = E::f(1.0 / (k * k) as f64);
    let mut out = Array4::<E>::zeros((b, c, h / k, w / k));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h / k {
                for j in 0..w / k {
                    let mut s = E::zero();
                    for di in 0..k {
                        for dj in 0..k {
                            s += xv[(bi, ci, i * k + di, j * k + dj)];
                        }
                    }
                    out[(bi, ci, i, j)] = s * inv;
                }
            }
        }
    }
    out.into_dyn()
}

pub fn avg_pool2d_backward<E: Element>(g: &ArrayD<E>, k: usize) -> ArrayD<E> {
    let gv = as4(g);
    let (b, c, oh, ow) = gv.dim();
    let inv = E::f(1.0 / (k * k) as f64);
    let mut dx = Array4::<E>::zeros((b, c, oh * k, ow * k));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let gval = gv[(bi, ci, i, j)] * inv;
                    for di in 0..k {
                        for dj in 0..k {
                            dx[(bi, ci, i * k + di, j * k + dj)] = gval;
                        }
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

/// Sums each n x n block (the aggregation the conservation head divides by).
pub fn block_sum2d<E: Element>(x: &ArrayD<E>, n: usize) -> ArrayD<E> {
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    assert!(h % n == 0 && w % n == 0);
    let mut out = Array4::<E>::zeros((b, c, h / n, w / n));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[(bi, ci, i / n, j / n)] += xv[(bi, ci, i, j)];
                }
            }
        }
    }
    out.into_dyn()
}

pub fn block_sum2d_backward<E: Element>(g: &ArrayD<E>, n: usize) -> ArrayD<E> {
    let gv = as4(g);
    let (b, c, oh, ow) = gv.dim();
    let mut dx = Array4::<E>::zeros((b, c, oh * n, ow * n));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..oh * n {
                for j in 0..ow * n {
                    dx[(bi, ci, i, j)] = gv[(bi, ci, i / n, j / n)];
                }
            }
        }
    }
    dx.into_dyn()
}

pub fn upsample_nearest2d<E: Element>(x: &ArrayD<E>, r: usize) -> ArrayD<E> {
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    let mut out = Array4::<E>::zeros((b, c, h * r, w * r));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h * r {
                for j in 0..w * r {
                    out[(bi, ci, i, j)] = xv[(bi, ci, i / r, j / r)];
                }
            }
        }
    }
    out.into_dyn()
}

pub fn upsample_nearest2d_backward<E: Element>(g: &ArrayD<E>, r: usize) -> ArrayD<E> {
    block_sum2d(g, r)
}

/// Channel-to-space rearrangement: out[b, c, r*i+di, r*j+dj] = x[b, c*r*r + di*r + dj, i, j].
pub fn pixel_shuffle<E: Element>(x: &ArrayD<E>, r: usize) -> ArrayD<E> {
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    assert!(c % (r * r) == 0, "pixel_shuffle: channels not divisible by r^2");
    let co = c / (r * r);
    let mut out = Array4::<E>::zeros((b, co, h * r, w * r));
    for bi in 0..b {
        for ci in 0..co {
            for i in 0..h {
                for j in 0..w {
                    for di in 0..r {
                        for dj in 0..r {
                            out[(bi, ci, r * i + di, r * j + dj)] =
                                xv[(bi, ci * r * r + di * r + dj, i, j)];
                        }
                    }
                }
            }
        }
    }
    out.into_dyn()
}

pub fn pixel_shuffle_backward<E: Element>(g: &ArrayD<E>, r: usize) -> ArrayD<E> {
    let gv = as4(g);
    let (b, co, hr, wr) = gv.dim();
    let (h, w) = (hr / r, wr / r);
    let mut dx = Array4::<E>::zeros((b, co * r * r, h, w));
    for bi in 0..b {
        for ci in 0..co {
            for i in 0..h {
                for j in 0..w {
                    for di in 0..r {
                        for dj in 0..r {
                            dx[(bi, ci * r * r + di * r + dj, i, j)] =
                                gv[(bi, ci, r * i + di, r * j + dj)];
                        }
                    }
                }
            }
        }
    }
    dx.into_dyn()
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group normalization over (B, C, H, W); gamma/beta are per-channel.
pub fn group_norm<E: Element>(x: &ArrayD<E>, gamma: &ArrayD<E>, beta: &ArrayD<E>, groups: usize) -> ArrayD<E> {
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    assert!(c % groups == 0, "group_norm: channels not divisible by groups");
    let cg = c / groups;
    let m = E::f((cg * h * w) as f64);
    let eps = E::f(GROUP_NORM_EPS);
    let mut out = Array4::<E>::zeros((b, c, h, w));
    for bi in 0..b {
        for gi in 0..groups {
            let mut mean = E::zero();
            for ci in gi * cg..(gi + 1) * cg {
                for i in 0..h {
                    for j in 0..w {
                        mean += xv[(bi, ci, i, j)];
                    }
                }
            }
            mean = mean / m;
            let mut var = E::zero();
            for ci in gi * cg..(gi + 1) * cg {
                for i in 0..h {
                    for j in 0..w {
                        let d = xv[(bi, ci, i, j)] - mean;
                        var += d * d;
                    }
                }
            }
            var = var / m;
            let inv = (var + eps).sqrt().recip();
            for ci in gi * cg..(gi + 1) * cg {
                let (ga, be) = (gamma[[ci]], beta[[ci]]);
                for i in 0..h {
                    for j in 0..w {
                        out[(bi, ci, i, j)] = (xv[(bi, ci, i, j)] - mean) * inv * ga + be;
                    }
                }
            }
        }
    }
    out.into_dyn()
}

/// Returns (dx, dgamma, dbeta).
pub fn group_norm_backward<E: Element>(
    g: &ArrayD<E>,
    x: &ArrayD<E>,
    gamma: &ArrayD<E>,
    groups: usize,
) -> (ArrayD<E>, ArrayD<E>, ArrayD<E>) {
    let gv = as4(g);
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    let cg = c / groups;
    let m = E::f((cg * h * w) as f64);
    let eps = E::f(GROUP_NORM_EPS);
    let mut dx = Array4::<E>::zeros((b, c, h, w));
    let mut dgamma = Array1::<E>::zeros(c);
    let mut dbeta = Array1::<E>::zeros(c);
    for bi in 0..b {
        for gi in 0..groups {
            let chans = gi * cg..(gi + 1) * cg;
            let mut mean = E::zero();
            for ci in chans.clone() {
                for i in 0..h {
                    for j in 0..w {
                        mean += xv[(bi, ci, i, j)];
                    }
                }
            }
            mean = mean / m;
            let mut var = E::zero();
            for ci in chans.clone() {
                for i in 0..h {
                    for j in 0..w {
                        let d = xv[(bi, ci, i, j)] - mean;
                        var += d * d;
                    }
                }
            }
            var = var / m;
            let inv = (var + eps).sqrt().recip();
            // dxhat = g * gamma; accumulate the two group means needed below.
            let mut sum_dxhat = E::zero();
            let mut sum_dxhat_xhat = E::zero();
            for ci in chans.clone() {
                let ga = gamma[[ci]];
                for i in 0..h {
                    for j in 0..w {
                        let xhat = (xv[(bi, ci, i, j)] - mean) * inv;
                        let gval = gv[(bi, ci, i, j)];
                        dgamma[ci] += gval * xhat;
                        dbeta[ci] += gval;
                        let dxhat = gval * ga;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
            }
            let mean_dxhat = sum_dxhat / m;
            let mean_dxhat_xhat = sum_dxhat_xhat / m;
            for ci in chans {
                let ga = gamma[[ci]];
                for i in 0..h {
                    for j in 0..w {
                        let xhat = (xv[(bi, ci, i, j)] - mean) * inv;
                        let dxhat = gv[(bi, ci, i, j)] * ga;
                        dx[(bi, ci, i, j)] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
        }
    }
    (dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn())
}

pub fn softmax_last<E: Element>(x: &ArrayD<E>) -> ArrayD<E> {
    let mut out = x.clone();
    let last = Axis(out.ndim() - 1);
    for mut lane in out.lanes_mut(last) {
        let mx = lane.iter().copied().fold(E::neg_infinity(), E::max);
        let mut z = E::zero();
        for v in lane.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in lane.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// Backward of softmax given the softmax output `y` and upstream grad `g`.
pub fn softmax_last_backward<E: Element>(g: &ArrayD<E>, y: &ArrayD<E>) -> ArrayD<E> {
    let mut dx = g.clone();
    let last = Axis(dx.ndim() - 1);
    for (mut dlane, ylane) in dx.lanes_mut(last).into_iter().zip(y.lanes(last)) {
        let mut dot = E::zero();
        for (d, yv) in dlane.iter().zip(ylane.iter()) {
            dot += *d * *yv;
        }
        for (d, yv) in dlane.iter_mut().zip(ylane.iter()) {
            *d = *yv * (*d - dot);
        }
    }
    dx
}

/// Multi-head scaled-dot attention on (B, Tq, dm) x (B, Tk, dm) x (B, Tk, dm).
pub fn mha<E: Element>(q: &ArrayD<E>, k: &ArrayD<E>, v: &ArrayD<E>, heads: usize) -> ArrayD<E> {
    let (b, tq, dm) = dims3(q);
    let (_, tk, _) = dims3(k);
    assert!(dm % heads == 0, "mha: dm not divisible by heads");
    let dh = dm / heads;
    let scale = E::f(1.0 / (dh as f64).sqrt());
    let mut out = ArrayD::<E>::zeros(IxDyn(&[b, tq, dm]));
    for bi in 0..b {
        for h in 0..heads {
            let (qh, kh, vh) = head_slices(q, k, v, bi, h, dh, tq, tk);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            let attn = softmax_last(&scores.into_dyn());
            let attn2 = attn.into_dimensionality::<Ix2>().unwrap();
            let oh = attn2.dot(&vh);
            for t in 0..tq {
                for d in 0..dh {
                    out[[bi, t, h * dh + d]] = oh[(t, d)];
                }
            }
        }
    }
    out
}

/// Returns (dq, dk, dv) for `mha`, recomputing the attention weights.
pub fn mha_backward<E: Element>(
    g: &ArrayD<E>,
    q: &ArrayD<E>,
    k: &ArrayD<E>,
    v: &ArrayD<E>,
    heads: usize,
) -> (ArrayD<E>, ArrayD<E>, ArrayD<E>) {
    let (b, tq, dm) = dims3(q);
    let (_, tk, _) = dims3(k);
    let dh = dm / heads;
    let scale = E::f(1.0 / (dh as f64).sqrt());
    let mut dq = ArrayD::<E>::zeros(IxDyn(&[b, tq, dm]));
    let mut dk = ArrayD::<E>::zeros(IxDyn(&[b, tk, dm]));
    let mut dv = ArrayD::<E>::zeros(IxDyn(&[b, tk, dm]));
    for bi in 0..b {
        for h in 0..heads {
            let (qh, kh, vh) = head_slices(q, k, v, bi, h, dh, tq, tk);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            let attn = softmax_last(&scores.into_dyn());
            let mut gh = Array2::<E>::zeros((tq, dh));
            for t in 0..tq {
                for d in 0..dh {
                    gh[(t, d)] = g[[bi, t, h * dh + d]];
                }
            }
            let attn2 = attn.view().into_dimensionality::<Ix2>().unwrap();
            let dattn = gh.dot(&vh.t()).into_dyn();
            let dvh = attn2.t().dot(&gh);
            let dscores = softmax_last_backward(&dattn, &attn)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let dqh = dscores.dot(&kh).mapv(|x| x * scale);
            let dkh = dscores.t().dot(&qh).mapv(|x| x * scale);
            for t in 0..tq {
                for d in 0..dh {
                    dq[[bi, t, h * dh + d]] = dqh[(t, d)];
                }
            }
            for t in 0..tk {
                for d in 0..dh {
                    dk[[bi, t, h * dh + d]] = dkh[(t, d)];
                    dv[[bi, t, h * dh + d]] = dvh[(t, d)];
                }
            }
        }
    }
    (dq, dk, dv)
}

fn dims3<E: Element>(x: &ArrayD<E>) -> (usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 3, "expected 3-d array");
    (s[0], s[1], s[2])
}

fn head_slices<E: Element>(
    q: &ArrayD<E>,
    k: &ArrayD<E>,
    v: &ArrayD<E>,
    bi: usize,
    h: usize,
    dh: usize,
    tq: usize,
    tk: usize,
) -> (Array2<E>, Array2<E>, Array2<E>) {
    let mut qh = Array2::<E>::zeros((tq, dh));
    let mut kh = Array2::<E>::zeros((tk, dh));
    let mut vh = Array2::<E>::zeros((tk, dh));
    for d in 0..dh {
        for t in 0..tq {
            qh[(t, d)] = q[[bi, t, h * dh + d]];
        }
        for t in 0..tk {
            kh[(t, d)] = k[[bi, t, h * dh + d]];
            vh[(t, d)] = v[[bi, t, h * dh + d]];
        }
    }
    (qh, kh, vh)
}

/// Zero-padded 1-D convolution along the channel axis of (B, C) descriptors.
pub fn conv1d_channels<E: Element>(x: &ArrayD<E>, w: &ArrayD<E>) -> ArrayD<E> {
    let xv = as2(x);
    let (b, c) = xv.dim();
    let k = w.len();
    let pad = (k - 1) / 2;
    let mut out = Array2::<E>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut s = E::zero();
            for j in 0..k {
                let idx = ci as isize + j as isize - pad as isize;
                if idx >= 0 && (idx as usize) < c {
                    s += xv[(bi, idx as usize)] * w[[j]];
                }
            }
            out[(bi, ci)] = s;
        }
    }
    out.into_dyn()
}

pub fn conv1d_channels_backward<E: Element>(
    g: &ArrayD<E>,
    x: &ArrayD<E>,
    w: &ArrayD<E>,
) -> (ArrayD<E>, ArrayD<E>) {
    let gv = as2(g);
    let xv = as2(x);
    let (b, c) = xv.dim();
    let k = w.len();
    let pad = (k - 1) / 2;
    let mut dx = Array2::<E>::zeros((b, c));
    let mut dw = Array1::<E>::zeros(k);
    for bi in 0..b {
        for ci in 0..c {
            let gval = gv[(bi, ci)];
            for j in 0..k {
                let idx = ci as isize + j as isize - pad as isize;
                if idx >= 0 && (idx as usize) < c {
                    dx[(bi, idx as usize)] += gval * w[[j]];
                    dw[j] += gval * xv[(bi, idx as usize)];
                }
            }
        }
    }
    (dx.into_dyn(), dw.into_dyn())
}

/// Per-position channel mean and max: (B, C, H, W) -> (B, 2, H, W).
pub fn channel_mean_max<E: Element>(x: &ArrayD<E>) -> ArrayD<E> {
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    let inv = E::f(1.0 / c as f64);
    let mut out = Array4::<E>::zeros((b, 2, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let mut s = E::zero();
                let mut mx = E::neg_infinity();
                for ci in 0..c {
                    let v = xv[(bi, ci, i, j)];
                    s += v;
                    mx = mx.max(v);
                }
                out[(bi, 0, i, j)] = s * inv;
                out[(bi, 1, i, j)] = mx;
            }
        }
    }
    out.into_dyn()
}

/// Max gradient routes to the first argmax channel (deterministic on ties).
pub fn channel_mean_max_backward<E: Element>(g: &ArrayD<E>, x: &ArrayD<E>) -> ArrayD<E> {
    let gv = as4(g);
    let xv = as4(x);
    let (b, c, h, w) = xv.dim();
    let inv = E::f(1.0 / c as f64);
    let mut dx = Array4::<E>::zeros((b, c, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let gmean = gv[(bi, 0, i, j)] * inv;
                let mut arg = 0usize;
                let mut mx = xv[(bi, 0, i, j)];
                for ci in 1..c {
                    if xv[(bi, ci, i, j)] > mx {
                        mx = xv[(bi, ci, i, j)];
                        arg = ci;
                    }
                }
                for ci in 0..c {
                    dx[(bi, ci, i, j)] = gmean;
                }
                dx[(bi, arg, i, j)] += gv[(bi, 1, i, j)];
            }
        }
    }
    dx.into_dyn()
}
