//! Raw slice kernels behind the tape operations. Inputs are assumed to be
//! shape-checked by the caller.

use alloc::vec;
use alloc::vec::Vec;

use super::Scalar;

/// `c (+)= op(a) · op(b)` for contiguous row-major operands, where `op`
/// optionally transposes. `a` is `[m,k]` (or `[k,m]` stored when
/// `trans_a`), `b` is `[k,n]` (or `[n,k]` stored when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    gemm_strided(
        m,
        k,
        n,
        T::one(),
        a,
        0,
        rsa,
        csa,
        b,
        0,
        rsb,
        csb,
        if accumulate { T::one() } else { T::zero() },
        c,
        0,
        n as isize,
        1,
    );
}

/// Strided view GEMM, `c = alpha·a·b + beta·c`. Offsets and non-negative
/// strides are bounds-checked against the slices.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_off: usize,
    rsa: isize,
    csa: isize,
    b: &[T],
    b_off: usize,
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
    c_off: usize,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |off: usize, rows: usize, cols: usize, rs: isize, cs: isize| {
        off + (rows.saturating_sub(1)) * rs as usize + (cols.saturating_sub(1)) * cs as usize
    };
    assert!(rsc >= 0 && csc >= 0 && last(c_off, m, n, rsc, csc) < c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c_off + i * rsc as usize + j * csc as usize;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(rsa >= 0 && csa >= 0 && last(a_off, m, k, rsa, csa) < a.len());
    assert!(rsb >= 0 && csb >= 0 && last(b_off, k, n, rsb, csb) < b.len());
    // SAFETY: every addressed element was bounds-checked above and `c` is a
    // unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(a_off),
            rsa,
            csa,
            b.as_ptr().add(b_off),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc,
            csc,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw = g.out_hw();
    for c in 0..g.in_ch {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.in_h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for (ow, d) in drow.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let hw = g.out_hw();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.in_w as isize {
                            drow[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let hw = g.out_hw();
    let in_sz = g.in_ch * g.in_h * g.in_w;
    let out_sz = g.out_ch * hw;
    let mut out = vec![T::zero(); g.batch * out_sz];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * hw]
    };
    for b in 0..g.batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        let colv: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        gemm(g.out_ch, g.col_rows(), hw, w, false, colv, false, ob, false);
        if let Some(bias) = bias {
            for (k, &bk) in bias.iter().enumerate() {
                for v in &mut ob[k * hw..(k + 1) * hw] {
                    *v += bk;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`; `dx` is only computed when `need_dx`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = g.out_hw();
    let in_sz = g.in_ch * g.in_h * g.in_w;
    let out_sz = g.out_ch * hw;
    let rows = g.col_rows();
    let mut dw = vec![T::zero(); g.out_ch * rows];
    let mut db = vec![T::zero(); g.out_ch];
    let mut dx = if need_dx {
        Some(vec![T::zero(); g.batch * in_sz])
    } else {
        None
    };
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * hw]
    };
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { rows * hw } else { 0 }];
    for b in 0..g.batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        for (k, d) in db.iter_mut().enumerate() {
            *d += dyb[k * hw..(k + 1) * hw].iter().copied().sum::<T>();
        }
        let colv: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        gemm(g.out_ch, hw, rows, dyb, false, colv, true, &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                gemm(rows, g.out_ch, hw, w, true, dyb, false, dxb, true);
            } else {
                gemm(rows, g.out_ch, hw, w, true, dyb, false, &mut dcols, false);
                col2im_add(g, &dcols, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise convolution: weight `[C, 1, kh, kw]`, one filter per channel.
pub fn depthwise_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.in_ch * g.out_hw()];
    for b in 0..g.batch {
        for c in 0..g.in_ch {
            let plane = &x[(b * g.in_ch + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
            let filt = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let o = &mut out[(b * g.in_ch + c) * g.out_hw()..][..g.out_hw()];
            let bv = bias.map_or(T::zero(), |bb| bb[c]);
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = bv;
                    for ki in 0..g.kh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.in_w as isize {
                                continue;
                            }
                            acc += filt[ki * g.kw + kj] * plane[ih as usize * g.in_w + iw as usize];
                        }
                    }
                    o[oh * g.out_w + ow] = acc;
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane_sz = g.in_h * g.in_w;
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.in_ch];
    let mut dx = if need_dx {
        Some(vec![T::zero(); x.len()])
    } else {
        None
    };
    for b in 0..g.batch {
        for c in 0..g.in_ch {
            let base = (b * g.in_ch + c) * plane_sz;
            let plane = &x[base..base + plane_sz];
            let filt = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let d = &dy[(b * g.in_ch + c) * g.out_hw()..][..g.out_hw()];
            let dwf = &mut dw[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let go = d[oh * g.out_w + ow];
                    db[c] += go;
                    for ki in 0..g.kh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        for kj in 0..g.kw {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.in_w as isize {
                                continue;
                            }
                            let xi = ih as usize * g.in_w + iw as usize;
                            dwf[ki * g.kw + kj] += go * plane[xi];
                            if let Some(dx) = dx.as_mut() {
                                dx[base + xi] += go * filt[ki * g.kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Source index pair and blend weight for one output coordinate of an
/// align-corners=false bilinear resize.
#[derive(Debug, Clone, Copy)]
pub struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

pub fn bilinear_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (libm::floor(src) as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Tap {
                lo,
                hi,
                frac: T::c(frac),
            }
        })
        .collect()
}

pub fn resize_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ty = bilinear_taps::<T>(in_h, out_h);
    let tx = bilinear_taps::<T>(in_w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let src = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, t) in ty.iter().enumerate() {
            let r0 = &src[t.lo * in_w..(t.lo + 1) * in_w];
            let r1 = &src[t.hi * in_w..(t.hi + 1) * in_w];
            let wy1 = t.frac;
            let wy0 = T::one() - wy1;
            for (ox, s) in tx.iter().enumerate() {
                let wx1 = s.frac;
                let wx0 = T::one() - wx1;
                let top = wx0 * r0[s.lo] + wx1 * r0[s.hi];
                let bot = wx0 * r1[s.lo] + wx1 * r1[s.hi];
                dst[oy * out_w + ox] = wy0 * top + wy1 * bot;
            }
        }
    }
    out
}

pub fn resize_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ty = bilinear_taps::<T>(in_h, out_h);
    let tx = bilinear_taps::<T>(in_w, out_w);
    let mut dx = vec![T::zero(); planes * in_h * in_w];
    for p in 0..planes {
        let g = &dy[p * out_h * out_w..(p + 1) * out_h * out_w];
        let d = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, t) in ty.iter().enumerate() {
            let wy1 = t.frac;
            let wy0 = T::one() - wy1;
            for (ox, s) in tx.iter().enumerate() {
                let go = g[oy * out_w + ox];
                let wx1 = s.frac;
                let wx0 = T::one() - wx1;
                d[t.lo * in_w + s.lo] += go * wy0 * wx0;
                d[t.lo * in_w + s.hi] += go * wy0 * wx1;
                d[t.hi * in_w + s.lo] += go * wy1 * wx0;
                d[t.hi * in_w + s.hi] += go * wy1 * wx1;
            }
        }
    }
    dx
}

/// Row softmax with max subtraction, in place.
pub fn softmax_rows_inplace<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Softmax over `axis` of a tensor viewed as `[outer, len, inner]`.
pub fn softmax_forward<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = x.to_vec();
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = out[(o * len + j) * inner + i];
            }
            softmax_rows_inplace(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out[(o * len + j) * inner + i] = *b;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| y[idx(j)] * dy[idx(j)]).sum();
            for j in 0..len {
                dx[idx(j)] = y[idx(j)] * (dy[idx(j)] - dot);
            }
        }
    }
    dx
}

/// Layer normalization over the trailing extent `dim`. Returns the output and
/// the saved `(xhat, rstd)`.
pub fn layernorm_forward<T: Scalar>(
    x: &[T],
    dim: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / dim;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let n = T::c(dim as f64);
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..dim {
            let h = (xr[j] - mean) * rs;
            xhat[r * dim + j] = h;
            y[r * dim + j] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, rstd)
}

pub fn layernorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    dim: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / dim;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); dim];
    let mut dbeta = vec![T::zero(); dim];
    let n = T::c(dim as f64);
    for r in 0..rows {
        let g = &dy[r * dim..(r + 1) * dim];
        let h = &xhat[r * dim..(r + 1) * dim];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..dim {
            let dh = g[j] * gamma[j];
            s1 += dh;
            s2 += dh * h[j];
            dgamma[j] += g[j] * h[j];
            dbeta[j] += g[j];
        }
        let m1 = s1 / n;
        let m2 = s2 / n;
        for j in 0..dim {
            let dh = g[j] * gamma[j];
            dx[r * dim + j] = rstd[r] * (dh - m1 - h[j] * m2);
        }
    }
    (dx, dgamma, dbeta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub n_q: usize,
    pub n_kv: usize,
    pub channels: usize,
    pub heads: usize,
}

impl AttnGeom {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Scaled dot-product attention per head. Returns the output `[B, Nq, C]`
/// and the attention probabilities `[B, heads, Nq, Nkv]`.
pub fn attention_forward<T: Scalar>(g: &AttnGeom, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
    let dh = g.head_dim();
    let c = g.channels as isize;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut out = vec![T::zero(); g.batch * g.n_q * g.channels];
    let mut probs = vec![T::zero(); g.batch * g.heads * g.n_q * g.n_kv];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let q_off = b * g.n_q * g.channels + h * dh;
            let kv_off = b * g.n_kv * g.channels + h * dh;
            let p_off = (b * g.heads + h) * g.n_q * g.n_kv;
            let p = &mut probs[p_off..p_off + g.n_q * g.n_kv];
            gemm_strided(
                g.n_q, dh, g.n_kv, scale, q, q_off, c, 1, k, kv_off, 1, c, T::zero(), p, 0,
                g.n_kv as isize, 1,
            );
            for row in p.chunks_exact_mut(g.n_kv) {
                softmax_rows_inplace(row);
            }
            gemm_strided(
                g.n_q, g.n_kv, dh, T::one(), p, 0, g.n_kv as isize, 1, v, kv_off, c, 1, T::zero(),
                &mut out, q_off, c, 1,
            );
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` of the attention output.
pub fn attention_backward<T: Scalar>(
    g: &AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = g.head_dim();
    let c = g.channels as isize;
    let nkv = g.n_kv as isize;
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); g.n_q * g.n_kv];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let q_off = b * g.n_q * g.channels + h * dh;
            let kv_off = b * g.n_kv * g.channels + h * dh;
            let p_off = (b * g.heads + h) * g.n_q * g.n_kv;
            let p = &probs[p_off..p_off + g.n_q * g.n_kv];
            // dV = P^T dO
            gemm_strided(
                g.n_kv, g.n_q, dh, T::one(), p, 0, 1, nkv, dout, q_off, c, 1, T::zero(), &mut dv,
                kv_off, c, 1,
            );
            // dP = dO V^T
            gemm_strided(
                g.n_q, dh, g.n_kv, T::one(), dout, q_off, c, 1, v, kv_off, 1, c, T::zero(), &mut dp,
                0, nkv, 1,
            );
            for (dprow, prow) in dp.chunks_exact_mut(g.n_kv).zip(p.chunks_exact(g.n_kv)) {
                let dot: T = dprow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                for (d, &pp) in dprow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot);
                }
            }
            // dQ = scale dS K ; dK = scale dS^T Q
            gemm_strided(
                g.n_q, g.n_kv, dh, scale, &dp, 0, nkv, 1, k, kv_off, c, 1, T::zero(), &mut dq, q_off,
                c, 1,
            );
            gemm_strided(
                g.n_kv, g.n_q, dh, scale, &dp, 0, 1, nkv, q, q_off, c, 1, T::zero(), &mut dk, kv_off,
                c, 1,
            );
        }
    }
    (dq, dk, dv)
}
