//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation evaluates eagerly, appends one record and returns a
//! [`Var`] handle. Records only ever reference earlier records, so walking the
//! tape backwards is a valid reverse topological order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, AttnGeom, ConvGeom};
use super::{Scalar, Tensor};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary<T> {
    Relu,
    Gelu,
    Sigmoid,
    Log,
    Exp,
    Sqrt,
    Softplus,
    LogSigmoid,
    Pow(T),
    /// `scale * x + shift`
    Affine(T, T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    Detach,
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        depthwise: bool,
    },
    Resize {
        x: Var,
        planes: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    Softmax {
        x: Var,
        dims: (usize, usize, usize),
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Unary {
        x: Var,
        kind: Unary<T>,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        dims: (usize, usize, usize),
        argmax: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Reshape(Var),
    ToTokens(Var),
    ToMap(Var),
    Cosine {
        a: Var,
        b: Var,
        eps: T,
        dot: Vec<T>,
        na: Vec<T>,
        nb: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Differentiation tape. One forward/backward pass owns a graph exclusively.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    per_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a recorded value, `None` when the loss does not reach it.
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.per_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.of(*v))
    }

    /// One gradient per stored parameter; parameters the loss does not reach
    /// get zeros.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, p)| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out`, zero along broadcast extents.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut ba, mut bb) = (0usize, 0usize);
    for o in 0..outer {
        for j in 0..last {
            f(o * last + j, ba + j * la, bb + j * lb);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            ba += sa[d];
            bb += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ba -= sa[d] * out[d];
            bb -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (gradient checks, saliency studies).
    pub fn input_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a stored parameter. Repeated calls return the same handle so
    /// that shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Copy of a value cut off from differentiation.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Matmul(a, b), needs))
    }

    /// `x · wᵀ + b` over the trailing extent of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(Error::dim("linear", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::dim("linear bias", &sw, self.shape(b)));
            }
        }
        let (d, k) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / k.max(1);
        let mut out = vec![T::zero(); rows * d];
        kernels::gemm(rows, k, d, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(d) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = d;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, needs))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize, depthwise: bool) -> Result<ConvGeom> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        if sx.len() != 4 || sw.len() != 4 || stride == 0 {
            return Err(Error::dim("conv2d", sx, sw));
        }
        let channel_ok = if depthwise {
            sw[0] == sx[1] && sw[1] == 1
        } else {
            sw[1] == sx[1]
        };
        if !channel_ok {
            return Err(Error::dim("conv2d channels", sx, sw));
        }
        let (kh, kw) = (sw[2], sw[3]);
        if pad > 0 && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::config(format!("padded conv2d kernel must be odd, got {kh}x{kw}")));
        }
        if sx[2] + 2 * pad < kh || sx[3] + 2 * pad < kw {
            return Err(Error::dim("conv2d spatial", sx, sw));
        }
        Ok(ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sw[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (sx[2] + 2 * pad - kh) / stride + 1,
            out_w: (sx[3] + 2 * pad - kw) / stride + 1,
        })
    }

    /// Cross-correlation of `[B,C,H,W]` with `[K,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_impl(x, w, b, stride, pad, false)
    }

    /// Per-channel convolution with weight `[C,1,kh,kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_impl(x, w, b, stride, pad, true)
    }

    fn conv_impl(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, depthwise: bool) -> Result<Var> {
        let geom = self.conv_geom(x, w, stride, pad, depthwise)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_ch] {
                return Err(Error::dim("conv2d bias", self.shape(w), self.shape(b)));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = b.map(|b| self.value(b).data());
        let out = if depthwise {
            kernels::depthwise_forward(&geom, xd, wd, bd)
        } else {
            kernels::conv2d_forward(&geom, xd, wd, bd)
        };
        let shape = [geom.batch, geom.out_ch, geom.out_h, geom.out_w];
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Conv {
                x,
                w,
                b,
                geom,
                depthwise,
            },
            needs,
        ))
    }

    /// Bilinear resize of the two trailing extents (align-corners=false).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || out_h == 0 || out_w == 0 || sx[sx.len() - 1] == 0 || sx[sx.len() - 2] == 0 {
            return Err(Error::dim("resize_bilinear", &sx, &[out_h, out_w]));
        }
        let (ih, iw) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let planes = self.value(x).numel() / (ih * iw);
        let out = kernels::resize_forward(self.value(x).data(), planes, ih, iw, out_h, out_w);
        let mut shape = sx;
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Resize {
                x,
                planes,
                in_hw: (ih, iw),
                out_hw: (out_h, out_w),
            },
            needs,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::dim("softmax axis", &sx, &[axis]));
        }
        let dims = split_axis(&sx, axis);
        let out = kernels::softmax_forward(self.value(x).data(), dims.0, dims.1, dims.2);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&sx, out)?, Op::Softmax { x, dims }, needs))
    }

    /// Normalizes over the trailing extent.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let dim = *sx.last().ok_or_else(|| Error::dim("layernorm", &sx, &[]))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(Error::dim("layernorm affine", &sx, self.shape(gamma)));
        }
        let (y, xhat, rstd) = kernels::layernorm_forward(
            self.value(x).data(),
            dim,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(&sx, y)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::dim("broadcast", &sa, &sb))?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); n];
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
                *o = f(x, y);
            }
        } else {
            let st_a = broadcast_strides(&sa, &out_shape);
            let st_b = broadcast_strides(&sb, &out_shape);
            for_each_broadcast(&out_shape, &st_a, &st_b, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Binary { a, b, kind }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn unary(&mut self, x: Var, kind: Unary<T>) -> Var {
        let xs = self.value(x);
        let half = T::c(0.5);
        let inv_sqrt2 = T::c(core::f64::consts::FRAC_1_SQRT_2);
        let out = xs.map(|v| match kind {
            Unary::Relu => v.max(T::zero()),
            Unary::Gelu => half * v * (T::one() + (v * inv_sqrt2).erf()),
            Unary::Sigmoid => sigmoid(v),
            Unary::Log => v.ln(),
            Unary::Exp => v.exp(),
            Unary::Sqrt => v.sqrt(),
            Unary::Softplus => softplus(v),
            Unary::LogSigmoid => -softplus(-v),
            Unary::Pow(p) => v.powf(p),
            Unary::Affine(s, t) => s * v + t,
        });
        let needs = self.needs(x);
        self.push(out, Op::Unary { x, kind }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn pow(&mut self, x: Var, p: T) -> Var {
        self.unary(x, Unary::Pow(p))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Unary::Affine(s, T::zero()))
    }

    pub fn affine(&mut self, x: Var, s: T, t: T) -> Var {
        self.unary(x, Unary::Affine(s, t))
    }

    /// Reduction along `axis` (kept with extent one) or over everything
    /// (result shape `[1]`).
    pub fn reduce(&mut self, x: Var, axis: Option<usize>, kind: ReduceKind) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (dims, out_shape) = match axis {
            Some(a) if a < sx.len() => {
                let mut s = sx.clone();
                s[a] = 1;
                (split_axis(&sx, a), s)
            }
            Some(a) => return Err(Error::dim("reduce axis", &sx, &[a])),
            None => ((1, self.value(x).numel(), 1), vec![1]),
        };
        let (outer, len, inner) = dims;
        if len == 0 {
            return Err(Error::dim("reduce over empty extent", &sx, &[]));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| xd[(o * len + j) * inner + i];
                let r = match kind {
                    ReduceKind::Sum => (0..len).map(at).sum(),
                    ReduceKind::Mean => (0..len).map(at).sum::<T>() / T::c(len as f64),
                    ReduceKind::Max => {
                        let mut best = 0;
                        for j in 1..len {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        argmax[o * inner + i] = best;
                        at(best)
                    }
                };
                out[o * inner + i] = r;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Reduce {
                x,
                kind,
                dims,
                argmax,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, ReduceKind::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, ReduceKind::Mean)
    }

    /// Concatenation along axis 1 (channels of a feature map).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::dim("concat_channels", &sa, &sb));
        }
        let batch = sa[0];
        let inner: usize = sa[2..].iter().product();
        let (na, nb) = (sa[1] * inner, sb[1] * inner);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * (na + nb));
        for bi in 0..batch {
            out.extend_from_slice(&ad[bi * na..(bi + 1) * na]);
            out.extend_from_slice(&bd[bi * nb..(bi + 1) * nb]);
        }
        let mut shape = sa;
        shape[1] += sb[1];
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { a, b }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// `[B,C,H,W]` → `[B,H·W,C]`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("to_tokens", &s, &[]));
        }
        let (b, c, n) = (s[0], s[1], s[2] * s[3]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            let src = &xd[bi * c * n..(bi + 1) * c * n];
            let dst = &mut out[bi * c * n..(bi + 1) * c * n];
            for ci in 0..c {
                for ni in 0..n {
                    dst[ni * c + ci] = src[ci * n + ni];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&[b, n, c], out)?, Op::ToTokens(x), needs))
    }

    /// `[B,H·W,C]` → `[B,C,H,W]`.
    pub fn to_map(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::dim("to_map", &s, &[h, w]));
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for bi in 0..b {
            let src = &xd[bi * c * n..(bi + 1) * c * n];
            let dst = &mut out[bi * c * n..(bi + 1) * c * n];
            for ni in 0..n {
                for ci in 0..c {
                    dst[ci * n + ni] = src[ni * c + ci];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&[b, c, h, w], out)?, Op::ToMap(x), needs))
    }

    /// Per-location cosine similarity of the channel vectors of two
    /// `[B,C,H,W]` maps: `a·b / (|a||b| + eps)`, shape `[B,1,H,W]`.
    pub fn cosine_channel(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.len() != 4 {
            return Err(Error::dim("cosine_channel", &sa, &sb));
        }
        let (bn, c, hw) = (sa[0], sa[1], sa[2] * sa[3]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); bn * hw];
        let mut dot = vec![T::zero(); bn * hw];
        let mut na = vec![T::zero(); bn * hw];
        let mut nb = vec![T::zero(); bn * hw];
        for bi in 0..bn {
            for p in 0..hw {
                let (mut d, mut sa2, mut sb2) = (T::zero(), T::zero(), T::zero());
                for ci in 0..c {
                    let idx = (bi * c + ci) * hw + p;
                    d += ad[idx] * bd[idx];
                    sa2 += ad[idx] * ad[idx];
                    sb2 += bd[idx] * bd[idx];
                }
                let o = bi * hw + p;
                dot[o] = d;
                na[o] = sa2.sqrt();
                nb[o] = sb2.sqrt();
                out[o] = d / (na[o] * nb[o] + eps);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(&[bn, 1, sa[2], sa[3]], out)?,
            Op::Cosine {
                a,
                b,
                eps,
                dot,
                na,
                nb,
            },
            needs,
        ))
    }

    /// Multi-head scaled dot-product attention over token tensors
    /// `q: [B,Nq,C]`, `k, v: [B,Nkv,C]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk != sv || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::dim("attention", &sq, &sk));
        }
        if heads == 0 || sq[2] % heads != 0 {
            return Err(Error::config(format!("{} channels not divisible by {heads} heads", sq[2])));
        }
        let geom = AttnGeom {
            batch: sq[0],
            n_q: sq[1],
            n_kv: sk[1],
            channels: sq[2],
            heads,
        };
        let (out, probs) =
            kernels::attention_forward(&geom, self.value(q).data(), self.value(k).data(), self.value(v).data());
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(&sq, out)?,
            Op::Attention { q, k, v, geom, probs },
            needs,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            self.backward_node(node, &gy, &mut grads)?;
            if keep {
                grads[idx] = Some(gy);
            }
        }
        Ok(Gradients {
            per_node: grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) -> Result<()> {
        let t = Tensor::new(self.shape(v), g)?;
        self.accumulate(grads, v, t);
        Ok(())
    }

    fn backward_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let dy = gy.data();
        match &node.op {
            Op::Leaf | Op::Param | Op::Detach => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, dy, false, self.value(*b).data(), true, &mut da, false);
                    self.accumulate_vec(grads, *a, da)?;
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, self.value(*a).data(), true, dy, false, &mut db, false);
                    self.accumulate_vec(grads, *b, db)?;
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (d, k) = (sw[0], sw[1]);
                let rows = dy.len() / d.max(1);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * k];
                    kernels::gemm(rows, d, k, dy, false, self.value(*w).data(), false, &mut dx, false);
                    self.accumulate_vec(grads, *x, dx)?;
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); d * k];
                    kernels::gemm(d, rows, k, dy, true, self.value(*x).data(), false, &mut dw, false);
                    self.accumulate_vec(grads, *w, dw)?;
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); d];
                        for row in dy.chunks_exact(d) {
                            for (o, &g) in db.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                        self.accumulate_vec(grads, *b, db)?;
                    }
                }
            }
            Op::Conv {
                x,
                w,
                b,
                geom,
                depthwise,
            } => {
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let need_dx = self.needs(*x);
                let (dx, dw, db) = if *depthwise {
                    kernels::depthwise_backward(geom, xd, wd, dy, need_dx)
                } else {
                    kernels::conv2d_backward(geom, xd, wd, dy, need_dx)
                };
                if let Some(dx) = dx {
                    self.accumulate_vec(grads, *x, dx)?;
                }
                self.accumulate_vec(grads, *w, dw)?;
                if let Some(b) = b {
                    self.accumulate_vec(grads, *b, db)?;
                }
            }
            Op::Resize {
                x,
                planes,
                in_hw,
                out_hw,
            } => {
                let dx = kernels::resize_backward(dy, *planes, in_hw.0, in_hw.1, out_hw.0, out_hw.1);
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::Softmax { x, dims } => {
                let dx = kernels::softmax_backward(node.value.data(), dy, dims.0, dims.1, dims.2);
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let g = self.value(*gamma).data();
                let (dx, dg, db) = kernels::layernorm_backward(dy, xhat, rstd, g, g.len());
                self.accumulate_vec(grads, *x, dx)?;
                self.accumulate_vec(grads, *gamma, dg)?;
                self.accumulate_vec(grads, *beta, db)?;
            }
            Op::Binary { a, b, kind } => self.backward_binary(node, *a, *b, *kind, dy, grads)?,
            Op::Unary { x, kind } => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                let half = T::c(0.5);
                let inv_sqrt2 = T::c(core::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::c(0.398_942_280_401_432_7);
                let dx: Vec<T> = xd
                    .iter()
                    .zip(yd)
                    .zip(dy)
                    .map(|((&xv, &yv), &g)| {
                        g * match *kind {
                            Unary::Relu => {
                                if xv > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Gelu => {
                                let cdf = half * (T::one() + (xv * inv_sqrt2).erf());
                                let pdf = inv_sqrt_2pi * (-half * xv * xv).exp();
                                cdf + xv * pdf
                            }
                            Unary::Sigmoid => yv * (T::one() - yv),
                            Unary::Log => T::one() / xv,
                            Unary::Exp => yv,
                            Unary::Sqrt => half / yv,
                            Unary::Softplus => sigmoid(xv),
                            Unary::LogSigmoid => sigmoid(-xv),
                            Unary::Pow(p) => {
                                if p == T::zero() || (xv == T::zero() && p > T::one()) {
                                    T::zero()
                                } else {
                                    p * xv.powf(p - T::one())
                                }
                            }
                            Unary::Affine(s, _) => s,
                        }
                    })
                    .collect();
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::Reduce {
                x,
                kind,
                dims,
                argmax,
            } => {
                let (outer, len, inner) = *dims;
                let mut dx = vec![T::zero(); outer * len * inner];
                let inv = T::one() / T::c(len as f64);
                for o in 0..outer {
                    for i in 0..inner {
                        let g = dy[o * inner + i];
                        match kind {
                            ReduceKind::Sum | ReduceKind::Mean => {
                                let gv = if *kind == ReduceKind::Mean { g * inv } else { g };
                                for j in 0..len {
                                    dx[(o * len + j) * inner + i] = gv;
                                }
                            }
                            ReduceKind::Max => {
                                dx[(o * len + argmax[o * inner + i]) * inner + i] = g;
                            }
                        }
                    }
                }
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let inner: usize = sa[2..].iter().product();
                let (na, nb) = (sa[1] * inner, sb[1] * inner);
                let mut da = Vec::with_capacity(sa[0] * na);
                let mut db = Vec::with_capacity(sa[0] * nb);
                for bi in 0..sa[0] {
                    let base = bi * (na + nb);
                    da.extend_from_slice(&dy[base..base + na]);
                    db.extend_from_slice(&dy[base + na..base + na + nb]);
                }
                self.accumulate_vec(grads, *a, da)?;
                self.accumulate_vec(grads, *b, db)?;
            }
            Op::Reshape(x) => self.accumulate_vec(grads, *x, dy.to_vec())?,
            Op::ToTokens(x) => {
                let s = self.shape(*x);
                let (b, c, n) = (s[0], s[1], s[2] * s[3]);
                let mut dx = vec![T::zero(); dy.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for ni in 0..n {
                            dx[bi * c * n + ci * n + ni] = dy[bi * c * n + ni * c + ci];
                        }
                    }
                }
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::ToMap(x) => {
                let s = self.shape(*x);
                let (b, n, c) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); dy.len()];
                for bi in 0..b {
                    for ni in 0..n {
                        for ci in 0..c {
                            dx[bi * c * n + ni * c + ci] = dy[bi * c * n + ci * n + ni];
                        }
                    }
                }
                self.accumulate_vec(grads, *x, dx)?;
            }
            Op::Cosine {
                a,
                b,
                eps,
                dot,
                na,
                nb,
            } => {
                let s = self.shape(*a);
                let (bn, c, hw) = (s[0], s[1], s[2] * s[3]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); ad.len()];
                let mut db = vec![T::zero(); bd.len()];
                for bi in 0..bn {
                    for p in 0..hw {
                        let o = bi * hw + p;
                        let g = dy[o];
                        let den = na[o] * nb[o] + *eps;
                        let inv = T::one() / den;
                        let q = dot[o] / (den * den);
                        for ci in 0..c {
                            let idx = (bi * c + ci) * hw + p;
                            let mut ga = bd[idx] * inv;
                            let mut gb = ad[idx] * inv;
                            if na[o] > T::zero() {
                                ga -= q * nb[o] * ad[idx] / na[o];
                            }
                            if nb[o] > T::zero() {
                                gb -= q * na[o] * bd[idx] / nb[o];
                            }
                            da[idx] = g * ga;
                            db[idx] = g * gb;
                        }
                    }
                }
                self.accumulate_vec(grads, *a, da)?;
                self.accumulate_vec(grads, *b, db)?;
            }
            Op::Attention { q, k, v, geom, probs } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    geom,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    dy,
                );
                self.accumulate_vec(grads, *q, dq)?;
                self.accumulate_vec(grads, *k, dk)?;
                self.accumulate_vec(grads, *v, dv)?;
            }
        }
        Ok(())
    }

    fn backward_binary(
        &self,
        node: &Node<T>,
        a: Var,
        b: Var,
        kind: Binary,
        dy: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = node.value.shape();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut da = if self.needs(a) { Some(vec![T::zero(); ad.len()]) } else { None };
        let mut db = if self.needs(b) { Some(vec![T::zero(); bd.len()]) } else { None };
        let mut step = |o: usize, ia: usize, ib: usize| {
            let g = dy[o];
            let (x, y) = (ad[ia], bd[ib]);
            let (ga, gb) = match kind {
                Binary::Add => (g, g),
                Binary::Sub => (g, -g),
                Binary::Mul => (g * y, g * x),
                Binary::Div => (g / y, -g * x / (y * y)),
            };
            if let Some(da) = da.as_mut() {
                da[ia] += ga;
            }
            if let Some(db) = db.as_mut() {
                db[ib] += gb;
            }
        };
        if sa == sb {
            for i in 0..dy.len() {
                step(i, i, i);
            }
        } else {
            let st_a = broadcast_strides(sa, out_shape);
            let st_b = broadcast_strides(sb, out_shape);
            for_each_broadcast(out_shape, &st_a, &st_b, step);
        }
        if let Some(da) = da {
            self.accumulate_vec(grads, a, da)?;
        }
        if let Some(db) = db {
            self.accumulate_vec(grads, b, db)?;
        }
        Ok(())
    }
}
