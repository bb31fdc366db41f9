//! Saliency-guided refinement of the deepest fused feature.
//!
//! The round-one probability map is embedded on the level-4 grid, used as a
//! key to score how well the motion and appearance features agree with it,
//! and those scores weight the two streams before a self-attention pass.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::layers::{child, Conv, Linear, Norm};
use crate::numerics::{Graph, Scalar, SeededRng, Var};
use crate::params::{ParamGroup, ParamStore};
use crate::{Error, Result};

/// Guard added to the weight denominator.
pub const FUSE_EPS: f64 = 1e-6;
/// Guard inside the cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Both weights share the denominator `c_o + c_i + eps`.
    #[default]
    SharedDenominator,
    /// `w_o = c_o/(c_o+c_i+eps)` first, then `w_i = c_i/(w_o+c_i+eps)`.
    SequentialLiteral,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsrmWeights {
    pub embed: Conv,
    pub enc_s: Conv,
    pub enc_io: Conv,
    pub norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub channels: usize,
}

impl IsrmWeights {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut SeededRng, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(format!("{channels} channels not divisible by {heads} heads")));
        }
        let g = ParamGroup::Refinement;
        let n = "isrm";
        Ok(Self {
            embed: Conv::new(store, rng, &child(n, "embed"), g, 1, channels, 1, 1, 0),
            enc_s: Conv::new(store, rng, &child(n, "enc_s"), g, channels, channels, 1, 1, 0),
            enc_io: Conv::new(store, rng, &child(n, "enc_io"), g, channels, channels, 1, 1, 0),
            norm: Norm::new(store, &child(n, "norm"), g, channels),
            query: Linear::new(store, rng, &child(n, "q"), g, channels, channels),
            key: Linear::unbiased(store, rng, &child(n, "k"), g, channels, channels),
            value: Linear::new(store, rng, &child(n, "v"), g, channels, channels),
            out: Linear::new(store, rng, &child(n, "out"), g, channels, channels),
            heads,
            channels,
        })
    }
}

/// Every intermediate of one refinement pass, as tape handles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IsrmState {
    pub s_embed: Var,
    pub s_key: Var,
    pub o_key: Var,
    pub i_key: Var,
    pub w_o: Var,
    pub w_i: Var,
    pub fused: Var,
    pub refined: Var,
}

/// Downsamples `S: [B,1,H,W]` to the `H/32` grid, then 1×1 conv and relu.
pub fn embed_saliency<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, s: Var, w: &IsrmWeights) -> Result<Var> {
    let sh = g.shape(s).to_vec();
    if sh.len() != 4 || sh[1] != 1 || sh[2] % 32 != 0 || sh[3] % 32 != 0 || sh[2] == 0 || sh[3] == 0 {
        return Err(Error::dim("embed_saliency", &sh, &[1, 32, 32]));
    }
    let small = g.resize_bilinear(s, sh[2] / 32, sh[3] / 32)?;
    let e = w.embed.forward(g, store, small)?;
    Ok(g.relu(e))
}

/// Saliency key from its own encoder; motion and appearance keys from one
/// shared encoder.
pub fn compute_keys<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    s_embed: Var,
    o4: Var,
    i4: Var,
    w: &IsrmWeights,
) -> Result<(Var, Var, Var)> {
    let (ss, so, si) = (g.shape(s_embed), g.shape(o4), g.shape(i4));
    if ss != so || so != si {
        return Err(Error::dim("compute_keys", so, ss));
    }
    let s_key = w.enc_s.forward(g, store, s_embed)?;
    let o_key = w.enc_io.forward(g, store, o4)?;
    let i_key = w.enc_io.forward(g, store, i4)?;
    Ok((s_key, o_key, i_key))
}

/// Per-pixel confidence weights from clamped cosine similarity to the
/// saliency key, and the weighted sum of the two streams.
#[allow(clippy::too_many_arguments)]
pub fn fuse_weighted<T: Scalar>(
    g: &mut Graph<T>,
    o4: Var,
    i4: Var,
    s_key: Var,
    o_key: Var,
    i_key: Var,
    eps: f64,
    mode: Normalization,
) -> Result<(Var, Var, Var)> {
    let c_o = g.cosine_channel(s_key, o_key, T::c(COSINE_EPS))?;
    let c_i = g.cosine_channel(s_key, i_key, T::c(COSINE_EPS))?;
    let c_o = g.relu(c_o);
    let c_i = g.relu(c_i);
    let sum = g.add(c_o, c_i)?;
    let denom = g.affine(sum, T::one(), T::c(eps));
    let w_o = g.div(c_o, denom)?;
    let w_i = match mode {
        Normalization::SharedDenominator => g.div(c_i, denom)?,
        Normalization::SequentialLiteral => {
            let s = g.add(w_o, c_i)?;
            let d = g.affine(s, T::one(), T::c(eps));
            g.div(c_i, d)?
        }
    };
    let a = g.mul(w_o, o4)?;
    let b = g.mul(w_i, i4)?;
    let fused = g.add(a, b)?;
    Ok((w_o, w_i, fused))
}

/// One pre-norm self-attention block with residual over `fused + S'`.
pub fn refine_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fused: Var,
    s_embed: Var,
    w: &IsrmWeights,
) -> Result<Var> {
    let z = g.add(fused, s_embed)?;
    let (h, wd) = (g.shape(z)[2], g.shape(z)[3]);
    let t = g.to_tokens(z)?;
    let n = w.norm.forward(g, store, t)?;
    let q = w.query.forward(g, store, n)?;
    let k = w.key.forward(g, store, n)?;
    let v = w.value.forward(g, store, n)?;
    let a = g.attention(q, k, v, w.heads)?;
    let a = w.out.forward(g, store, a)?;
    let r = g.add(t, a)?;
    g.to_map(r, h, wd)
}

pub fn isrm_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    i4: Var,
    o4: Var,
    s: Var,
    w: &IsrmWeights,
    mode: Normalization,
) -> Result<IsrmState> {
    let s_embed = embed_saliency(g, store, s, w)?;
    if g.shape(s_embed)[2..] != g.shape(i4)[2..] {
        return Err(Error::dim("isrm grid", g.shape(s_embed), g.shape(i4)));
    }
    let (s_key, o_key, i_key) = compute_keys(g, store, s_embed, o4, i4, w)?;
    let (w_o, w_i, fused) = fuse_weighted(g, o4, i4, s_key, o_key, i_key, FUSE_EPS, mode)?;
    let refined = refine_self_attention(g, store, fused, s_embed, w)?;
    Ok(IsrmState {
        s_embed,
        s_key,
        o_key,
        i_key,
        w_o,
        w_i,
        fused,
        refined,
    })
}

/// The unrefined level-4 input of the first round, `I₄ + O₄`.
pub fn bypass<T: Scalar>(g: &mut Graph<T>, i4: Var, o4: Var) -> Result<Var> {
    g.add(i4, o4)
}
