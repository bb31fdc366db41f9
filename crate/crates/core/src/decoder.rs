//! Deepest-first decoder with per-level attention gating and the mask head.

use alloc::format;
use alloc::vec::Vec;

use crate::encoder::FeaturePyramid;
use crate::layers::{child, Conv};
use crate::numerics::{Graph, ReduceKind, Scalar, SeededRng, Var};
use crate::params::{ParamGroup, ParamStore};
use crate::{Error, Result};

/// Channel-then-spatial multiplicative gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CbamWeights {
    pub squeeze: Conv,
    pub excite: Conv,
    pub spatial: Conv,
    pub reduction: usize,
}

pub const CBAM_SPATIAL_KERNEL: usize = 7;

impl CbamWeights {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(format!(
                "cbam: {channels} channels not divisible by reduction {reduction}"
            )));
        }
        let g = ParamGroup::Decoder;
        let hidden = channels / reduction;
        let k = CBAM_SPATIAL_KERNEL;
        Ok(Self {
            squeeze: Conv::new(store, rng, &child(name, "squeeze"), g, channels, hidden, 1, 1, 0),
            excite: Conv::new(store, rng, &child(name, "excite"), g, hidden, channels, 1, 1, 0),
            spatial: Conv::new(store, rng, &child(name, "spatial"), g, 2, 1, k, 1, k / 2),
            reduction,
        })
    }
}

fn pool_spatial<T: Scalar>(g: &mut Graph<T>, x: Var, kind: ReduceKind) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    let r = g.reduce(flat, Some(2), kind)?;
    g.reshape(r, &[s[0], s[1], 1, 1])
}

pub fn cbam<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, w: &CbamWeights) -> Result<Var> {
    let c = g.shape(x)[1];
    if c % w.reduction != 0 {
        return Err(Error::config(format!("cbam: {c} channels not divisible by {}", w.reduction)));
    }
    let mlp = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let h = w.squeeze.forward(g, store, v)?;
        let h = g.relu(h);
        w.excite.forward(g, store, h)
    };
    let avg = pool_spatial(g, x, ReduceKind::Mean)?;
    let max = pool_spatial(g, x, ReduceKind::Max)?;
    let a = mlp(g, avg)?;
    let m = mlp(g, max)?;
    let logits = g.add(a, m)?;
    let channel_gate = g.sigmoid(logits);
    let xc = g.mul(x, channel_gate)?;

    let mean_c = g.reduce(xc, Some(1), ReduceKind::Mean)?;
    let max_c = g.reduce(xc, Some(1), ReduceKind::Max)?;
    let desc = g.concat_channels(mean_c, max_c)?;
    let s = w.spatial.forward(g, store, desc)?;
    let spatial_gate = g.sigmoid(s);
    g.mul(xc, spatial_gate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelWeights {
    pub conv: Conv,
    pub cbam: CbamWeights,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderWeights {
    /// Index 0 is the finest level.
    pub levels: Vec<LevelWeights>,
    pub head: Conv,
    pub width: usize,
}

impl DecoderWeights {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        channels: &[usize],
        width: usize,
        cbam_reduction: usize,
    ) -> Result<Self> {
        if channels.len() != 4 || width == 0 {
            return Err(Error::config("decoder needs four levels and a positive width"));
        }
        let g = ParamGroup::Decoder;
        let mut levels = Vec::with_capacity(4);
        for (i, &c) in channels.iter().enumerate() {
            let name = format!("decoder.level{}", i + 1);
            let in_ch = if i == 3 { c } else { c + width };
            levels.push(LevelWeights {
                conv: Conv::new(store, rng, &child(&name, "conv"), g, in_ch, width, 3, 1, 1),
                cbam: CbamWeights::new(store, rng, &child(&name, "cbam"), width, cbam_reduction)?,
            });
        }
        let head = Conv::new(store, rng, "decoder.head", g, width, 1, 1, 1, 0);
        Ok(Self { levels, head, width })
    }
}

/// `upsample×2(cbam(relu(conv3×3(concat(F′ᵢ, deeper)))))`.
pub fn decode_level<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fused: Var,
    deeper: Option<Var>,
    w: &LevelWeights,
) -> Result<Var> {
    let x = match deeper {
        Some(d) => {
            if g.shape(d)[2..] != g.shape(fused)[2..] {
                return Err(Error::dim("decode_level grid", g.shape(fused), g.shape(d)));
            }
            g.concat_channels(fused, d)?
        }
        None => fused,
    };
    let y = w.conv.forward(g, store, x)?;
    let y = g.relu(y);
    let y = cbam(g, store, y, &w.cbam)?;
    let (h, wd) = (g.shape(y)[2], g.shape(y)[3]);
    g.resize_bilinear(y, 2 * h, 2 * wd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOutput {
    pub prob: Var,
    pub logits: Var,
    /// Decoded features per level (finest first), each after its upsample.
    pub decoded: [Var; 4],
}

/// Decodes already-fused level features, deepest first.
pub fn decode_fused<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fused: &[Var; 4],
    w: &DecoderWeights,
) -> Result<DecodeOutput> {
    let mut decoded = *fused;
    let mut d = decode_level(g, store, fused[3], None, &w.levels[3])?;
    decoded[3] = d;
    for i in (0..3).rev() {
        d = decode_level(g, store, fused[i], Some(d), &w.levels[i])?;
        decoded[i] = d;
    }
    let half = w.head.forward(g, store, d)?;
    let (h, wd) = (g.shape(half)[2], g.shape(half)[3]);
    let logits = g.resize_bilinear(half, 2 * h, 2 * wd)?;
    let prob = g.sigmoid(logits);
    Ok(DecodeOutput { prob, logits, decoded })
}

/// Per-level sums `Iᵢ + Oᵢ`.
pub fn fuse_pyramids<T: Scalar>(g: &mut Graph<T>, pyr_i: &FeaturePyramid, pyr_o: &FeaturePyramid) -> Result<[Var; 4]> {
    let mut out = pyr_i.levels;
    for (o, (&a, &b)) in out.iter_mut().zip(pyr_i.levels.iter().zip(&pyr_o.levels)) {
        *o = g.add(a, b)?;
    }
    Ok(out)
}

/// Fuses both pyramids, optionally replaces the level-4 input, and decodes.
pub fn decode_full<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    pyr_i: &FeaturePyramid,
    pyr_o: &FeaturePyramid,
    f4_override: Option<Var>,
    w: &DecoderWeights,
) -> Result<DecodeOutput> {
    let mut fused = fuse_pyramids(g, pyr_i, pyr_o)?;
    if let Some(f4) = f4_override {
        if g.shape(f4) != g.shape(fused[3]) {
            return Err(Error::dim("f4 override", g.shape(fused[3]), g.shape(f4)));
        }
        fused[3] = f4;
    }
    decode_fused(g, store, &fused, w)
}
