//! Four-stage hierarchical transformer trunk shared by the appearance and
//! motion streams. The motion stream additionally runs low-rank collateral
//! branches on the attention projections and on the post-residual FFN
//! output of every block.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::layers::{child, Conv, Linear, Norm};
use crate::numerics::{Graph, Scalar, SeededRng, Tensor, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::{Error, Result};

/// Standard deviation of the initial `A` factor of every collateral pair.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub reduction_ratio: usize,
    pub patch_kernel: usize,
    pub patch_stride: usize,
}

/// Where collateral branches are attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    None,
    Mhsa,
    Ffn,
    Both,
}

impl Placement {
    pub fn mhsa(self) -> bool {
        matches!(self, Placement::Mhsa | Placement::Both)
    }

    pub fn ffn(self) -> bool {
        matches!(self, Placement::Ffn | Placement::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachPoint {
    Query,
    Key,
    Value,
    AttnOut,
    FfnPostResidual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stages: Vec<StageConfig>,
    /// Collateral rank; 0 disables every branch.
    pub rank: usize,
    pub placement: Placement,
    /// Also decorate the attention output projection when attention
    /// placement is active.
    pub decorate_attn_out: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::config(format!("expected 4 stages, got {}", self.stages.len())));
        }
        let mut total = 1;
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.heads == 0 || s.channels % s.heads != 0 {
                return Err(Error::config(format!(
                    "stage {}: channels {} not divisible by heads {}",
                    i + 1,
                    s.channels,
                    s.heads
                )));
            }
            if s.depth == 0 || s.reduction_ratio == 0 {
                return Err(Error::config(format!("stage {}: depth and reduction ratio must be positive", i + 1)));
            }
            if s.patch_kernel % 2 == 0 || s.patch_kernel < s.patch_stride {
                return Err(Error::config(format!(
                    "stage {}: patch kernel {} must be odd and cover stride {}",
                    i + 1,
                    s.patch_kernel,
                    s.patch_stride
                )));
            }
            total *= s.patch_stride;
            if total != 1 << (i + 2) {
                return Err(Error::config(format!(
                    "stage {}: cumulative stride {} breaks the H/2^(i+1) scale contract",
                    i + 1,
                    total
                )));
            }
            if self.collateral_active() && 2 * self.rank > s.channels {
                return Err(Error::config(format!(
                    "rank {} exceeds min(d,k)/2 = {} at stage {}",
                    self.rank,
                    s.channels / 2,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn collateral_active(&self) -> bool {
        self.rank > 0 && self.placement != Placement::None
    }

    /// Total downsampling of the deepest level.
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch_stride).product()
    }
}

/// Collateral branch `x ↦ B·(A·x)` decorating one trunk dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraPair {
    /// `[r, k]`
    pub a: ParamId,
    /// `[d, r]`
    pub b: ParamId,
    pub rank: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub attach: AttachPoint,
}

impl LoraPair {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        attach: AttachPoint,
    ) -> Result<Self> {
        if rank == 0 || 2 * rank > in_dim.min(out_dim) {
            return Err(Error::config(format!(
                "rank {rank} outside 1..=min({out_dim},{in_dim})/2 for {name}"
            )));
        }
        let a = store.add(
            child(name, "a"),
            ParamGroup::Collateral,
            rng.normal_tensor(&[rank, in_dim], LORA_INIT_STD),
        );
        let b = store.add(child(name, "b"), ParamGroup::Collateral, Tensor::zeros(&[out_dim, rank]));
        Ok(Self {
            a,
            b,
            rank,
            in_dim,
            out_dim,
            attach,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.rank * (self.in_dim + self.out_dim)
    }

    /// `B·(A·x)` over the trailing extent.
    pub fn delta<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = g.param(store, self.a);
        let b = g.param(store, self.b);
        let ax = g.linear(x, a, None)?;
        g.linear(ax, b, None)
    }
}

/// `W₀x + B(Ax)`, never forming the `d×k` product `BA`.
pub fn lora_apply<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    trunk: &Linear,
    pair: Option<&LoraPair>,
) -> Result<Var> {
    let y = trunk.forward(g, store, x)?;
    match pair {
        Some(p) => {
            let d = p.delta(g, store, x)?;
            g.add(y, d)
        }
        None => Ok(y),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    /// Strided conv plus norm shrinking the key/value grid.
    pub reduction: Option<(Conv, Norm)>,
    pub heads: usize,
    pub reduction_ratio: usize,
}

impl AttentionWeights {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        name: &str,
        channels: usize,
        heads: usize,
        reduction_ratio: usize,
    ) -> Self {
        let g = ParamGroup::Trunk;
        let reduction = (reduction_ratio > 1).then(|| {
            let conv = Conv::new(
                store,
                rng,
                &child(name, "sr"),
                g,
                channels,
                channels,
                reduction_ratio,
                reduction_ratio,
                0,
            );
            (conv, Norm::new(store, &child(name, "sr_norm"), g, channels))
        });
        Self {
            query: Linear::new(store, rng, &child(name, "q"), g, channels, channels),
            key: Linear::unbiased(store, rng, &child(name, "k"), g, channels, channels),
            value: Linear::new(store, rng, &child(name, "v"), g, channels, channels),
            out: Linear::new(store, rng, &child(name, "out"), g, channels, channels),
            reduction,
            heads,
            reduction_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttentionCollateral {
    pub query: Option<LoraPair>,
    pub key: Option<LoraPair>,
    pub value: Option<LoraPair>,
    pub out: Option<LoraPair>,
}

impl AttentionCollateral {
    fn pairs(&self) -> impl Iterator<Item = &LoraPair> {
        [&self.query, &self.key, &self.value, &self.out].into_iter().flatten()
    }
}

/// Attention sub-layer over `[B, h·w, C]` tokens. Keys and values are taken
/// from the grid after spatial reduction.
#[allow(clippy::too_many_arguments)]
pub fn efficient_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    h: usize,
    w: usize,
    weights: &AttentionWeights,
    collateral: Option<&AttentionCollateral>,
) -> Result<Var> {
    let c = g.shape(x).last().copied().unwrap_or(0);
    if weights.heads == 0 || c % weights.heads != 0 {
        return Err(Error::config(format!("{c} channels not divisible by {} heads", weights.heads)));
    }
    let col = collateral.copied().unwrap_or_default();
    let q = lora_apply(g, store, x, &weights.query, col.query.as_ref())?;
    let kv = match &weights.reduction {
        Some((conv, norm)) => {
            let map = g.to_map(x, h, w)?;
            let reduced = conv.forward(g, store, map)?;
            let tokens = g.to_tokens(reduced)?;
            norm.forward(g, store, tokens)?
        }
        None => x,
    };
    let k = lora_apply(g, store, kv, &weights.key, col.key.as_ref())?;
    let v = lora_apply(g, store, kv, &weights.value, col.value.as_ref())?;
    let a = g.attention(q, k, v, weights.heads)?;
    lora_apply(g, store, a, &weights.out, col.out.as_ref())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnWeights {
    pub norm: Norm,
    pub expand: Linear,
    pub depthwise: Conv,
    pub contract: Linear,
}

impl FfnWeights {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut SeededRng, name: &str, channels: usize) -> Self {
        let g = ParamGroup::Trunk;
        let hidden = 4 * channels;
        Self {
            norm: Norm::new(store, &child(name, "norm"), g, channels),
            expand: Linear::new(store, rng, &child(name, "expand"), g, channels, hidden),
            depthwise: Conv::depthwise(store, rng, &child(name, "dw"), g, hidden, 3, 1),
            contract: Linear::new(store, rng, &child(name, "contract"), g, hidden, channels),
        }
    }
}

/// Pre-norm feed-forward sub-layer with its residual, `x' = x + FFN(x)`.
/// A collateral pair acts on the post-residual value: `x' + B·A·x'`.
pub fn mix_ffn<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    h: usize,
    w: usize,
    weights: &FfnWeights,
    collateral: Option<&LoraPair>,
) -> Result<Var> {
    let n = weights.norm.forward(g, store, x)?;
    let e = weights.expand.forward(g, store, n)?;
    let map = g.to_map(e, h, w)?;
    let map = weights.depthwise.forward(g, store, map)?;
    let t = g.to_tokens(map)?;
    let t = g.gelu(t);
    let y = weights.contract.forward(g, store, t)?;
    let post = g.add(x, y)?;
    match collateral {
        Some(p) => {
            let d = p.delta(g, store, post)?;
            g.add(post, d)
        }
        None => Ok(post),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub norm: Norm,
    pub attention: AttentionWeights,
    pub ffn: FfnWeights,
    pub attn_collateral: Option<AttentionCollateral>,
    pub ffn_collateral: Option<LoraPair>,
}

impl Block {
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h: usize,
        w: usize,
        collateral: bool,
    ) -> Result<Var> {
        let n = self.norm.forward(g, store, x)?;
        let attn_col = if collateral { self.attn_collateral.as_ref() } else { None };
        let a = efficient_self_attention(g, store, n, h, w, &self.attention, attn_col)?;
        let x = g.add(x, a)?;
        let ffn_col = if collateral { self.ffn_collateral.as_ref() } else { None };
        mix_ffn(g, store, x, h, w, &self.ffn, ffn_col)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub config: StageConfig,
    pub embed: Conv,
    pub embed_norm: Norm,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

/// Strided conv over a `[B,C,H,W]` map followed by a channel norm; returns
/// tokens `[B, H/s·W/s, C']` and the new grid.
pub fn overlap_patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    stage: &Stage,
) -> Result<(Var, usize, usize)> {
    let s = g.shape(x).to_vec();
    let stride = stage.config.patch_stride;
    if s.len() != 4 || s[2] % stride != 0 || s[3] % stride != 0 {
        return Err(Error::dim("patch embed", &s, &[stride, stride]));
    }
    let map = stage.embed.forward(g, store, x)?;
    let (h, w) = (g.shape(map)[2], g.shape(map)[3]);
    let tokens = g.to_tokens(map)?;
    let tokens = stage.embed_norm.forward(g, store, tokens)?;
    Ok((tokens, h, w))
}

/// Four feature maps; level `i` (0-based) has grid `H/2^(i+2) × W/2^(i+2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        config: &EncoderConfig,
        in_channels: usize,
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut prev = in_channels;
        for (i, sc) in config.stages.iter().enumerate() {
            let name = format!("encoder.stage{}", i + 1);
            let c = sc.channels;
            let embed = Conv::new(
                store,
                rng,
                &child(&name, "embed"),
                ParamGroup::Trunk,
                prev,
                c,
                sc.patch_kernel,
                sc.patch_stride,
                sc.patch_kernel / 2,
            );
            let embed_norm = Norm::new(store, &child(&name, "embed_norm"), ParamGroup::Trunk, c);
            let mut blocks = Vec::with_capacity(sc.depth);
            for j in 0..sc.depth {
                let bname = format!("{name}.block{}", j + 1);
                let norm = Norm::new(store, &child(&bname, "norm"), ParamGroup::Trunk, c);
                let attention = AttentionWeights::new(
                    store,
                    rng,
                    &child(&bname, "attn"),
                    c,
                    sc.heads,
                    sc.reduction_ratio,
                );
                let ffn = FfnWeights::new(store, rng, &child(&bname, "ffn"), c);
                let mut pair = |site: &str, attach| {
                    LoraPair::new(store, rng, &format!("{bname}.lora.{site}"), c, c, config.rank, attach)
                };
                let active = config.collateral_active();
                let attn_collateral = if active && config.placement.mhsa() {
                    Some(AttentionCollateral {
                        query: Some(pair("q", AttachPoint::Query)?),
                        key: Some(pair("k", AttachPoint::Key)?),
                        value: Some(pair("v", AttachPoint::Value)?),
                        out: if config.decorate_attn_out {
                            Some(pair("out", AttachPoint::AttnOut)?)
                        } else {
                            None
                        },
                    })
                } else {
                    None
                };
                let ffn_collateral = if active && config.placement.ffn() {
                    Some(pair("ffn", AttachPoint::FfnPostResidual)?)
                } else {
                    None
                };
                blocks.push(Block {
                    norm,
                    attention,
                    ffn,
                    attn_collateral,
                    ffn_collateral,
                });
            }
            let norm = Norm::new(store, &child(&name, "norm"), ParamGroup::Trunk, c);
            stages.push(Stage {
                config: *sc,
                embed,
                embed_norm,
                blocks,
                norm,
            });
            prev = c;
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    /// Every collateral pair, in construction order.
    pub fn collateral_pairs(&self) -> Vec<LoraPair> {
        let mut out = Vec::new();
        for b in self.stages.iter().flat_map(|s| &s.blocks) {
            if let Some(a) = &b.attn_collateral {
                out.extend(a.pairs().copied());
            }
            out.extend(b.ffn_collateral);
        }
        out
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        let total = self.config.total_stride();
        if s.len() != 4 || s[2] == 0 || s[3] == 0 || s[2] % total != 0 || s[3] % total != 0 {
            return Err(Error::dim("encoder input", s, &[total, total]));
        }
        Ok(())
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, collateral: bool) -> Result<FeaturePyramid> {
        self.check_input(g, x)?;
        let mut levels = [x; 4];
        let mut cur = x;
        for (i, stage) in self.stages.iter().enumerate() {
            let (mut t, h, w) = overlap_patch_embed(g, store, cur, stage)?;
            for block in &stage.blocks {
                t = block.forward(g, store, t, h, w, collateral)?;
            }
            let t = stage.norm.forward(g, store, t)?;
            cur = g.to_map(t, h, w)?;
            levels[i] = cur;
        }
        Ok(FeaturePyramid { levels })
    }

    /// Trunk-only pass for RGB frames.
    pub fn encode_appearance<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<FeaturePyramid> {
        self.forward(g, store, image, false)
    }

    /// Trunk pass with every collateral branch active, for rendered flow.
    pub fn encode_motion<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, flow_rgb: Var) -> Result<FeaturePyramid> {
        self.forward(g, store, flow_rgb, true)
    }
}

/// Parameter totals split into shared trunk and collateral branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub trunk: usize,
    pub collateral: usize,
}

pub fn count_parameters<T: Scalar>(store: &ParamStore<T>) -> ParameterCounts {
    ParameterCounts {
        trunk: store.count(ParamGroup::Trunk),
        collateral: store.count(ParamGroup::Collateral),
    }
}
