//! Network assembly: configuration, parameter layout and the two-round
//! forward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoder::{decode_fused, fuse_pyramids, DecodeOutput, DecoderWeights};
use crate::encoder::{count_parameters, Encoder, EncoderConfig, FeaturePyramid, ParameterCounts, Placement, StageConfig};
use crate::isrm::{bypass, isrm_forward, IsrmState, IsrmWeights, Normalization};
use crate::numerics::{Graph, Scalar, SeededRng, Var};
use crate::objective::LossWeights;
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stages: Vec<StageConfig>,
    pub lora_rank: usize,
    pub placement: Placement,
    pub decorate_attn_out: bool,
    pub decoder_width: usize,
    pub cbam_reduction: usize,
    pub isrm: bool,
    pub isrm_normalization: Normalization,
    pub loss: LossWeights,
    pub height: usize,
    pub width: usize,
}

fn stages(channels: [usize; 4]) -> Vec<StageConfig> {
    let heads = [1, 2, 4, 8];
    let depth = [1, 1, 2, 1];
    let ratio = [8, 4, 2, 1];
    let patch = [(7, 4), (3, 2), (3, 2), (3, 2)];
    (0..4)
        .map(|i| StageConfig {
            channels: channels[i],
            depth: depth[i],
            heads: heads[i].min(channels[i]),
            reduction_ratio: ratio[i],
            patch_kernel: patch[i].0,
            patch_stride: patch[i].1,
        })
        .collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: stages([16, 32, 64, 128]),
            lora_rank: 8,
            placement: Placement::Both,
            decorate_attn_out: true,
            decoder_width: 64,
            cbam_reduction: 8,
            isrm: true,
            isrm_normalization: Normalization::SharedDenominator,
            loss: LossWeights::default(),
            height: 128,
            width: 128,
        }
    }
}

impl ModelConfig {
    /// Small double-precision configuration for gradient checks.
    pub fn tiny() -> Self {
        Self {
            stages: stages([4, 8, 16, 32]),
            lora_rank: 2,
            decoder_width: 8,
            cbam_reduction: 4,
            height: 32,
            width: 32,
            ..Self::default()
        }
    }

    /// Tiny grid with channels wide enough for every rank up to 16.
    pub fn ablation() -> Self {
        Self {
            stages: stages([32, 32, 32, 32]),
            decoder_width: 16,
            cbam_reduction: 4,
            height: 32,
            width: 32,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "tiny" => Ok(Self::tiny()),
            "ablation" => Ok(Self::ablation()),
            other => Err(Error::config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            stages: self.stages.clone(),
            rank: self.lora_rank,
            placement: self.placement,
            decorate_attn_out: self.decorate_attn_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        self.loss.validate()?;
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::config(format!(
                "input {}x{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Parameter layout of the full network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Net {
    pub encoder: Encoder,
    pub isrm: Option<IsrmWeights>,
    pub decoder: DecoderWeights,
    pub normalization: Normalization,
}

impl Net {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::stream(seed, 0);
        let encoder = Encoder::new(store, &mut rng, &config.encoder_config(), 3)?;
        let c4 = config.stages[3].channels;
        let isrm = if config.isrm {
            Some(IsrmWeights::new(store, &mut rng, c4, config.stages[3].heads)?)
        } else {
            None
        };
        let channels: Vec<usize> = config.stages.iter().map(|s| s.channels).collect();
        let decoder = DecoderWeights::new(store, &mut rng, &channels, config.decoder_width, config.cbam_reduction)?;
        Ok(Self {
            encoder,
            isrm,
            decoder,
            normalization: config.isrm_normalization,
        })
    }
}

/// Everything produced by one two-round pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwoRound {
    pub appearance: FeaturePyramid,
    pub motion: FeaturePyramid,
    pub fused: [Var; 4],
    pub round1: DecodeOutput,
    pub round2: DecodeOutput,
    pub isrm: Option<IsrmState>,
}

/// Round one decodes `Iᵢ + Oᵢ`; round two swaps the level-4 input for the
/// refined feature and decodes again. Pyramids are computed once.
pub fn predict_two_round<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    net: &Net,
    image: Var,
    flow_rgb: Var,
) -> Result<TwoRound> {
    if g.shape(image) != g.shape(flow_rgb) {
        return Err(Error::dim("predict_two_round", g.shape(image), g.shape(flow_rgb)));
    }
    let appearance = net.encoder.encode_appearance(g, store, image)?;
    let motion = net.encoder.encode_motion(g, store, flow_rgb)?;
    let fused = fuse_pyramids(g, &appearance, &motion)?;
    let round1 = decode_fused(g, store, &fused, &net.decoder)?;
    let (i4, o4) = (appearance.levels[3], motion.levels[3]);
    let (f4, isrm) = match &net.isrm {
        Some(w) => {
            let st = isrm_forward(g, store, i4, o4, round1.prob, w, net.normalization)?;
            (st.refined, Some(st))
        }
        None => (bypass(g, i4, o4)?, None),
    };
    let mut second = fused;
    second[3] = f4;
    let round2 = decode_fused(g, store, &second, &net.decoder)?;
    Ok(TwoRound {
        appearance,
        motion,
        fused,
        round1,
        round2,
        isrm,
    })
}

/// Configuration, layout and parameter values together.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub net: Net,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Net::new(&mut store, &config, seed)?;
        Ok(Self { config, net, store })
    }

    pub fn parameter_counts(&self) -> ParameterCounts {
        count_parameters(&self.store)
    }

    /// Same layout and values at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }

    pub fn total_parameters(&self) -> usize {
        self.store.iter().map(|(_, p)| p.value.numel()).sum()
    }
}

/// Names of the learnable tensors, in store order.
pub fn parameter_names<T: Scalar>(store: &ParamStore<T>) -> Vec<&str> {
    let mut out = vec![];
    for (_, p) in store.iter() {
        out.push(p.name.as_str());
    }
    out
}
