//! Ablation sweeps: each variant is trained on the same small synthetic
//! fixture and scored on its training frames.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use smtc_core::encoder::Placement;
use smtc_core::model::{Model, ModelConfig};
use smtc_core::synth::{generate_sequence, SceneConfig, Scenario};
use smtc_core::Tensor;

use crate::dataset::Sequence;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_model, DEFAULT_THRESHOLD};
use crate::train::{train, TrainOptions, TrainingSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Rank,
    Placement,
    Modules,
    Inputs,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Rank, Axis::Placement, Axis::Modules, Axis::Inputs];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Rank => "rank",
            Axis::Placement => "placement",
            Axis::Modules => "modules",
            Axis::Inputs => "inputs",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which streams carry real data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    FlowOnly,
    ImageOnly,
    Both,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::FlowOnly => "flow_only",
            InputMode::ImageOnly => "image_only",
            InputMode::Both => "both",
        }
    }
}

/// Feeds the present stream to both encoder paths, or zeros to the absent
/// one when `zero_absent` is set.
pub fn apply_input_mode(seq: &Sequence, mode: InputMode, zero_absent: bool) -> Sequence {
    let mut out = seq.clone();
    let zeros = |v: &[Tensor<f64>]| v.iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
    match (mode, zero_absent) {
        (InputMode::Both, _) => {}
        (InputMode::FlowOnly, false) => out.frames = seq.flows.clone(),
        (InputMode::FlowOnly, true) => out.frames = zeros(&seq.frames),
        (InputMode::ImageOnly, false) => out.flows = seq.frames.clone(),
        (InputMode::ImageOnly, true) => out.flows = zeros(&seq.flows),
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: ModelConfig,
    pub inputs: InputMode,
}

fn active_placement(base: &ModelConfig) -> Placement {
    if base.placement == Placement::None {
        Placement::Both
    } else {
        base.placement
    }
}

/// The variants of one axis, derived from `base`.
pub fn variants(axis: Axis, base: &ModelConfig) -> Vec<Variant> {
    let with = |name: String, config: ModelConfig| Variant {
        name,
        config,
        inputs: InputMode::Both,
    };
    match axis {
        Axis::Rank => [1, 2, 4, 8, 16]
            .into_iter()
            .map(|r| {
                let cfg = ModelConfig {
                    lora_rank: r,
                    placement: active_placement(base),
                    ..base.clone()
                };
                with(format!("r{r}"), cfg)
            })
            .collect(),
        Axis::Placement => [
            (Placement::None, "none"),
            (Placement::Mhsa, "mhsa"),
            (Placement::Ffn, "ffn"),
            (Placement::Both, "both"),
        ]
        .into_iter()
        .map(|(p, n)| {
            let cfg = ModelConfig {
                placement: p,
                ..base.clone()
            };
            with(n.to_string(), cfg)
        })
        .collect(),
        Axis::Modules => [
            ("baseline", false, false),
            ("+TC", true, false),
            ("+ISRM", false, true),
            ("+both", true, true),
        ]
        .into_iter()
        .map(|(n, tc, isrm)| {
            let cfg = ModelConfig {
                placement: if tc { active_placement(base) } else { Placement::None },
                isrm,
                ..base.clone()
            };
            with(n.to_string(), cfg)
        })
        .collect(),
        Axis::Inputs => [InputMode::FlowOnly, InputMode::ImageOnly, InputMode::Both]
            .into_iter()
            .map(|m| Variant {
                name: m.name().to_string(),
                config: base.clone(),
                inputs: m,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblateOptions {
    pub train: TrainOptions,
    pub sequences: usize,
    pub frames: usize,
    /// Zero the absent stream instead of duplicating the present one.
    pub zero_absent: bool,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self {
            train: TrainOptions {
                steps: 300,
                ..TrainOptions::default()
            },
            sequences: 4,
            frames: 8,
            zero_absent: false,
        }
    }
}

/// One line of the comparison CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub rank: usize,
    pub placement: Placement,
    pub isrm: bool,
    pub inputs: InputMode,
    pub collateral_params: usize,
    pub total_params: usize,
    pub final_loss: f64,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub round1_j_mean: f64,
}

/// In-memory synthetic sequences at the configured size, one scenario per
/// sequence in turn.
pub fn fixture(config: &ModelConfig, sequences: usize, frames: usize, seed: u64) -> Result<Vec<Sequence>> {
    (0..sequences)
        .map(|i| {
            let scenario = Scenario::ALL[i % Scenario::ALL.len()];
            let s = seed.wrapping_add(i as u64);
            let scene = SceneConfig::random(scenario, config.height, config.width, frames, s);
            let sample = generate_sequence(&scene, s)?;
            Ok(Sequence {
                name: format!("{:03}_{}", i, scenario.name()),
                frames: sample.frames,
                flows: sample.flow_rgb,
                masks: Ok(sample.masks),
            })
        })
        .collect()
}

pub fn run_variant(axis: Axis, v: &Variant, data: &[Sequence], opts: &AblateOptions) -> Result<AblationRow> {
    let data: Vec<Sequence> = data.iter().map(|s| apply_input_mode(s, v.inputs, opts.zero_absent)).collect();
    let set = TrainingSet::new(&data, &v.config)?;
    let mut last = f64::NAN;
    let trained = train(&v.config, &set, &opts.train, None, |row| {
        last = row.total;
        Ok(())
    })?;
    let model: Model<f32> = trained.model;
    let eval = evaluate_model(&model, &data, DEFAULT_THRESHOLD, None)?;
    let counts = model.parameter_counts();
    Ok(AblationRow {
        axis: axis.name().to_string(),
        variant: v.name.clone(),
        rank: v.config.lora_rank,
        placement: v.config.placement,
        isrm: v.config.isrm,
        inputs: v.inputs,
        collateral_params: counts.collateral,
        total_params: model.total_parameters(),
        final_loss: last,
        j_mean: eval.round2.j_mean,
        f_mean: eval.round2.f_mean,
        jf_mean: eval.round2.jf_mean,
        round1_j_mean: eval.round1.j_mean,
    })
}

/// Trains and scores every variant of `axis` on a fixture generated at the
/// base configuration's size.
pub fn run_axis(axis: Axis, base: &ModelConfig, opts: &AblateOptions) -> Result<Vec<AblationRow>> {
    let data = fixture(base, opts.sequences, opts.frames, opts.train.seed)?;
    variants(axis, base)
        .iter()
        .map(|v| {
            log::info!("ablate {axis}: {}", v.name);
            run_variant(axis, v, &data, opts)
        })
        .collect()
}

pub fn write_rows(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
    for r in rows {
        w.serialize(r).map_err(Error::csv(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn read_rows(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(Error::csv(path))?;
    r.deserialize().map(|row| row.map_err(Error::csv(path))).collect()
}
