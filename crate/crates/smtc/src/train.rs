//! Training driver: seeded batch sampling, AdamW steps and the run log.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use smtc_core::model::{Model, ModelConfig};
use smtc_core::numerics::{AdamWState, SeededRng};
use smtc_core::objective::LossBreakdown;
use smtc_core::training::{train_step, Batch};
use smtc_core::Tensor;

use crate::checkpoint::{self, Checkpoint};
use crate::dataset::{load_dataset, Sequence};
use crate::error::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.smtc";
pub const RUNLOG_FILE: &str = "runlog.csv";

/// Stream of the model initializer is 0; batch sampling draws from this one.
const SAMPLER_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 300,
            seed: 0,
            lr: 1e-4,
            batch_size: 4,
            weight_decay: 1e-2,
        }
    }
}

/// One row of `runlog.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub step: u64,
    pub total: f64,
    pub mask_focal: f64,
    pub mask_bce: f64,
    pub mask_dice: f64,
    pub saliency_focal: f64,
    pub saliency_bce: f64,
    pub saliency_dice: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

pub const RUNLOG_HEADER: [&str; 10] = [
    "step",
    "total",
    "mask_focal",
    "mask_bce",
    "mask_dice",
    "saliency_focal",
    "saliency_bce",
    "saliency_dice",
    "lr",
    "wall_seconds",
];

impl RunLogRow {
    fn new(step: u64, l: &LossBreakdown, lr: f64, wall_seconds: f64) -> Self {
        Self {
            step,
            total: l.total,
            mask_focal: l.mask_focal,
            mask_bce: l.mask_bce,
            mask_dice: l.mask_dice,
            saliency_focal: l.saliency_focal,
            saliency_bce: l.saliency_bce,
            saliency_dice: l.saliency_dice,
            lr,
            wall_seconds,
        }
    }
}

/// Append-only CSV of [`RunLogRow`]s; the header is written once.
pub struct RunLog {
    writer: csv::Writer<fs::File>,
    path: PathBuf,
}

impl RunLog {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(Error::io(path))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(RUNLOG_HEADER).map_err(Error::csv(path))?;
        }
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, row: &RunLogRow) -> Result<()> {
        self.writer.serialize(row).map_err(Error::csv(&self.path))?;
        self.writer.flush().map_err(Error::io(&self.path))
    }
}

pub fn read_runlog(path: &Path) -> Result<Vec<RunLogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(Error::csv(path))?;
    let header: Vec<String> = r.headers().map_err(Error::csv(path))?.iter().map(String::from).collect();
    if header != RUNLOG_HEADER {
        return Err(Error::format(path, format!("unexpected run log header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::csv(path))).collect()
}

/// Training frames cast to single precision, each with a unit batch axis.
pub struct TrainingSet {
    images: Vec<Tensor<f32>>,
    flows: Vec<Tensor<f32>>,
    masks: Vec<Tensor<f32>>,
}

impl TrainingSet {
    /// Every frame of every sequence with masks; other sequences are
    /// skipped with a warning. Frames must match the configured size.
    pub fn new(sequences: &[Sequence], config: &ModelConfig) -> Result<Self> {
        let (h, w) = (config.height, config.width);
        let mut set = Self {
            images: vec![],
            flows: vec![],
            masks: vec![],
        };
        for seq in sequences {
            let masks = match &seq.masks {
                Ok(m) => m,
                Err(why) => {
                    log::warn!("skipping {}: {why}", seq.name);
                    continue;
                }
            };
            for ((f, o), m) in seq.frames.iter().zip(&seq.flows).zip(masks) {
                if f.shape() != [3, h, w] || m.shape() != [h, w] {
                    return Err(smtc_core::Error::Config(format!(
                        "{}: frames are {:?}, model expects {h}x{w}",
                        seq.name,
                        f.shape()
                    ))
                    .into());
                }
                set.images.push(f.cast::<f32>().reshape(&[1, 3, h, w])?);
                set.flows.push(o.cast::<f32>().reshape(&[1, 3, h, w])?);
                set.masks.push(m.cast::<f32>().reshape(&[1, 1, h, w])?);
            }
        }
        if set.images.is_empty() {
            return Err(smtc_core::Error::Config("dataset has no labelled frames".into()).into());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch<f32>> {
        let pick = |v: &[Tensor<f32>]| Tensor::stack_batch(&indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>());
        Ok(Batch::new(pick(&self.images)?, pick(&self.flows)?, pick(&self.masks)?)?)
    }
}

/// Model, optimizer and step after training.
pub type TrainOutcome = Checkpoint<f32>;

/// Runs `opts.steps` AdamW steps from `start` (or a fresh model seeded with
/// `opts.seed`), reporting every step to `on_step`. Batches are drawn
/// uniformly with replacement from a seeded stream; a resumed run draws the
/// same batches an uninterrupted one would have.
pub fn train(
    config: &ModelConfig,
    data: &TrainingSet,
    opts: &TrainOptions,
    start: Option<Checkpoint<f32>>,
    mut on_step: impl FnMut(&RunLogRow) -> Result<()>,
) -> Result<TrainOutcome> {
    if opts.batch_size == 0 {
        return Err(smtc_core::Error::Config("batch size must be positive".into()).into());
    }
    let Checkpoint {
        mut model,
        optimizer,
        step,
    } = match start {
        Some(c) => c,
        None => Checkpoint {
            model: Model::new(config.clone(), opts.seed)?,
            optimizer: None,
            step: 0,
        },
    };
    let mut opt = optimizer.unwrap_or_else(|| AdamWState::new(&model.store, opts.lr as f32, opts.weight_decay as f32));
    let mut rng = SeededRng::stream(opts.seed, SAMPLER_STREAM);
    for _ in 0..step as usize * opts.batch_size {
        rng.below(data.len());
    }
    let clock = Instant::now();
    let mut step = step;
    for _ in 0..opts.steps {
        let idx: Vec<usize> = (0..opts.batch_size).map(|_| rng.below(data.len())).collect();
        let out = train_step(&mut model, &mut opt, &data.batch(&idx)?)?;
        step += 1;
        let row = RunLogRow::new(step, &out.loss, opt.lr as f64, clock.elapsed().as_secs_f64());
        log::debug!("step {step} loss {:.5}", row.total);
        on_step(&row)?;
    }
    Ok(Checkpoint {
        model,
        optimizer: Some(opt),
        step,
    })
}

/// Trains on the dataset under `data_root`, writing `checkpoint.smtc` and
/// appending to `runlog.csv` in `out_dir`.
pub fn train_to_dir(
    config: &ModelConfig,
    data_root: &Path,
    out_dir: &Path,
    opts: &TrainOptions,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let sequences = load_dataset(data_root)?;
    let data = TrainingSet::new(&sequences, config)?;
    let start = resume.map(checkpoint::load::<f32>).transpose()?;
    let config = start.as_ref().map(|c| c.model.config.clone()).unwrap_or_else(|| config.clone());
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let mut log = RunLog::open(&out_dir.join(RUNLOG_FILE))?;
    let outcome = train(&config, &data, opts, start, |row| log.append(row))?;
    checkpoint::save(
        &out_dir.join(CHECKPOINT_FILE),
        &outcome.model,
        outcome.optimizer.as_ref(),
        outcome.step,
    )?;
    Ok(outcome)
}
