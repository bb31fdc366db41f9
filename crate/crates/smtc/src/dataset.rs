//! On-disk sequence layout shared by `gen-data`, `train`, `evaluate` and
//! `infer`:
//!
//! ```text
//! <root>/<seq>/frames/00000.png   RGB frame
//! <root>/<seq>/flows/00000.png    colour-wheel flow rendering
//! <root>/<seq>/masks/00000.png    binary mask (optional)
//! <root>/<seq>/meta.json          scene description (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smtc_core::synth::{generate_sequence, SceneConfig, Scenario, VideoSample};
use smtc_core::Tensor;

use crate::error::{Error, Result};
use crate::image_io::{read_gray, read_mask, read_rgb, write_gray, write_rgb};

pub const FRAMES_DIR: &str = "frames";
pub const FLOWS_DIR: &str = "flows";
pub const MASKS_DIR: &str = "masks";
pub const META_FILE: &str = "meta.json";

/// How flow renderings were scaled before colour coding.
pub const FLOW_NORMALIZATION: &str = "per_frame_max";

pub fn frame_file(index: usize) -> String {
    format!("{index:05}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub scene: SceneConfig,
    pub seed: u64,
    pub flow_normalization: String,
    /// Magnitude mapped to full saturation, per frame.
    pub flow_max: Vec<f64>,
}

/// One sequence loaded into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    /// `[3,H,W]` each.
    pub frames: Vec<Tensor<f64>>,
    /// `[3,H,W]` each.
    pub flows: Vec<Tensor<f64>>,
    /// `[H,W]` each, or why they are unusable.
    pub masks: std::result::Result<Vec<Tensor<f64>>, String>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::io(path))
}

pub fn write_sequence(root: &Path, name: &str, sample: &VideoSample, scene: &SceneConfig, seed: u64) -> Result<()> {
    let dir = root.join(name);
    for sub in [FRAMES_DIR, FLOWS_DIR, MASKS_DIR] {
        create_dir(&dir.join(sub))?;
    }
    for t in 0..sample.frames.len() {
        let file = frame_file(t);
        write_rgb(&dir.join(FRAMES_DIR).join(&file), &sample.frames[t])?;
        write_rgb(&dir.join(FLOWS_DIR).join(&file), &sample.flow_rgb[t])?;
        write_gray(&dir.join(MASKS_DIR).join(&file), &sample.masks[t])?;
    }
    let meta = SequenceMeta {
        scene: scene.clone(),
        seed,
        flow_normalization: FLOW_NORMALIZATION.to_string(),
        flow_max: sample.flow_max.clone(),
    };
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(Error::json(&path))?;
    fs::write(&path, text).map_err(Error::io(&path))
}

/// Parameters of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateOptions {
    pub sequences: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub seed: u64,
}

/// Writes `sequences` scenes cycling through every scenario; sequence `i`
/// uses seed `seed + i`. Returns the sequence names.
pub fn generate_dataset(root: &Path, opts: &GenerateOptions) -> Result<Vec<String>> {
    create_dir(root)?;
    let mut names = Vec::with_capacity(opts.sequences);
    for i in 0..opts.sequences {
        let scenario = Scenario::ALL[i % Scenario::ALL.len()];
        let seed = opts.seed.wrapping_add(i as u64);
        let scene = SceneConfig::random(scenario, opts.height, opts.width, opts.frames, seed);
        let sample = generate_sequence(&scene, seed)?;
        let name = format!("{:03}_{}", i, scenario.name());
        write_sequence(root, &name, &sample, &scene, seed)?;
        names.push(name);
    }
    Ok(names)
}

/// Sorted names of the subdirectories holding a `frames/` folder.
pub fn list_sequences(root: &Path) -> Result<Vec<String>> {
    let mut names = vec![];
    for entry in fs::read_dir(root).map_err(Error::io(root))? {
        let entry = entry.map_err(Error::io(root))?;
        if entry.path().join(FRAMES_DIR).is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Sorted `*.png` files of a directory.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = vec![];
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let p = entry.map_err(Error::io(dir))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_meta(root: &Path, name: &str) -> Result<Option<SequenceMeta>> {
    let path = root.join(name).join(META_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map(Some).map_err(Error::json(&path))
}

/// Frames and flows of a directory pair; their counts must agree.
pub fn load_inputs(frames_dir: &Path, flows_dir: &Path) -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
    let frame_files = png_files(frames_dir)?;
    let flow_files = png_files(flows_dir)?;
    if frame_files.len() != flow_files.len() {
        return Err(smtc_core::Error::Contract(format!(
            "{} frames in {} but {} flows in {}",
            frame_files.len(),
            frames_dir.display(),
            flow_files.len(),
            flows_dir.display()
        ))
        .into());
    }
    let frames = frame_files.iter().map(|p| read_rgb(p)).collect::<Result<Vec<_>>>()?;
    let flows = flow_files.iter().map(|p| read_rgb(p)).collect::<Result<Vec<_>>>()?;
    for (p, (f, o)) in flow_files.iter().zip(frames.iter().zip(&flows)) {
        if f.shape() != o.shape() {
            return Err(Error::format(p, format!("flow {:?} does not match frame {:?}", o.shape(), f.shape())));
        }
    }
    Ok((frames, flows))
}

pub fn load_sequence(root: &Path, name: &str) -> Result<Sequence> {
    let dir = root.join(name);
    let (frames, flows) = load_inputs(&dir.join(FRAMES_DIR), &dir.join(FLOWS_DIR))?;
    let mask_dir = dir.join(MASKS_DIR);
    let masks = if !mask_dir.is_dir() {
        Err("no masks directory".to_string())
    } else {
        let files = png_files(&mask_dir)?;
        if files.len() != frames.len() {
            Err(format!("{} masks for {} frames", files.len(), frames.len()))
        } else {
            Ok(files.iter().map(|p| read_mask(p)).collect::<Result<Vec<_>>>()?)
        }
    };
    Ok(Sequence {
        name: name.to_string(),
        frames,
        flows,
        masks,
    })
}

/// Every sequence under `root`, in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>> {
    list_sequences(root)?.iter().map(|n| load_sequence(root, n)).collect()
}

/// Loads single-channel maps (e.g. saved predictions) from a directory.
pub fn load_maps(dir: &Path) -> Result<Vec<Tensor<f64>>> {
    png_files(dir)?.iter().map(|p| read_gray(p)).collect()
}
