//! Scoring a model (or saved prediction maps) against dataset masks.

use std::fs;
use std::path::Path;

use smtc_core::metrics::{evaluate_sequence, MetricReport, SequenceMetrics};
use smtc_core::model::Model;
use smtc_core::training::predict;
use smtc_core::Tensor;

use crate::dataset::{load_maps, Sequence, MASKS_DIR};
use crate::error::{Error, Result};
use crate::image_io::write_rgb;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Round-one saliency and round-two mask probabilities, `[H,W]` per frame.
pub fn predict_sequence(model: &Model<f32>, seq: &Sequence) -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
    let mut saliency = Vec::with_capacity(seq.len());
    let mut masks = Vec::with_capacity(seq.len());
    for (f, o) in seq.frames.iter().zip(&seq.flows) {
        let s = f.shape();
        let (h, w) = (s[1], s[2]);
        let img = f.cast::<f32>().reshape(&[1, 3, h, w])?;
        let flow = o.cast::<f32>().reshape(&[1, 3, h, w])?;
        let (r1, r2) = predict(model, &img, &flow)?;
        saliency.push(r1.cast::<f64>().reshape(&[h, w])?);
        masks.push(r2.cast::<f64>().reshape(&[h, w])?);
    }
    Ok((saliency, masks))
}

/// Reports for both rounds of the same forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub round1: MetricReport,
    pub round2: MetricReport,
}

fn score(
    sequences: &[Sequence],
    mut preds: impl FnMut(&Sequence) -> Result<Vec<Vec<Tensor<f64>>>>,
    threshold: f64,
    rounds: usize,
) -> Result<Vec<MetricReport>> {
    let mut rows: Vec<Vec<SequenceMetrics>> = vec![vec![]; rounds];
    let mut skipped = vec![];
    for seq in sequences {
        let gts = match &seq.masks {
            Ok(m) => m,
            Err(why) => {
                log::warn!("skipping {}: {why}", seq.name);
                skipped.push((seq.name.clone(), why.clone()));
                continue;
            }
        };
        for (k, p) in preds(seq)?.into_iter().enumerate() {
            rows[k].push(evaluate_sequence(&seq.name, &p, gts, threshold)?);
        }
    }
    Ok(rows
        .into_iter()
        .map(|r| MetricReport::from_sequences(r, skipped.clone()))
        .collect())
}

/// Runs the two-round prediction on every frame and scores both rounds.
/// With `overlays`, writes `<dir>/<seq>/00000.png` frames tinted where the
/// round-two mask is on.
pub fn evaluate_model(
    model: &Model<f32>,
    sequences: &[Sequence],
    threshold: f64,
    overlays: Option<&Path>,
) -> Result<Evaluation> {
    let mut reports = score(
        sequences,
        |seq| {
            let (s, m) = predict_sequence(model, seq)?;
            if let Some(dir) = overlays {
                write_overlays(&dir.join(&seq.name), &seq.frames, &m, threshold)?;
            }
            Ok(vec![s, m])
        },
        threshold,
        2,
    )?;
    let round2 = reports.pop().expect("two rounds");
    let round1 = reports.pop().expect("two rounds");
    Ok(Evaluation { round1, round2 })
}

/// Scores maps read from `<pred_root>/<seq>/masks/*.png`.
pub fn evaluate_predictions(pred_root: &Path, sequences: &[Sequence], threshold: f64) -> Result<MetricReport> {
    let mut reports = score(
        sequences,
        |seq| {
            let dir = pred_root.join(&seq.name).join(MASKS_DIR);
            let maps = load_maps(&dir)?;
            if maps.len() != seq.len() {
                return Err(Error::format(&dir, format!("{} predictions for {} frames", maps.len(), seq.len())));
            }
            Ok(vec![maps])
        },
        threshold,
        1,
    )?;
    Ok(reports.pop().expect("one round"))
}

pub fn write_overlays(dir: &Path, frames: &[Tensor<f64>], masks: &[Tensor<f64>], threshold: f64) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    for (t, (f, m)) in frames.iter().zip(masks).enumerate() {
        let plane = m.numel();
        let mut out = f.clone();
        let d = out.data_mut();
        for (i, &p) in m.data().iter().enumerate() {
            if p >= threshold {
                d[i] = 0.5 * d[i] + 0.5;
                d[plane + i] *= 0.5;
                d[2 * plane + i] *= 0.5;
            }
        }
        write_rgb(&dir.join(crate::dataset::frame_file(t)), &out)?;
    }
    Ok(())
}

const CSV_HEADER: [&str; 9] = ["sequence", "frames", "j_mean", "f_mean", "jf_mean", "mae", "f_max", "e_max", "s_measure"];

/// Writes `<stem>.json` (the full report) and `<stem>.csv` (one row per
/// sequence plus a `mean` row).
pub fn write_report(dir: &Path, stem: &str, report: &MetricReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(report).map_err(Error::json(&json_path))?;
    fs::write(&json_path, text).map_err(Error::io(&json_path))?;

    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(Error::csv(&csv_path))?;
    w.write_record(CSV_HEADER).map_err(Error::csv(&csv_path))?;
    let fmt = |v: f64| format!("{v}");
    for s in &report.sequences {
        w.write_record([
            s.name.clone(),
            s.frames.to_string(),
            fmt(s.j_mean),
            fmt(s.f_mean),
            fmt(s.jf_mean),
            fmt(s.mae),
            fmt(s.f_max),
            fmt(s.e_max),
            fmt(s.s_measure),
        ])
        .map_err(Error::csv(&csv_path))?;
    }
    let frames: usize = report.sequences.iter().map(|s| s.frames).sum();
    w.write_record([
        "mean".to_string(),
        frames.to_string(),
        fmt(report.j_mean),
        fmt(report.f_mean),
        fmt(report.jf_mean),
        fmt(report.mae),
        fmt(report.f_max),
        fmt(report.e_max),
        fmt(report.s_measure),
    ])
    .map_err(Error::csv(&csv_path))?;
    w.flush().map_err(Error::io(&csv_path))
}
