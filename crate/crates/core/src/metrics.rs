//! Segmentation and saliency scores on single-channel `[H, W]` maps.
//!
//! Degenerate conventions: for J and boundary F two empty masks score 1
//! and exactly one empty mask scores 0.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLDS: usize = 256;
pub const DEFAULT_BETA_SQ: f64 = 0.3;
pub const DEFAULT_S_ALPHA: f64 = 0.5;
const EPS: f64 = f64::EPSILON;

fn dims(t: &Tensor<f64>) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::dim("metric map", t.shape(), &[0, 0])),
    }
}

fn pair_dims(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<(usize, usize)> {
    let d = dims(pred)?;
    if pred.shape() != gt.shape() {
        return Err(Error::dim("metric pair", pred.shape(), gt.shape()));
    }
    Ok(d)
}

fn check_binary(t: &Tensor<f64>, what: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("{what} must be binary, found {v}")));
    }
    Ok(())
}

/// `1` where `pred ≥ threshold`.
pub fn binarize(pred: &Tensor<f64>, threshold: f64) -> Tensor<f64> {
    pred.map(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// Intersection over union.
pub fn region_similarity(pred_bin: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    pair_dims(pred_bin, gt)?;
    check_binary(pred_bin, "prediction")?;
    check_binary(gt, "ground truth")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred_bin.data().iter().zip(gt.data()) {
        let (p, g) = (p == 1.0, g == 1.0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `⌈0.008·√(H²+W²)⌉`.
pub fn default_tolerance(h: usize, w: usize) -> usize {
    libm::ceil(0.008 * libm::sqrt((h * h + w * w) as f64)) as usize
}

/// Foreground pixels with at least one 4-neighbour outside the mask; the
/// image exterior counts as background.
pub fn boundary_map(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if at(y, x) && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

fn dilate(map: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !map[y * w + x] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// F1 of boundary pixels matched within a Euclidean disk of `tol_radius`.
pub fn boundary_f_measure(pred_bin: &Tensor<f64>, gt: &Tensor<f64>, tol_radius: usize) -> Result<f64> {
    let (h, w) = pair_dims(pred_bin, gt)?;
    check_binary(pred_bin, "prediction")?;
    check_binary(gt, "ground truth")?;
    let pm: Vec<bool> = pred_bin.data().iter().map(|&v| v == 1.0).collect();
    let gm: Vec<bool> = gt.data().iter().map(|&v| v == 1.0).collect();
    let pb = boundary_map(&pm, h, w);
    let gb = boundary_map(&gm, h, w);
    let (np, ng) = (pb.iter().filter(|&&b| b).count(), gb.iter().filter(|&&b| b).count());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let gd = dilate(&gb, h, w, tol_radius);
    let pd = dilate(&pb, h, w, tol_radius);
    let hit_p = pb.iter().zip(&gd).filter(|(&b, &d)| b && d).count();
    let hit_g = gb.iter().zip(&pd).filter(|(&b, &d)| b && d).count();
    let precision = hit_p as f64 / np as f64;
    let recall = hit_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Mean absolute error.
pub fn mae(pred: &Tensor<f64>, gt: &Tensor<f64>) -> Result<f64> {
    pair_dims(pred, gt)?;
    let n = pred.numel().max(1) as f64;
    Ok(pred.data().iter().zip(gt.data()).map(|(p, g)| libm::fabs(p - g)).sum::<f64>() / n)
}

/// Per threshold `k/n`, the number of foreground-gt and background-gt
/// pixels with `pred ≥ k/n`.
fn threshold_counts(pred: &Tensor<f64>, gt: &Tensor<f64>, n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut fg = vec![0usize; n + 1];
    let mut bg = vec![0usize; n + 1];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        // largest k < n with k/n ≤ p
        let mut k = libm::floor(p * n as f64).clamp(-1.0, n as f64) as isize;
        while k >= 0 && p < k as f64 / n as f64 {
            k -= 1;
        }
        while ((k + 1) as usize) < n && p >= (k + 1) as f64 / n as f64 {
            k += 1;
        }
        if k < 0 {
            continue;
        }
        let k = (k as usize).min(n - 1);
        if g == 1.0 {
            fg[k] += 1;
        } else {
            bg[k] += 1;
        }
    }
    // suffix sums: count of pixels whose highest passed threshold is ≥ k
    for k in (0..n).rev() {
        fg[k] += fg[k + 1];
        bg[k] += bg[k + 1];
    }
    fg.truncate(n);
    bg.truncate(n);
    (fg, bg)
}

/// Maximum `F_β` over thresholds `k/n`, `k = 0..n`.
pub fn max_f_measure(pred: &Tensor<f64>, gt: &Tensor<f64>, beta_sq: f64, thresholds: usize) -> Result<f64> {
    pair_dims(pred, gt)?;
    check_binary(gt, "ground truth")?;
    if thresholds == 0 {
        return Err(Error::config("need at least one threshold"));
    }
    let positives = gt.data().iter().filter(|&&g| g == 1.0).count();
    let (fg, bg) = threshold_counts(pred, gt, thresholds);
    let mut best = 0.0f64;
    for k in 0..thresholds {
        let tp = fg[k];
        let predicted = fg[k] + bg[k];
        if predicted == 0 || positives == 0 || tp == 0 {
            continue;
        }
        let p = tp as f64 / predicted as f64;
        let r = tp as f64 / positives as f64;
        best = best.max((1.0 + beta_sq) * p * r / (beta_sq * p + r));
    }
    Ok(best)
}

/// Maximum enhanced-alignment score over thresholds `k/n`.
pub fn e_measure(pred: &Tensor<f64>, gt: &Tensor<f64>, thresholds: usize) -> Result<f64> {
    pair_dims(pred, gt)?;
    check_binary(gt, "ground truth")?;
    if thresholds == 0 {
        return Err(Error::config("need at least one threshold"));
    }
    let n = pred.numel();
    if n == 0 {
        return Ok(1.0);
    }
    let nf = n as f64;
    let positives = gt.data().iter().filter(|&&g| g == 1.0).count();
    let (fg, bg) = threshold_counts(pred, gt, thresholds);
    let mut best = 0.0f64;
    for k in 0..thresholds {
        let (tp, fp) = (fg[k], bg[k]);
        let on = tp + fp;
        let score = if positives == 0 {
            (n - on) as f64 / nf
        } else if positives == n {
            on as f64 / nf
        } else {
            let mf = on as f64 / nf;
            let mg = positives as f64 / nf;
            // (fm, gt) ∈ {1,0}² with their pixel counts
            let cases = [
                (1.0, 1.0, tp),
                (1.0, 0.0, fp),
                (0.0, 1.0, positives - tp),
                (0.0, 0.0, n - positives - fp),
            ];
            let mut total = 0.0;
            for (a, b, count) in cases {
                if count == 0 {
                    continue;
                }
                let (da, db) = (a - mf, b - mg);
                let align = 2.0 * da * db / (da * da + db * db + EPS);
                let enhanced = (1.0 + align) * (1.0 + align) / 4.0;
                total += enhanced * count as f64;
            }
            total / nf
        };
        best = best.max(score);
    }
    Ok(best)
}

fn mean_std(vals: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let (sum, n) = vals.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let m = sum / n as f64;
    let ss: f64 = vals.map(|v| (v - m) * (v - m)).sum();
    (m, libm::sqrt(ss / (n as f64 - 1.0 + EPS)), n)
}

fn object_similarity(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma, n) = mean_std(vals);
    if n == 0 {
        return 0.0;
    }
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

/// SSIM-style similarity of one rectangular block.
#[allow(clippy::too_many_arguments)]
fn block_ssim(pred: &[f64], gt: &[f64], w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> f64 {
    let n = (y1 - y0) * (x1 - x0);
    if n == 0 {
        return 0.0;
    }
    let idx = || (y0..y1).flat_map(move |y| (x0..x1).map(move |x| y * w + x));
    let nf = n as f64;
    let mx = idx().map(|i| pred[i]).sum::<f64>() / nf;
    let my = idx().map(|i| gt[i]).sum::<f64>() / nf;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    for i in idx() {
        let (dx, dy) = (pred[i] - mx, gt[i] - my);
        sx += dx * dx;
        sy += dy * dy;
        sxy += dx * dy;
    }
    let denom = nf - 1.0 + EPS;
    let (sx, sy, sxy) = (sx / denom, sy / denom, sxy / denom);
    let a = 4.0 * mx * my * sxy;
    let b = (mx * mx + my * my) * (sx + sy);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point `(x, y)` of the region term: the rounded foreground centroid
/// plus one, or the rounded centre for an empty mask.
pub fn centroid_split(gt: &[f64], h: usize, w: usize) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if gt[y * w + x] == 1.0 {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        (libm::rint(w as f64 / 2.0) as usize, libm::rint(h as f64 / 2.0) as usize)
    } else {
        (
            libm::rint(sx / n as f64) as usize + 1,
            libm::rint(sy / n as f64) as usize + 1,
        )
    }
}

/// Structure measure `α·S_object + (1−α)·S_region`, clamped to `[0, 1]`.
pub fn s_measure(pred: &Tensor<f64>, gt: &Tensor<f64>, alpha: f64) -> Result<f64> {
    let (h, w) = pair_dims(pred, gt)?;
    check_binary(gt, "ground truth")?;
    let n = (h * w) as f64;
    if h * w == 0 {
        return Ok(1.0);
    }
    let (p, g) = (pred.data(), gt.data());
    let mean_gt = g.iter().sum::<f64>() / n;
    let score = if mean_gt == 0.0 {
        1.0 - p.iter().sum::<f64>() / n
    } else if mean_gt == 1.0 {
        p.iter().sum::<f64>() / n
    } else {
        let fg = object_similarity(p.iter().zip(g).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p));
        let bg = object_similarity(p.iter().zip(g).filter(|(_, &g)| g == 0.0).map(|(&p, _)| 1.0 - p));
        let object = mean_gt * fg + (1.0 - mean_gt) * bg;

        let (cx, cy) = centroid_split(g, h, w);
        let (cx, cy) = (cx.min(w), cy.min(h));
        let area = n;
        let w1 = (cx * cy) as f64 / area;
        let w2 = ((w - cx) * cy) as f64 / area;
        let w3 = (cx * (h - cy)) as f64 / area;
        let w4 = 1.0 - w1 - w2 - w3;
        let region = w1 * block_ssim(p, g, w, 0, cy, 0, cx)
            + w2 * block_ssim(p, g, w, 0, cy, cx, w)
            + w3 * block_ssim(p, g, w, cy, h, 0, cx)
            + w4 * block_ssim(p, g, w, cy, h, cx, w);
        alpha * object + (1.0 - alpha) * region
    };
    Ok(score.clamp(0.0, 1.0))
}

/// Scores of one sequence, averaged over its frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub name: String,
    pub frames: usize,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub mae: f64,
    pub f_max: f64,
    pub e_max: f64,
    pub s_measure: f64,
}

/// Means over sequences, plus the per-sequence rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
    pub mae: f64,
    pub f_max: f64,
    pub e_max: f64,
    pub s_measure: f64,
    pub sequences: Vec<SequenceMetrics>,
    /// Sequences that could not be scored, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl MetricReport {
    pub fn from_sequences(sequences: Vec<SequenceMetrics>, skipped: Vec<(String, String)>) -> Self {
        let n = sequences.len().max(1) as f64;
        let avg = |f: fn(&SequenceMetrics) -> f64| sequences.iter().map(f).sum::<f64>() / n;
        let j_mean = avg(|s| s.j_mean);
        let f_mean = avg(|s| s.f_mean);
        Self {
            j_mean,
            f_mean,
            jf_mean: (j_mean + f_mean) / 2.0,
            mae: avg(|s| s.mae),
            f_max: avg(|s| s.f_max),
            e_max: avg(|s| s.e_max),
            s_measure: avg(|s| s.s_measure),
            sequences,
            skipped,
        }
    }
}

/// Scores aligned prediction and ground-truth frames. Ground-truth labels
/// are merged into one foreground (any nonzero value).
pub fn evaluate_sequence(
    name: &str,
    preds: &[Tensor<f64>],
    gts: &[Tensor<f64>],
    binarize_threshold: f64,
) -> Result<SequenceMetrics> {
    if preds.len() != gts.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    let n = preds.len().max(1) as f64;
    let mut acc = [0.0f64; 6];
    for (p, g) in preds.iter().zip(gts) {
        let g = g.map(|v| if v != 0.0 { 1.0 } else { 0.0 });
        let (h, w) = pair_dims(p, &g)?;
        let pb = binarize(p, binarize_threshold);
        let vals = [
            region_similarity(&pb, &g)?,
            boundary_f_measure(&pb, &g, default_tolerance(h, w))?,
            mae(p, &g)?,
            max_f_measure(p, &g, DEFAULT_BETA_SQ, DEFAULT_THRESHOLDS)?,
            e_measure(p, &g, DEFAULT_THRESHOLDS)?,
            s_measure(p, &g, DEFAULT_S_ALPHA)?,
        ];
        for (a, v) in acc.iter_mut().zip(vals) {
            *a += v;
        }
    }
    let [j, f, m, fm, em, sm] = acc.map(|v| v / n);
    Ok(SequenceMetrics {
        name: String::from(name),
        frames: preds.len(),
        j_mean: j,
        f_mean: f,
        jf_mean: (j + f) / 2.0,
        mae: m,
        f_max: fm,
        e_max: em,
        s_measure: sm,
    })
}
