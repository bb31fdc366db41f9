//! Slow reference implementations of the segmentation and saliency scores,
//! written pixel by pixel from their textbook definitions. Maps are
//! row-major `h × w` slices; ground truth is 0/1.
#![allow(dead_code)]

use smtc_core::numerics::SeededRng;

pub const EPS: f64 = f64::EPSILON;

pub fn jaccard(pred: &[f64], gt: &[f64]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..pred.len() {
        if pred[i] == 1.0 && gt[i] == 1.0 {
            inter += 1;
        }
        if pred[i] == 1.0 || gt[i] == 1.0 {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn mae(pred: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - gt[i]).abs();
    }
    s / pred.len() as f64
}

fn inside(mask: &[f64], h: usize, w: usize, y: isize, x: isize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] == 1.0
}

/// Mask minus its 4-neighbour erosion, with everything outside the frame
/// treated as background.
pub fn contour(mask: &[f64], h: usize, w: usize) -> Vec<(isize, isize)> {
    let mut out = vec![];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let eroded = inside(mask, h, w, y, x)
                && inside(mask, h, w, y - 1, x)
                && inside(mask, h, w, y + 1, x)
                && inside(mask, h, w, y, x - 1)
                && inside(mask, h, w, y, x + 1);
            if inside(mask, h, w, y, x) && !eroded {
                out.push((y, x));
            }
        }
    }
    out
}

fn matched(from: &[(isize, isize)], to: &[(isize, isize)], tol: usize) -> usize {
    let r2 = (tol * tol) as isize;
    from.iter()
        .filter(|&&(y, x)| to.iter().any(|&(v, u)| (y - v) * (y - v) + (x - u) * (x - u) <= r2))
        .count()
}

pub fn boundary_f(pred: &[f64], gt: &[f64], h: usize, w: usize, tol: usize) -> f64 {
    let (pc, gc) = (contour(pred, h, w), contour(gt, h, w));
    if pc.is_empty() && gc.is_empty() {
        return 1.0;
    }
    if pc.is_empty() || gc.is_empty() {
        return 0.0;
    }
    let precision = matched(&pc, &gc, tol) as f64 / pc.len() as f64;
    let recall = matched(&gc, &pc, tol) as f64 / gc.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn max_f(pred: &[f64], gt: &[f64], beta_sq: f64, thresholds: usize) -> f64 {
    let mut best = 0.0f64;
    for k in 0..thresholds {
        let th = k as f64 / thresholds as f64;
        let (mut tp, mut predicted, mut positives) = (0.0, 0.0, 0.0);
        for i in 0..pred.len() {
            let on = pred[i] >= th;
            if on {
                predicted += 1.0;
            }
            if gt[i] == 1.0 {
                positives += 1.0;
                if on {
                    tp += 1.0;
                }
            }
        }
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if positives > 0.0 { tp / positives } else { 0.0 };
        let f = if p + r > 0.0 { (1.0 + beta_sq) * p * r / (beta_sq * p + r) } else { 0.0 };
        best = best.max(f);
    }
    best
}

pub fn e_measure(pred: &[f64], gt: &[f64], thresholds: usize) -> f64 {
    let n = pred.len() as f64;
    let gt_sum: f64 = gt.iter().sum();
    let mut best = 0.0f64;
    for k in 0..thresholds {
        let th = k as f64 / thresholds as f64;
        let fm: Vec<f64> = pred.iter().map(|&p| if p >= th { 1.0 } else { 0.0 }).collect();
        let mut enhanced = vec![0.0; pred.len()];
        if gt_sum == 0.0 {
            for i in 0..fm.len() {
                enhanced[i] = 1.0 - fm[i];
            }
        } else if gt_sum == n {
            enhanced.copy_from_slice(&fm);
        } else {
            let mf = fm.iter().sum::<f64>() / n;
            let mg = gt_sum / n;
            for i in 0..fm.len() {
                let a = fm[i] - mf;
                let b = gt[i] - mg;
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                enhanced[i] = (align + 1.0) * (align + 1.0) / 4.0;
            }
        }
        best = best.max(enhanced.iter().sum::<f64>() / n);
    }
    best
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; a single sample has deviation 0.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

fn object(pred: &[f64], mask: &[bool]) -> f64 {
    let vals: Vec<f64> = pred.iter().zip(mask).filter(|(_, &m)| m).map(|(&p, _)| p).collect();
    if vals.is_empty() {
        return 0.0;
    }
    let x = mean(&vals);
    2.0 * x / (x * x + 1.0 + std_dev(&vals) + EPS)
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let n = pred.len() as f64;
    let x = mean(pred);
    let y = mean(gt);
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for i in 0..pred.len() {
        sx += (pred[i] - x) * (pred[i] - x);
        sy += (gt[i] - y) * (gt[i] - y);
        sxy += (pred[i] - x) * (gt[i] - y);
    }
    sx /= n - 1.0 + EPS;
    sy /= n - 1.0 + EPS;
    sxy /= n - 1.0 + EPS;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn block(m: &[f64], w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = vec![];
    for y in rows {
        for x in cols.clone() {
            out.push(m[y * w + x]);
        }
    }
    out
}

pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize, alpha: f64) -> f64 {
    let y = mean(gt);
    let q = if y == 0.0 {
        1.0 - mean(pred)
    } else if y == 1.0 {
        mean(pred)
    } else {
        let fg_mask: Vec<bool> = gt.iter().map(|&g| g == 1.0).collect();
        let bg_mask: Vec<bool> = fg_mask.iter().map(|m| !m).collect();
        let fg: Vec<f64> = pred.iter().zip(&fg_mask).map(|(&p, &m)| if m { p } else { 0.0 }).collect();
        let bg: Vec<f64> = pred.iter().zip(&fg_mask).map(|(&p, &m)| if m { 0.0 } else { 1.0 - p }).collect();
        let s_object = y * object(&fg, &fg_mask) + (1.0 - y) * object(&bg, &bg_mask);

        // one-based centroid, rounded half to even
        let (mut sx, mut sy, mut total) = (0.0, 0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                if gt[r * w + c] == 1.0 {
                    sx += (c + 1) as f64;
                    sy += (r + 1) as f64;
                    total += 1.0;
                }
            }
        }
        let cx = ((sx / total - 1.0).round_ties_even() + 1.0) as usize;
        let cy = ((sy / total - 1.0).round_ties_even() + 1.0) as usize;
        let area = (h * w) as f64;
        let w1 = (cx * cy) as f64 / area;
        let w2 = ((w - cx) * cy) as f64 / area;
        let w3 = (cx * (h - cy)) as f64 / area;
        let w4 = 1.0 - w1 - w2 - w3;
        let quads = [
            (w1, 0..cy, 0..cx),
            (w2, 0..cy, cx..w),
            (w3, cy..h, 0..cx),
            (w4, cy..h, cx..w),
        ];
        let mut s_region = 0.0;
        for (weight, rows, cols) in quads {
            s_region += weight * ssim(&block(pred, w, rows.clone(), cols.clone()), &block(gt, w, rows, cols));
        }
        alpha * s_object + (1.0 - alpha) * s_region
    };
    q.clamp(0.0, 1.0)
}

/// A 32×32-style fixture: a blobby ground truth and a soft prediction
/// loosely following it. Some seeds give empty or full masks.
pub fn random_pair(seed: u64, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = SeededRng::new(seed);
    let mut gt = vec![0.0; h * w];
    match seed % 17 {
        0 => {}
        1 => gt.iter_mut().for_each(|v| *v = 1.0),
        _ => {
            for _ in 0..1 + rng.below(3) {
                let cy = rng.range(0.0, h as f64);
                let cx = rng.range(0.0, w as f64);
                let ry = rng.range(1.5, h as f64 / 3.0);
                let rx = rng.range(1.5, w as f64 / 3.0);
                for y in 0..h {
                    for x in 0..w {
                        let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                        if d <= 1.0 {
                            gt[y * w + x] = 1.0;
                        }
                    }
                }
            }
        }
    }
    let (dy, dx) = (rng.below(5) as isize - 2, rng.below(5) as isize - 2);
    let mix = rng.range(0.3, 0.9);
    let mut pred = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (sy, sx) = (y + dy, x + dx);
            let src = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                gt[sy as usize * w + sx as usize]
            } else {
                0.0
            };
            let v = mix * src + (1.0 - mix) * rng.uniform();
            pred[y as usize * w + x as usize] = v.clamp(0.0, 1.0);
        }
    }
    (pred, gt)
}
