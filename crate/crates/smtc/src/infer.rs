//! Per-frame inference writing saliency, mask and refinement-weight PNGs.

use std::fs;
use std::path::{Path, PathBuf};

use smtc_core::model::{predict_two_round, Model};
use smtc_core::numerics::Graph;
use smtc_core::Tensor;

use crate::dataset::{frame_file, load_inputs, MASKS_DIR};
use crate::error::{Error, Result};
use crate::image_io::write_gray;

pub const SALIENCY_DIR: &str = "saliency";
pub const WEIGHT_O_DIR: &str = "isrm_w_o";
pub const WEIGHT_I_DIR: &str = "isrm_w_i";

/// Nearest-neighbour enlargement of a `[.., h, w]` map to `[H, W]`.
fn upsample_nearest(map: &Tensor<f64>, h: usize, w: usize) -> Result<Tensor<f64>> {
    let s = map.shape();
    let (mh, mw) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = map.data()[(y * mh / h) * mw + x * mw / w];
        }
    }
    Ok(Tensor::new(&[h, w], out)?)
}

/// Writes `saliency/` (round one) and `masks/` (round two) for every frame
/// and, with `dump_isrm`, the two refinement weight maps upsampled to the
/// frame size. Returns the written paths in order.
pub fn infer(model: &Model<f32>, frames_dir: &Path, flows_dir: &Path, out_dir: &Path, dump_isrm: bool) -> Result<Vec<PathBuf>> {
    if dump_isrm && model.net.isrm.is_none() {
        return Err(smtc_core::Error::Config("--dump-isrm needs a model with the refinement module".into()).into());
    }
    let (frames, flows) = load_inputs(frames_dir, flows_dir)?;
    let mut dirs = vec![SALIENCY_DIR, MASKS_DIR];
    if dump_isrm {
        dirs.extend([WEIGHT_O_DIR, WEIGHT_I_DIR]);
    }
    for d in &dirs {
        let p = out_dir.join(d);
        fs::create_dir_all(&p).map_err(Error::io(&p))?;
    }
    let mut written = vec![];
    for (t, (f, o)) in frames.iter().zip(&flows).enumerate() {
        let (h, w) = (f.shape()[1], f.shape()[2]);
        let mut g = Graph::<f32>::new();
        let img = g.input(f.cast::<f32>().reshape(&[1, 3, h, w])?);
        let flow = g.input(o.cast::<f32>().reshape(&[1, 3, h, w])?);
        let out = predict_two_round(&mut g, &model.store, &model.net, img, flow)?;
        let mut maps = vec![
            g.value(out.round1.prob).cast::<f64>(),
            g.value(out.round2.prob).cast::<f64>(),
        ];
        if let (true, Some(st)) = (dump_isrm, out.isrm) {
            maps.push(upsample_nearest(&g.value(st.w_o).cast(), h, w)?);
            maps.push(upsample_nearest(&g.value(st.w_i).cast(), h, w)?);
        }
        for (d, m) in dirs.iter().zip(&maps) {
            let p = out_dir.join(d).join(frame_file(t));
            write_gray(&p, m)?;
            written.push(p);
        }
    }
    Ok(written)
}
