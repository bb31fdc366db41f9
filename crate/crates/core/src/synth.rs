//! Deterministic moving-shape videos with exact masks and flow.
//!
//! A scene is a value-noise background that may drift, plus foreground
//! shapes that translate and scale along straight paths. Flow for frame `t`
//! is the displacement of the content visible at each pixel from `t` to
//! `t + 1`; one extra frame is simulated so every returned frame has a flow.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::{SeededRng, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Polygon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Normal,
    StationaryObject,
    MotionBlur,
    ComovingBackground,
    BackgroundMover,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Normal,
        Scenario::StationaryObject,
        Scenario::MotionBlur,
        Scenario::ComovingBackground,
        Scenario::BackgroundMover,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Normal => "normal",
            Scenario::StationaryObject => "stationary_object",
            Scenario::MotionBlur => "motion_blur",
            Scenario::ComovingBackground => "comoving_background",
            Scenario::BackgroundMover => "background_mover",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Centre `(x, y)` at frame 0, in pixels.
    pub start: [f64; 2],
    /// Displacement per frame.
    pub velocity: [f64; 2],
    /// Radius or half-extent at frame 0.
    pub size: f64,
    /// Size at frame `t` is `size·(1 + scale_rate·t)`.
    pub scale_rate: f64,
    pub color: [f64; 3],
    /// Aspect ratio for rectangles (half-height over half-width).
    pub aspect: f64,
    /// Vertex radii (fractions of `size`) for polygons, evenly spaced in
    /// angle.
    pub vertices: Vec<f64>,
    /// Included in the ground-truth mask.
    pub foreground: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub texture_seed: u64,
    /// Displacement of the whole background per frame.
    pub drift: [f64; 2],
    pub contrast: f64,
    pub tint: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Drawn in order; later shapes occlude earlier ones.
    pub shapes: Vec<ShapeSpec>,
    pub background: BackgroundSpec,
    pub scenario: Scenario,
    /// Sub-frame samples averaged per frame; 1 disables blur.
    pub blur_samples: usize,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::config(format!(
                "scene {}x{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        if self.frames < 2 {
            return Err(Error::config("scene needs at least two frames"));
        }
        if self.blur_samples == 0 {
            return Err(Error::config("blur_samples must be at least 1"));
        }
        for s in &self.shapes {
            if !(s.size > 0.0) || !(s.aspect > 0.0) {
                return Err(Error::config("shape size and aspect must be positive"));
            }
            if s.kind == ShapeKind::Polygon && s.vertices.len() < 3 {
                return Err(Error::config("polygon needs at least three vertices"));
            }
        }
        Ok(())
    }

    /// Random scene of the given scenario.
    pub fn random(scenario: Scenario, height: usize, width: usize, frames: usize, seed: u64) -> Self {
        let mut rng = SeededRng::stream(seed, 1);
        let dim = height.min(width) as f64;
        let unit = dim / 128.0;
        let shape = |rng: &mut SeededRng, speed: (f64, f64), foreground: bool| {
            let kind = [ShapeKind::Circle, ShapeKind::Rectangle, ShapeKind::Polygon][rng.below(3)];
            let angle = rng.range(0.0, core::f64::consts::TAU);
            let speed = rng.range(speed.0, speed.1) * unit;
            let hue = rng.uniform();
            let vertices = (0..5 + rng.below(3)).map(|_| rng.range(0.75, 1.0)).collect();
            ShapeSpec {
                kind,
                start: [
                    rng.range(0.35, 0.65) * width as f64,
                    rng.range(0.35, 0.65) * height as f64,
                ],
                velocity: [speed * libm::cos(angle), speed * libm::sin(angle)],
                size: rng.range(0.12, 0.2) * dim,
                scale_rate: 0.0,
                color: saturated(hue),
                aspect: rng.range(0.6, 1.0),
                vertices,
                foreground,
            }
        };
        let mut shapes = Vec::new();
        let mut drift = [0.0, 0.0];
        let mut blur_samples = 1;
        match scenario {
            Scenario::Normal => {
                let mut s = shape(&mut rng, (1.0, 2.5), true);
                s.scale_rate = rng.range(-0.02, 0.03);
                shapes.push(s);
            }
            Scenario::StationaryObject => {
                let s = shape(&mut rng, (0.0, 0.0), true);
                shapes.push(s);
                drift = [rng.range(-1.0, 1.0) * unit, rng.range(-1.0, 1.0) * unit];
            }
            Scenario::MotionBlur => {
                shapes.push(shape(&mut rng, (3.0, 4.0), true));
                blur_samples = 7;
            }
            Scenario::ComovingBackground => {
                let s = shape(&mut rng, (1.0, 2.0), true);
                drift = s.velocity;
                shapes.push(s);
            }
            Scenario::BackgroundMover => {
                let mut d = shape(&mut rng, (2.0, 3.0), false);
                d.size *= 0.7;
                d.start = [
                    rng.range(0.1, 0.3) * width as f64,
                    rng.range(0.1, 0.3) * height as f64,
                ];
                shapes.push(d);
                shapes.push(shape(&mut rng, (0.5, 1.5), true));
            }
        }
        Self {
            height,
            width,
            frames,
            shapes,
            background: BackgroundSpec {
                texture_seed: rng.next_u64(),
                drift,
                contrast: 0.25,
                tint: [rng.range(0.4, 0.6), rng.range(0.4, 0.6), rng.range(0.4, 0.6)],
            },
            scenario,
            blur_samples,
        }
    }
}

/// Full-saturation colour on the hue circle.
fn saturated(hue: f64) -> [f64; 3] {
    let h = (hue - libm::floor(hue)) * 6.0;
    let f = h - libm::floor(h);
    match h as usize {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

fn hash2(x: i64, y: i64, seed: u64) -> f64 {
    let mut z = seed ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(x: f64, y: f64, cell: f64, seed: u64) -> f64 {
    let (u, v) = (x / cell, y / cell);
    let (x0, y0) = (libm::floor(u), libm::floor(v));
    let (fx, fy) = (u - x0, v - y0);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let a = hash2(ix, iy, seed);
    let b = hash2(ix + 1, iy, seed);
    let c = hash2(ix, iy + 1, seed);
    let d = hash2(ix + 1, iy + 1, seed);
    let top = a + (b - a) * sx;
    let bot = c + (d - c) * sx;
    top + (bot - top) * sy
}

impl ShapeSpec {
    fn center(&self, t: f64) -> [f64; 2] {
        [self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t]
    }

    fn scale(&self, t: f64) -> f64 {
        (1.0 + self.scale_rate * t).max(0.05)
    }

    /// Position of `(x, y)` in shape-local units at time `t`.
    fn local(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let c = self.center(t);
        let r = self.size * self.scale(t);
        [(x - c[0]) / r, (y - c[1]) / r]
    }

    fn contains_local(&self, p: [f64; 2]) -> bool {
        match self.kind {
            ShapeKind::Circle => p[0] * p[0] + p[1] * p[1] <= 1.0,
            ShapeKind::Rectangle => libm::fabs(p[0]) <= 1.0 && libm::fabs(p[1]) <= self.aspect,
            ShapeKind::Polygon => {
                let n = self.vertices.len();
                let vert = |i: usize| {
                    let a = core::f64::consts::TAU * i as f64 / n as f64;
                    [self.vertices[i] * libm::cos(a), self.vertices[i] * libm::sin(a)]
                };
                (0..n).all(|i| {
                    let (a, b) = (vert(i), vert((i + 1) % n));
                    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
                })
            }
        }
    }

    fn contains(&self, x: f64, y: f64, t: f64) -> bool {
        self.contains_local(self.local(x, y, t))
    }

    /// Displacement from `t` to `t + 1` of the surface point under `(x, y)`.
    fn displacement(&self, x: f64, y: f64, t: f64) -> [f64; 2] {
        let c = self.center(t);
        let k = self.scale(t + 1.0) / self.scale(t) - 1.0;
        [
            self.velocity[0] + (x - c[0]) * k,
            self.velocity[1] + (y - c[1]) * k,
        ]
    }

    fn shade(&self, x: f64, y: f64, t: f64, seed: u64) -> [f64; 3] {
        let p = self.local(x, y, t);
        let n = value_noise(p[0] * 8.0, p[1] * 8.0, 1.0, seed ^ 0x5EED);
        let m = 0.85 + 0.15 * n;
        [self.color[0] * m, self.color[1] * m, self.color[2] * m]
    }
}

impl BackgroundSpec {
    fn color(&self, x: f64, y: f64, t: f64) -> [f64; 3] {
        let (u, v) = (x - self.drift[0] * t, y - self.drift[1] * t);
        let n = 0.6 * value_noise(u, v, 16.0, self.texture_seed) + 0.4 * value_noise(u, v, 5.0, self.texture_seed ^ 1);
        let d = self.contrast * (n - 0.5);
        [
            (self.tint[0] + d).clamp(0.0, 1.0),
            (self.tint[1] + d).clamp(0.0, 1.0),
            (self.tint[2] + d).clamp(0.0, 1.0),
        ]
    }
}

/// One generated sequence of `T` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub frames: Vec<Tensor<f64>>,
    /// `[2, H, W]` displacement `(dx, dy)` from frame `t` to `t + 1`.
    pub flow_fields: Vec<Tensor<f64>>,
    /// `[3, H, W]` colour-wheel renderings of `flow_fields`.
    pub flow_rgb: Vec<Tensor<f64>>,
    /// `[H, W]` binary union of the foreground shapes.
    pub masks: Vec<Tensor<f64>>,
    /// Normalizing magnitude used for each flow rendering.
    pub flow_max: Vec<f64>,
    pub tags: Vec<Scenario>,
}

fn render_frame(cfg: &SceneConfig, t: f64, seed: u64) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c = cfg.background.color(px, py, t);
            for s in &cfg.shapes {
                if s.contains(px, py, t) {
                    c = s.shade(px, py, t, seed);
                }
            }
            for ch in 0..3 {
                out[(ch * h + y) * w + x] = c[ch];
            }
        }
    }
    out
}

pub fn generate_sequence(cfg: &SceneConfig, seed: u64) -> Result<VideoSample> {
    cfg.validate()?;
    let (h, w, n) = (cfg.height, cfg.width, cfg.frames);
    let mut sample = VideoSample {
        frames: Vec::with_capacity(n),
        flow_fields: Vec::with_capacity(n),
        flow_rgb: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        flow_max: Vec::with_capacity(n),
        tags: vec![cfg.scenario; n],
    };
    for ti in 0..n {
        let t = ti as f64;
        let frame = if cfg.blur_samples > 1 {
            let k = cfg.blur_samples;
            let mut acc = vec![0.0; 3 * h * w];
            for j in 0..k {
                let dt = j as f64 / (k - 1) as f64 - 0.5;
                for (a, v) in acc.iter_mut().zip(render_frame(cfg, t + dt, seed)) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|v| *v /= k as f64);
            acc
        } else {
            render_frame(cfg, t, seed)
        };
        let mut mask = vec![0.0; h * w];
        let mut flow = vec![0.0; 2 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut d = cfg.background.drift;
                let mut fg = false;
                for s in &cfg.shapes {
                    if s.contains(px, py, t) {
                        d = s.displacement(px, py, t);
                        fg = s.foreground;
                    }
                }
                if fg {
                    mask[y * w + x] = 1.0;
                }
                flow[y * w + x] = d[0];
                flow[h * w + y * w + x] = d[1];
            }
        }
        let flow = Tensor::new(&[2, h, w], flow)?;
        let (rgb, max) = flow_to_rgb_with_max(&flow, None)?;
        sample.frames.push(Tensor::new(&[3, h, w], frame)?);
        sample.flow_fields.push(flow);
        sample.flow_rgb.push(rgb);
        sample.masks.push(Tensor::new(&[h, w], mask)?);
        sample.flow_max.push(max);
    }
    Ok(sample)
}

const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;
pub const WHEEL_SIZE: usize = RY + YG + GC + CB + BM + MR;

/// Middlebury colour wheel, 0–255 per channel.
pub fn color_wheel() -> [[f64; 3]; WHEEL_SIZE] {
    let mut wheel = [[0.0; 3]; WHEEL_SIZE];
    let ramp = |i: usize, n: usize| libm::floor(255.0 * i as f64 / n as f64);
    let mut col = 0;
    for i in 0..RY {
        wheel[col + i] = [255.0, ramp(i, RY), 0.0];
    }
    col += RY;
    for i in 0..YG {
        wheel[col + i] = [255.0 - ramp(i, YG), 255.0, 0.0];
    }
    col += YG;
    for i in 0..GC {
        wheel[col + i] = [0.0, 255.0, ramp(i, GC)];
    }
    col += GC;
    for i in 0..CB {
        wheel[col + i] = [0.0, 255.0 - ramp(i, CB), 255.0];
    }
    col += CB;
    for i in 0..BM {
        wheel[col + i] = [ramp(i, BM), 0.0, 255.0];
    }
    col += BM;
    for i in 0..MR {
        wheel[col + i] = [255.0, 0.0, 255.0 - ramp(i, MR)];
    }
    wheel
}

/// Colour of a normalized flow vector; unit magnitude sits on the wheel rim
/// and zero is white. Magnitudes above one are darkened.
pub fn flow_color(u: f64, v: f64, wheel: &[[f64; 3]; WHEEL_SIZE]) -> [f64; 3] {
    let rad = libm::sqrt(u * u + v * v);
    let a = libm::atan2(-v, -u) / core::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (WHEEL_SIZE - 1) as f64;
    let k0 = (libm::floor(fk) as usize).min(WHEEL_SIZE - 1);
    let k1 = if k0 + 1 == WHEEL_SIZE { 0 } else { k0 + 1 };
    let f = fk - k0 as f64;
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let c = (1.0 - f) * wheel[k0][i] / 255.0 + f * wheel[k1][i] / 255.0;
        *o = if rad <= 1.0 { 1.0 - rad * (1.0 - c) } else { c * 0.75 };
    }
    out
}

/// Renders `[2, H, W]` flow to `[3, H, W]` RGB in `[0, 1]`, normalizing by
/// `max_magnitude` or by the field's largest magnitude.
pub fn flow_to_rgb(flow: &Tensor<f64>, max_magnitude: Option<f64>) -> Result<Tensor<f64>> {
    flow_to_rgb_with_max(flow, max_magnitude).map(|(t, _)| t)
}

/// As [`flow_to_rgb`], also returning the magnitude used.
pub fn flow_to_rgb_with_max(flow: &Tensor<f64>, max_magnitude: Option<f64>) -> Result<(Tensor<f64>, f64)> {
    let s = flow.shape();
    if s.len() != 3 || s[0] != 2 {
        return Err(Error::dim("flow_to_rgb", s, &[2, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let (us, vs) = flow.data().split_at(n);
    let max = max_magnitude.unwrap_or_else(|| {
        us.iter()
            .zip(vs)
            .map(|(u, v)| libm::sqrt(u * u + v * v))
            .fold(0.0, f64::max)
    });
    let wheel = color_wheel();
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let (u, v) = if max > 0.0 { (us[i] / max, vs[i] / max) } else { (0.0, 0.0) };
        let c = flow_color(u, v, &wheel);
        for ch in 0..3 {
            out[ch * n + i] = c[ch];
        }
    }
    Ok((Tensor::new(&[3, h, w], out)?, max))
}
