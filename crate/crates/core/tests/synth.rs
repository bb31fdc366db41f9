use proptest::prelude::*;
use smtc_core::numerics::Tensor;
use smtc_core::synth::{
    color_wheel, flow_color, flow_to_rgb, generate_sequence, BackgroundSpec, Scenario, SceneConfig, ShapeKind,
    ShapeSpec, WHEEL_SIZE,
};
use smtc_core::Error;

fn circle_scene(velocity: [f64; 2]) -> SceneConfig {
    SceneConfig {
        height: 64,
        width: 64,
        frames: 4,
        shapes: vec![ShapeSpec {
            kind: ShapeKind::Circle,
            start: [24.0, 30.0],
            velocity,
            size: 9.0,
            scale_rate: 0.0,
            color: [0.9, 0.2, 0.1],
            aspect: 1.0,
            vertices: vec![],
            foreground: true,
        }],
        background: BackgroundSpec {
            texture_seed: 3,
            drift: [0.0, 0.0],
            contrast: 0.25,
            tint: [0.5, 0.5, 0.5],
        },
        scenario: Scenario::Normal,
        blur_samples: 1,
    }
}

fn at(t: &Tensor<f64>, c: usize, y: usize, x: usize) -> f64 {
    let (h, w) = (t.shape()[t.rank() - 2], t.shape()[t.rank() - 1]);
    t.data()[(c * h + y) * w + x]
}

#[test]
fn translating_circle_has_exact_flow_inside_its_mask() {
    let s = generate_sequence(&circle_scene([2.0, 0.0]), 0).unwrap();
    for (m, f) in s.masks.iter().zip(&s.flow_fields) {
        let mut inside = 0;
        for y in 0..64 {
            for x in 0..64 {
                if m.data()[y * 64 + x] == 1.0 {
                    inside += 1;
                    assert_eq!((at(f, 0, y, x), at(f, 1, y, x)), (2.0, 0.0));
                }
            }
        }
        assert!(inside > 100);
    }
}

#[test]
fn generation_is_a_pure_function_of_config_and_seed() {
    for sc in Scenario::ALL {
        let cfg = SceneConfig::random(sc, 64, 64, 3, 9);
        assert_eq!(cfg, SceneConfig::random(sc, 64, 64, 3, 9));
        let a = generate_sequence(&cfg, 4).unwrap();
        let b = generate_sequence(&cfg, 4).unwrap();
        for (x, y) in a.frames.iter().chain(&a.flow_rgb).zip(b.frames.iter().chain(&b.flow_rgb)) {
            assert!(x.bitwise_eq(y));
        }
        assert_eq!(a, b);
    }
}

#[test]
fn sample_invariants_hold_for_every_scenario() {
    for (i, sc) in Scenario::ALL.into_iter().enumerate() {
        let cfg = SceneConfig::random(sc, 64, 96, 5, i as u64);
        let s = generate_sequence(&cfg, 1).unwrap();
        for list in [&s.frames, &s.flow_fields, &s.flow_rgb, &s.masks] {
            assert_eq!(list.len(), 5);
        }
        assert_eq!(s.tags, vec![sc; 5]);
        for t in 0..5 {
            assert_eq!(s.frames[t].shape(), &[3, 64, 96]);
            assert!(s.frames[t].data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.masks[t].data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(s.masks[t].data().contains(&1.0), "{sc:?} frame {t} has an empty mask");
            assert!(flow_to_rgb(&s.flow_fields[t], Some(s.flow_max[t])).unwrap().bitwise_eq(&s.flow_rgb[t]));
        }
    }
}

#[test]
fn stationary_objects_have_zero_foreground_flow() {
    for seed in 0..5 {
        let cfg = SceneConfig::random(Scenario::StationaryObject, 64, 64, 4, seed);
        let s = generate_sequence(&cfg, seed).unwrap();
        for (m, f) in s.masks.iter().zip(&s.flow_fields) {
            for i in 0..64 * 64 {
                if m.data()[i] == 1.0 {
                    assert_eq!((f.data()[i], f.data()[4096 + i]), (0.0, 0.0));
                }
            }
        }
    }
}

#[test]
fn comoving_background_flow_is_uniform() {
    for seed in 0..5 {
        let cfg = SceneConfig::random(Scenario::ComovingBackground, 64, 64, 3, seed);
        let s = generate_sequence(&cfg, seed).unwrap();
        for f in &s.flow_fields {
            let (u0, v0) = (f.data()[0], f.data()[4096]);
            let same = (0..4096).filter(|&i| f.data()[i] == u0 && f.data()[4096 + i] == v0).count();
            assert!(same as f64 >= 0.95 * 4096.0);
        }
    }
}

#[test]
fn background_mover_is_excluded_from_the_mask() {
    let cfg = SceneConfig::random(Scenario::BackgroundMover, 64, 64, 3, 2);
    let s = generate_sequence(&cfg, 2).unwrap();
    let (m, f) = (&s.masks[0], &s.flow_fields[0]);
    let moving_background = (0..4096)
        .filter(|&i| m.data()[i] == 0.0 && (f.data()[i] != 0.0 || f.data()[4096 + i] != 0.0))
        .count();
    assert!(moving_background > 20);
}

#[test]
fn motion_blur_smears_frames() {
    let cfg = SceneConfig::random(Scenario::MotionBlur, 64, 64, 3, 5);
    assert!(cfg.blur_samples > 1);
    let sharp_cfg = SceneConfig {
        blur_samples: 1,
        ..cfg.clone()
    };
    let blurred = generate_sequence(&cfg, 5).unwrap();
    let sharp = generate_sequence(&sharp_cfg, 5).unwrap();
    assert!(blurred.frames[1].max_abs_diff(&sharp.frames[1]) > 0.1);
    assert!(blurred.masks[1].bitwise_eq(&sharp.masks[1]));
}

/// Bilinear sample of channel `c` at a continuous pixel-centre position.
fn sample(t: &Tensor<f64>, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let (y, x) = (y.clamp(0.0, (h - 1) as f64), x.clamp(0.0, (w - 1) as f64));
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = at(t, c, y0, x0) * (1.0 - fx) + at(t, c, y0, x1) * fx;
    let bot = at(t, c, y1, x0) * (1.0 - fx) + at(t, c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

#[test]
fn flow_warps_each_frame_onto_the_next() {
    for seed in 0..6 {
        let mut cfg = SceneConfig::random(Scenario::Normal, 64, 64, 3, seed);
        cfg.shapes.iter_mut().for_each(|s| s.scale_rate = 0.0);
        let s = generate_sequence(&cfg, seed).unwrap();
        for t in 0..2 {
            let (f, m0, m1) = (&s.flow_fields[t], &s.masks[t], &s.masks[t + 1]);
            let (mut err, mut n) = (0.0, 0usize);
            for y in 0..64 {
                for x in 0..64 {
                    if m0.data()[y * 64 + x] != 1.0 {
                        continue;
                    }
                    let (ty, tx) = (y as f64 + at(f, 1, y, x), x as f64 + at(f, 0, y, x));
                    // keep targets whose whole bilinear footprint stays on the object
                    let corners = [(ty.floor(), tx.floor()), (ty.ceil(), tx.ceil()), (ty.floor(), tx.ceil()), (ty.ceil(), tx.floor())];
                    if !corners.iter().all(|&(cy, cx)| {
                        cy >= 0.0 && cx >= 0.0 && cy < 64.0 && cx < 64.0 && m1.data()[cy as usize * 64 + cx as usize] == 1.0
                    }) {
                        continue;
                    }
                    for c in 0..3 {
                        err += (sample(&s.frames[t + 1], c, ty, tx) - at(&s.frames[t], c, y, x)).abs();
                    }
                    n += 3;
                }
            }
            assert!(n > 0);
            assert!(err / n as f64 <= 0.02, "seed {seed} t {t}: {}", err / n as f64);
        }
    }
}

#[test]
fn invalid_scenes_are_rejected() {
    let mut cfg = circle_scene([1.0, 0.0]);
    cfg.height = 100;
    assert!(matches!(generate_sequence(&cfg, 0), Err(Error::Config(_))));
    let mut cfg = circle_scene([1.0, 0.0]);
    cfg.frames = 1;
    assert!(matches!(generate_sequence(&cfg, 0), Err(Error::Config(_))));
}

#[test]
fn zero_flow_renders_white() {
    let rgb = flow_to_rgb(&Tensor::zeros(&[2, 4, 4]), None).unwrap();
    assert!(rgb.data().iter().all(|&v| v == 1.0));
}

#[test]
fn opposite_vectors_land_on_opposite_sides_of_the_wheel() {
    let wheel = color_wheel();
    let half = (WHEEL_SIZE - 1) as f64 / 2.0;
    // independent lookup: angle measured from the negated vector
    let rim = |u: f64, v: f64| {
        let fk = ((-v).atan2(-u) / std::f64::consts::PI + 1.0) / 2.0 * (WHEEL_SIZE - 1) as f64;
        (fk, fk.floor() as usize)
    };
    for k in 0..24 {
        let th = k as f64 * std::f64::consts::TAU / 24.0 + 0.01;
        let (u, v) = (th.cos(), th.sin());
        let (a, _) = rim(u, v);
        let (b, _) = rim(-u, -v);
        assert!(((a - b).abs() - half).abs() < 1e-9);
        let (fk, k0) = rim(-u, -v);
        let k1 = (k0 + 1) % WHEEL_SIZE;
        let f = fk - k0 as f64;
        let c = flow_color(-u, -v, &wheel);
        for ch in 0..3 {
            let want = (1.0 - f) * wheel[k0][ch] / 255.0 + f * wheel[k1][ch] / 255.0;
            assert!((c[ch] - want).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalized_rendering_ignores_overall_scale(data in proptest::collection::vec(-5.0f64..5.0, 32)) {
        let f = Tensor::new(&[2, 4, 4], data).unwrap();
        let doubled = f.map(|v| 2.0 * v);
        prop_assert!(flow_to_rgb(&f, None).unwrap().bitwise_eq(&flow_to_rgb(&doubled, None).unwrap()));
    }
}
