use proptest::prelude::*;
use smtc_core::decoder::{cbam, decode_full, decode_level, CbamWeights, DecoderWeights};
use smtc_core::encoder::FeaturePyramid;
use smtc_core::model::{predict_two_round, Model, ModelConfig};
use smtc_core::numerics::{Graph, SeededRng, Tensor, Var};
use smtc_core::params::ParamStore;
use smtc_core::Error;

fn cbam_fixture(channels: usize) -> (ParamStore<f64>, CbamWeights) {
    let mut store = ParamStore::new();
    let w = CbamWeights::new(&mut store, &mut SeededRng::new(2), "c", channels, 4).unwrap();
    (store, w)
}

fn apply_cbam(store: &ParamStore<f64>, w: &CbamWeights, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = cbam(&mut g, store, xv, w).unwrap();
    g.value(y).clone()
}

#[test]
fn open_gates_pass_features_through() {
    let (mut store, w) = cbam_fixture(8);
    for conv in [w.excite, w.spatial] {
        let n = store.get(conv.bias).numel();
        store.set(conv.bias, Tensor::full(&[n], 60.0)).unwrap();
    }
    let x: Tensor<f64> = SeededRng::new(1).normal_tensor(&[1, 8, 5, 5], 0.5);
    assert!(apply_cbam(&store, &w, &x).max_abs_diff(&x) < 1e-12);
}

#[test]
fn zero_features_stay_zero() {
    let (store, w) = cbam_fixture(8);
    let y = apply_cbam(&store, &w, &Tensor::zeros(&[2, 8, 4, 4]));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn indivisible_channels_are_rejected() {
    let mut store = ParamStore::<f64>::new();
    assert!(matches!(
        CbamWeights::new(&mut store, &mut SeededRng::new(0), "c", 6, 4),
        Err(Error::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gating_never_amplifies(seed in any::<u64>()) {
        let (store, w) = cbam_fixture(8);
        let x: Tensor<f64> = SeededRng::new(seed).normal_tensor(&[1, 8, 6, 6], 2.0);
        let y = apply_cbam(&store, &w, &x);
        for (a, b) in y.data().iter().zip(x.data()) {
            prop_assert!(a.abs() <= b.abs());
        }
    }
}

fn decoder_fixture() -> (ParamStore<f64>, DecoderWeights) {
    let mut store = ParamStore::new();
    let w = DecoderWeights::new(&mut store, &mut SeededRng::new(4), &[4, 8, 16, 32], 8, 4).unwrap();
    (store, w)
}

#[test]
fn deepest_level_doubles_the_grid() {
    let (store, w) = decoder_fixture();
    let mut g = Graph::new();
    let x = g.input(SeededRng::new(1).normal_tensor(&[1, 32, 4, 4], 1.0));
    let y = decode_level(&mut g, &store, x, None, &w.levels[3]).unwrap();
    assert_eq!(g.shape(y), &[1, 8, 8, 8]);
    let z = g.input(Tensor::zeros(&[1, 32, 4, 4]));
    let y = decode_level(&mut g, &store, z, None, &w.levels[3]).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn finer_levels_concatenate_the_deeper_feature() {
    let (store, w) = decoder_fixture();
    assert_eq!(store.get(w.levels[2].conv.weight).shape(), &[8, 16 + 8, 3, 3]);
    assert_eq!(store.get(w.levels[3].conv.weight).shape(), &[8, 32, 3, 3]);
    let mut g = Graph::new();
    let f = g.input(Tensor::zeros(&[1, 16, 8, 8]));
    let deeper = g.input(Tensor::zeros(&[1, 8, 4, 4]));
    assert!(matches!(
        decode_level(&mut g, &store, f, Some(deeper), &w.levels[2]),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn constant_fields_decode_to_constant_interiors() {
    let (store, w) = decoder_fixture();
    let (h, wd) = (16, 16);
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 32, h, wd], 0.7));
    let y = decode_level(&mut g, &store, x, None, &w.levels[3]).unwrap();
    let v = g.value(y);
    // 3×3 conv and the 7×7 spatial gate reach 4 pixels in from the border;
    // the ×2 upsample doubles that and blends one more ring
    let margin = 2 * 4 + 2;
    let (oh, ow) = (2 * h, 2 * wd);
    for c in 0..8 {
        let plane = &v.data()[c * oh * ow..(c + 1) * oh * ow];
        let centre = plane[(oh / 2) * ow + ow / 2];
        for r in margin..oh - margin {
            for q in margin..ow - margin {
                assert!((plane[r * ow + q] - centre).abs() < 1e-12);
            }
        }
    }
}

fn pyramid(g: &mut Graph<f64>, seed: u64, h: usize) -> FeaturePyramid {
    let mut rng = SeededRng::new(seed);
    let chans = [4, 8, 16, 32];
    let levels: Vec<Var> = (0..4)
        .map(|i| {
            let s = h >> (i + 2);
            g.input(rng.normal_tensor(&[1, chans[i], s, s], 1.0))
        })
        .collect();
    FeaturePyramid {
        levels: levels.try_into().unwrap(),
    }
}

#[test]
fn full_decode_returns_input_resolution_and_respects_override() {
    let (store, w) = decoder_fixture();
    let mut g = Graph::new();
    let (pi, po) = (pyramid(&mut g, 1, 128), pyramid(&mut g, 2, 128));
    let plain = decode_full(&mut g, &store, &pi, &po, None, &w).unwrap();
    assert_eq!(g.shape(plain.prob), &[1, 1, 128, 128]);
    assert!(g.value(plain.prob).data().iter().all(|&p| (0.0..=1.0).contains(&p)));

    let f4 = g.add(pi.levels[3], po.levels[3]).unwrap();
    let over = decode_full(&mut g, &store, &pi, &po, Some(f4), &w).unwrap();
    let again = decode_full(&mut g, &store, &pi, &po, None, &w).unwrap();
    assert!(g.value(over.prob).bitwise_eq(g.value(plain.prob)));
    assert!(g.value(again.logits).bitwise_eq(g.value(plain.logits)));

    let bad = g.input(Tensor::zeros(&[1, 32, 2, 2]));
    assert!(decode_full(&mut g, &store, &pi, &po, Some(bad), &w).is_err());
}

#[test]
fn probabilities_match_sigmoid_of_logits_in_single_precision() {
    let model = Model::<f32>::new(ModelConfig::tiny(), 3).unwrap();
    let mut rng = SeededRng::new(5);
    let mut g = Graph::new();
    let img = g.input(rng.uniform_tensor(&[1, 3, 64, 64], 0.0, 1.0));
    let flow = g.input(rng.uniform_tensor(&[1, 3, 64, 64], 0.0, 1.0));
    let out = predict_two_round(&mut g, &model.store, &model.net, img, flow).unwrap();
    for head in [out.round1, out.round2] {
        assert_eq!(g.shape(head.prob), &[1, 1, 64, 64]);
        for (&p, &l) in g.value(head.prob).data().iter().zip(g.value(head.logits).data()) {
            let s = 1.0 / (1.0 + (-(l as f64)).exp());
            assert!((p as f64 - s).abs() < 1e-6);
        }
    }
}

#[test]
fn bypassed_refinement_repeats_round_one() {
    let cfg = ModelConfig {
        isrm: false,
        ..ModelConfig::tiny()
    };
    let model = Model::<f64>::new(cfg, 1).unwrap();
    let mut rng = SeededRng::new(2);
    let mut g = Graph::new();
    let img = g.input(rng.uniform_tensor(&[2, 3, 32, 32], 0.0, 1.0));
    let flow = g.input(rng.uniform_tensor(&[2, 3, 32, 32], 0.0, 1.0));
    let out = predict_two_round(&mut g, &model.store, &model.net, img, flow).unwrap();
    assert!(out.isrm.is_none());
    assert!(g.value(out.round2.prob).bitwise_eq(g.value(out.round1.prob)));
}

#[test]
fn refinement_changes_only_the_deepest_input() {
    let model = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
    let mut rng = SeededRng::new(2);
    let mut g = Graph::new();
    let img = g.input(rng.uniform_tensor(&[1, 3, 32, 32], 0.0, 1.0));
    let flow = g.input(rng.uniform_tensor(&[1, 3, 32, 32], 0.0, 1.0));
    let out = predict_two_round(&mut g, &model.store, &model.net, img, flow).unwrap();
    let isrm = out.isrm.unwrap();
    assert!(g.value(isrm.refined).max_abs_diff(g.value(out.fused[3])) > 0.0);
    let forced = decode_full(&mut g, &model.store, &out.appearance, &out.motion, Some(out.fused[3]), &model.net.decoder).unwrap();
    assert!(g.value(forced.prob).bitwise_eq(g.value(out.round1.prob)));
}
