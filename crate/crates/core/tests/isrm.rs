use proptest::prelude::*;
use smtc_core::isrm::{
    bypass, compute_keys, embed_saliency, fuse_weighted, isrm_forward, refine_self_attention, IsrmWeights,
    Normalization, FUSE_EPS,
};
use smtc_core::numerics::gradcheck::{gradcheck, GradcheckOptions, Probe};
use smtc_core::numerics::{Graph, SeededRng, Tensor};
use smtc_core::params::ParamStore;
use smtc_core::Error;

const C: usize = 8;

fn weights() -> (ParamStore<f64>, IsrmWeights) {
    let mut store = ParamStore::new();
    let w = IsrmWeights::new(&mut store, &mut SeededRng::new(7), C, 2).unwrap();
    (store, w)
}

fn randomize_biases(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.ends_with(".bias"))
        .map(|(id, p)| (id, p.value.shape().to_vec()))
        .collect();
    for (id, s) in ids {
        store.set(id, rng.normal_tensor(&s, 0.1)).unwrap();
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    SeededRng::new(seed).normal_tensor(shape, 1.0)
}

#[test]
fn saliency_embedding_shapes_and_trivial_inputs() {
    let (store, w) = weights();
    let mut g = Graph::new();
    let zero = g.input(Tensor::zeros(&[1, 1, 128, 128]));
    let e = embed_saliency(&mut g, &store, zero, &w).unwrap();
    assert_eq!(g.shape(e), &[1, C, 4, 4]);
    assert!(g.value(e).data().iter().all(|&v| v == 0.0));

    let half = g.input(Tensor::full(&[2, 1, 64, 96], 0.4));
    let e = embed_saliency(&mut g, &store, half, &w).unwrap();
    let v = g.value(e).data();
    for ch in 0..2 * C {
        let plane = &v[ch * 6..ch * 6 + 6];
        assert!(plane.iter().all(|&x| x == plane[0] && x >= 0.0));
    }

    let bad = g.input(Tensor::zeros(&[1, 1, 100, 128]));
    assert!(matches!(embed_saliency(&mut g, &store, bad, &w), Err(Error::Dimension { .. })));
}

#[test]
fn appearance_and_motion_share_a_key_encoder() {
    let (mut store, w) = weights();
    let x = randn(&[1, C, 2, 2], 1);
    let s = randn(&[1, C, 2, 2], 2);
    let run = |store: &ParamStore<f64>, o: &Tensor<f64>| {
        let mut g = Graph::new();
        let (sv, ov, iv) = (g.input(s.clone()), g.input(o.clone()), g.input(x.clone()));
        let (a, b, c) = compute_keys(&mut g, store, sv, ov, iv, &w).unwrap();
        (g.value(a).clone(), g.value(b).clone(), g.value(c).clone())
    };
    let (s0, o0, i0) = run(&store, &x);
    assert!(o0.bitwise_eq(&i0));

    let bumped = store.get(w.enc_s.weight).map(|v| v * 2.0 + 0.1);
    store.set(w.enc_s.weight, bumped).unwrap();
    let (s1, o1, i1) = run(&store, &x);
    assert!(o1.bitwise_eq(&o0) && i1.bitwise_eq(&i0));
    assert!(s1.max_abs_diff(&s0) > 1e-3);

    let mut g = Graph::new();
    let z = g.input(Tensor::zeros(&[1, C, 2, 2]));
    let (a, b, c) = compute_keys(&mut g, &store, z, z, z, &w).unwrap();
    for k in [a, b, c] {
        assert!(g.value(k).data().iter().all(|&v| v == 0.0));
    }
    let off = g.input(Tensor::zeros(&[1, C, 2, 1]));
    assert!(compute_keys(&mut g, &store, z, off, z, &w).is_err());
}

/// Fuses random stream features with the given keys; returns `(w_o, w_i, fused, o4, i4)`.
fn fuse(
    s_key: &Tensor<f64>,
    o_key: &Tensor<f64>,
    i_key: &Tensor<f64>,
    mode: Normalization,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let sh = s_key.shape();
    let feat = [sh[0], 3, sh[2], sh[3]];
    let (o4, i4) = (randn(&feat, 40), randn(&feat, 41));
    let mut g = Graph::new();
    let (ov, iv) = (g.input(o4.clone()), g.input(i4.clone()));
    let (sk, ok, ik) = (g.input(s_key.clone()), g.input(o_key.clone()), g.input(i_key.clone()));
    let (wo, wi, f) = fuse_weighted(&mut g, ov, iv, sk, ok, ik, FUSE_EPS, mode).unwrap();
    (g.value(wo).clone(), g.value(wi).clone(), g.value(f).clone(), o4, i4)
}

#[test]
fn matching_keys_split_evenly() {
    let s = randn(&[1, 4, 3, 3], 1);
    let k = s.map(|v| v + 0.01);
    let (wo, wi, f, o4, i4) = fuse(&s, &k, &k, Normalization::SharedDenominator);
    for (&a, &b) in wo.data().iter().zip(wi.data()) {
        assert_eq!(a, b);
        assert!((a - 0.5).abs() < 1e-5);
    }
    for i in 0..f.numel() {
        let want = 0.5 * (o4.data()[i] + i4.data()[i]);
        assert!((f.data()[i] - want).abs() < 1e-5 * (1.0 + want.abs()));
    }
}

#[test]
fn aligned_and_orthogonal_keys() {
    let s = randn(&[1, 4, 2, 2], 3);
    let mut orth = randn(&[1, 4, 2, 2], 4);
    for p in 0..4 {
        let dot: f64 = (0..4).map(|c| s.data()[c * 4 + p] * orth.data()[c * 4 + p]).sum();
        let nn: f64 = (0..4).map(|c| s.data()[c * 4 + p].powi(2)).sum();
        for c in 0..4 {
            orth.data_mut()[c * 4 + p] -= dot / nn * s.data()[c * 4 + p];
        }
    }
    let (wo, wi, f, o4, _) = fuse(&s, &s, &orth, Normalization::SharedDenominator);
    assert!(wo.data().iter().all(|&v| (v - 1.0).abs() < 1e-5));
    assert!(wi.data().iter().all(|&v| v.abs() < 1e-12));
    assert!(f.max_abs_diff(&o4) < 1e-4);
}

#[test]
fn anti_aligned_keys_zero_the_fusion() {
    let s = randn(&[1, 4, 2, 2], 5);
    let (wo, wi, f, ..) = fuse(&s, &s.map(|v| -v), &s.map(|v| -2.0 * v), Normalization::SharedDenominator);
    assert!(wo.data().iter().chain(wi.data()).chain(f.data()).all(|&v| v == 0.0));
}

#[test]
fn sequential_mode_reuses_the_updated_weight() {
    let s = randn(&[1, 4, 2, 2], 6);
    let o = s.map(|v| v + 0.3);
    let i = s.map(|v| v * 0.5 - 0.2);
    let (wo_s, wi_s, ..) = fuse(&s, &o, &i, Normalization::SharedDenominator);
    let (wo_l, wi_l, ..) = fuse(&s, &o, &i, Normalization::SequentialLiteral);
    assert!(wo_s.bitwise_eq(&wo_l));
    for p in 0..4 {
        let (co, ci) = (cos_at(&s, &o, p).max(0.0), cos_at(&s, &i, p).max(0.0));
        let wo = co / (co + ci + FUSE_EPS);
        assert!((wo_s.data()[p] - wo).abs() < 1e-12);
        assert!((wi_s.data()[p] - ci / (co + ci + FUSE_EPS)).abs() < 1e-12);
        assert!((wi_l.data()[p] - ci / (wo + ci + FUSE_EPS)).abs() < 1e-12);
    }
}

fn cos_at(a: &Tensor<f64>, b: &Tensor<f64>, p: usize) -> f64 {
    let c = a.shape()[1];
    let hw = a.shape()[2] * a.shape()[3];
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for ch in 0..c {
        let (x, y) = (a.data()[ch * hw + p], b.data()[ch * hw + p]);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_form_a_sub_convex_pair(seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let sh = [1, 5, 3, 3];
        let (s, o, i) = (rng.normal_tensor(&sh, 1.0), rng.normal_tensor(&sh, 1.0), rng.normal_tensor(&sh, 1.0));
        let (wo, wi, ..) = fuse(&s, &o, &i, Normalization::SharedDenominator);
        for p in 0..9 {
            let (a, b) = (wo.data()[p], wi.data()[p]);
            prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            prop_assert!(a + b <= 1.0);
            if cos_at(&s, &o, p).max(cos_at(&s, &i, p)) >= 0.01 {
                prop_assert!(a + b > 1.0 - 1e-3);
            }
        }
        let (wo2, wi2, ..) = fuse(&s, &i, &o, Normalization::SharedDenominator);
        prop_assert!(wo2.bitwise_eq(&wi) && wi2.bitwise_eq(&wo));
    }

    // the cosine's 1e-12 guard is visible for keys much shorter than 0.1
    #[test]
    fn weights_ignore_key_scale(seed in any::<u64>(), k in 0.1f64..100.0) {
        let mut rng = SeededRng::new(seed);
        let sh = [1, 4, 2, 2];
        let (s, o, i) = (rng.normal_tensor(&sh, 1.0), rng.normal_tensor(&sh, 1.0), rng.normal_tensor(&sh, 1.0));
        let (wo, wi, ..) = fuse(&s, &o, &i, Normalization::SharedDenominator);
        let (wo2, wi2, ..) = fuse(&s, &o.map(|v| v * k), &i.map(|v| v * k), Normalization::SharedDenominator);
        prop_assert!(wo.max_abs_diff(&wo2) < 1e-10 && wi.max_abs_diff(&wi2) < 1e-10);
    }
}

#[test]
fn swapping_streams_leaves_the_fusion_unchanged() {
    let sh = [2, 4, 2, 2];
    let (s, o, i) = (randn(&sh, 1), randn(&sh, 2), randn(&sh, 3));
    let feat = [2, 3, 2, 2];
    let (a, b) = (randn(&feat, 4), randn(&feat, 5));
    let run = |ok: &Tensor<f64>, ik: &Tensor<f64>, o4: &Tensor<f64>, i4: &Tensor<f64>| {
        let mut g = Graph::new();
        let (ov, iv) = (g.input(o4.clone()), g.input(i4.clone()));
        let (sk, okv, ikv) = (g.input(s.clone()), g.input(ok.clone()), g.input(ik.clone()));
        let (wo, wi, f) = fuse_weighted(&mut g, ov, iv, sk, okv, ikv, FUSE_EPS, Normalization::SharedDenominator).unwrap();
        (g.value(wo).clone(), g.value(wi).clone(), g.value(f).clone())
    };
    let (wo, wi, f) = run(&o, &i, &a, &b);
    let (wo2, wi2, f2) = run(&i, &o, &b, &a);
    assert!(wo.bitwise_eq(&wi2) && wi.bitwise_eq(&wo2) && f.bitwise_eq(&f2));
}

#[test]
fn refinement_on_one_token_adds_the_projected_value() {
    let (mut store, w) = weights();
    randomize_biases(&mut store, 9);
    let fused = randn(&[1, C, 1, 1], 1);
    let s = randn(&[1, C, 1, 1], 2);
    let mut g = Graph::new();
    let (fv, sv) = (g.input(fused.clone()), g.input(s.clone()));
    let r = refine_self_attention(&mut g, &store, fv, sv, &w).unwrap();
    let z = g.add(fv, sv).unwrap();
    let t = g.to_tokens(z).unwrap();
    let n = w.norm.forward(&mut g, &store, t).unwrap();
    let v = w.value.forward(&mut g, &store, n).unwrap();
    let o = w.out.forward(&mut g, &store, v).unwrap();
    let want = g.add(t, o).unwrap();
    let want = g.to_map(want, 1, 1).unwrap();
    assert!(g.value(r).max_abs_diff(g.value(want)) < 1e-12);
}

#[test]
fn refinement_of_zero_is_zero() {
    let (store, w) = weights();
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros(&[1, C, 2, 2]));
    let r = refine_self_attention(&mut g, &store, z, z, &w).unwrap();
    assert!(g.value(r).data().iter().all(|&v| v == 0.0));
}

#[test]
fn refinement_is_permutation_equivariant() {
    let (mut store, w) = weights();
    randomize_biases(&mut store, 3);
    let x = randn(&[1, C, 2, 3], 4);
    let perm = [4, 2, 0, 5, 1, 3];
    let permute = |t: &Tensor<f64>, p: &[usize]| {
        let mut out = t.clone();
        for c in 0..C {
            for (dst, &src) in p.iter().enumerate() {
                out.data_mut()[c * 6 + dst] = t.data()[c * 6 + src];
            }
        }
        out
    };
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let z = g.input(Tensor::zeros(x.shape()));
        let r = refine_self_attention(&mut g, &store, xv, z, &w).unwrap();
        g.value(r).clone()
    };
    let direct = permute(&run(&x), &perm);
    let via = run(&permute(&x, &perm));
    assert!(direct.max_abs_diff(&via) < 1e-12);
}

fn forward_inputs(seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = SeededRng::new(seed);
    (
        rng.normal_tensor(&[1, C, 4, 4], 1.0),
        rng.normal_tensor(&[1, C, 4, 4], 1.0),
        rng.uniform_tensor(&[1, 1, 128, 128], 0.0, 1.0),
    )
}

#[test]
fn full_module_is_deterministic_and_bypass_adds_streams() {
    let (store, w) = weights();
    let (i4, o4, s) = forward_inputs(1);
    let run = || {
        let mut g = Graph::new();
        let (iv, ov, sv) = (g.input(i4.clone()), g.input(o4.clone()), g.input(s.clone()));
        let st = isrm_forward(&mut g, &store, iv, ov, sv, &w, Normalization::SharedDenominator).unwrap();
        assert_eq!(g.shape(st.w_o), &[1, 1, 4, 4]);
        assert_eq!(g.shape(st.refined), &[1, C, 4, 4]);
        let b = bypass(&mut g, iv, ov).unwrap();
        (g.value(st.refined).clone(), g.value(b).clone())
    };
    let (a, b) = run();
    let (a2, _) = run();
    assert!(a.bitwise_eq(&a2));
    for k in 0..b.numel() {
        assert_eq!(b.data()[k], i4.data()[k] + o4.data()[k]);
    }
}

#[test]
fn gradients_reach_inputs_and_parameters() {
    let (mut store, w) = weights();
    randomize_biases(&mut store, 2);
    let (i4, o4, s) = forward_inputs(2);
    let mut g = Graph::new();
    let (iv, ov, sv) = (g.input_grad(i4), g.input_grad(o4), g.input_grad(s));
    let st = isrm_forward(&mut g, &store, iv, ov, sv, &w, Normalization::SharedDenominator).unwrap();
    let proj = g.input(randn(&[1, C, 4, 4], 8));
    let p = g.mul(st.refined, proj).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    for (k, v) in [iv, ov, sv].into_iter().enumerate() {
        assert!(grads.of(v).unwrap().data().iter().any(|&x| x != 0.0), "input {k}");
    }
    for ((_, p), gr) in store.iter().zip(grads.for_store(&store)) {
        assert!(gr.data().iter().any(|&x| x != 0.0), "{}", p.name);
    }
}

#[test]
fn module_passes_gradcheck() {
    let (mut store, w) = weights();
    randomize_biases(&mut store, 5);
    let (i4, o4, s) = forward_inputs(5);
    let proj = randn(&[1, C, 4, 4], 6);
    let report = gradcheck(
        &store,
        &[i4, o4, s],
        |g, store, v| {
            let st = isrm_forward(g, store, v[0], v[1], v[2], &w, Normalization::SharedDenominator)?;
            let p = g.input(proj.clone());
            let m = g.mul(st.refined, p)?;
            g.sum(m)
        },
        &GradcheckOptions {
            probe: Probe::Steered(8),
            ..GradcheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
