//! Finite-difference check of every differentiable component, in double
//! precision on small shapes.

use std::fmt;
use std::time::Instant;

use smtc_core::decoder::{cbam, CbamWeights};
use smtc_core::encoder::{efficient_self_attention, lora_apply, mix_ffn, AttachPoint, AttentionCollateral, AttentionWeights, FfnWeights, LoraPair};
use smtc_core::isrm::{isrm_forward, IsrmWeights, Normalization};
use smtc_core::layers::Linear;
use smtc_core::model::{predict_two_round, Model, ModelConfig};
use smtc_core::numerics::{gradcheck_with_hook, GradcheckOptions, GradcheckReport, Graph, Probe, SeededRng, Var};
use smtc_core::objective::{bce_loss, combined_loss, dice_loss, focal_loss};
use smtc_core::params::{ParamGroup, ParamStore};
use smtc_core::{Result, Tensor};

/// Largest relative error accepted for any probe.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    LoraApply,
    EfficientSelfAttention,
    MixFfn,
    Cbam,
    IsrmForward,
    FocalLoss,
    BceLoss,
    DiceLoss,
    TwoRound,
}

impl Component {
    pub const ALL: [Component; 9] = [
        Component::LoraApply,
        Component::EfficientSelfAttention,
        Component::MixFfn,
        Component::Cbam,
        Component::IsrmForward,
        Component::FocalLoss,
        Component::BceLoss,
        Component::DiceLoss,
        Component::TwoRound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::LoraApply => "lora_apply",
            Component::EfficientSelfAttention => "efficient_self_attention",
            Component::MixFfn => "mix_ffn",
            Component::Cbam => "cbam",
            Component::IsrmForward => "isrm_forward",
            Component::FocalLoss => "focal_loss",
            Component::BceLoss => "bce_loss",
            Component::DiceLoss => "dice_loss",
            Component::TwoRound => "two_round",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub seeds: u64,
    pub components: Vec<Component>,
    /// Negates the analytic gradients of this component before comparison.
    pub sign_flip: Option<Component>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 10,
            components: Component::ALL.to_vec(),
            sign_flip: None,
        }
    }
}

/// Worst probe of one component over all seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentResult {
    pub component: Component,
    pub max_rel_error: f64,
    pub probes: usize,
    pub worst: String,
    pub worst_seed: u64,
    pub seconds: f64,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn randn(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape, 1.0)
}

/// Draws every parameter afresh so no gradient is structurally zero (zero
/// collateral `B`, zero biases, unit norm gains).
fn perturb_all(store: &mut ParamStore<f64>, rng: &mut SeededRng, std: f64) {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.value.clone())).collect();
    for (id, v) in ids {
        let noise: Tensor<f64> = rng.normal_tensor(v.shape(), std);
        let mut out = v;
        for (a, b) in out.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
        store.set(id, out).expect("same shape");
    }
}

/// `Σ out ⊙ proj` reduces any output to a scalar with a generic gradient.
fn project(g: &mut Graph<f64>, out: Var, proj: &Tensor<f64>) -> Result<Var> {
    let p = g.input(proj.clone());
    let m = g.mul(out, p)?;
    g.sum(m)
}

fn binary_target(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    rng.uniform_tensor::<f64>(shape, 0.0, 1.0).map(|v| if v < 0.4 { 1.0 } else { 0.0 })
}

type Tamper = fn(&mut [Tensor<f64>]);

fn flip(grads: &mut [Tensor<f64>]) {
    for g in grads {
        *g = g.map(|v| -v);
    }
}

fn keep(_: &mut [Tensor<f64>]) {}

fn run<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F, probe: Probe, seed: u64, tamper: Tamper) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let opts = GradcheckOptions {
        probe,
        seed,
        ..GradcheckOptions::default()
    };
    gradcheck_with_hook(store, inputs, f, &opts, tamper)
}

/// Step for the whole network. The loss is O(10) while some collateral
/// tensors move it by O(1e-5) per unit, so the default step leaves the
/// difference quotient at the roundoff floor.
const COMPOSITION_STEP: f64 = 1e-4;

/// Some refinement tensors move the loss by only O(1e-8) per unit, below
/// what a narrow step resolves against a loss of O(10), and need a wide
/// one. Strongly curved ones (spatial reduction ahead of a layer norm) and
/// decoder ReLU kinks need a narrow one.
const COMPOSITION_FALLBACKS: &[f64] = &[1e-2, 3e-2, 1e-1, 1e-3, 1e-6, 1e-7];

fn check_one(c: Component, seed: u64, tamper: Tamper) -> Result<GradcheckReport> {
    let mut rng = SeededRng::stream(seed, 7);
    let mut store = ParamStore::<f64>::new();
    match c {
        Component::LoraApply => {
            let trunk = Linear::new(&mut store, &mut rng, "w0", ParamGroup::Trunk, 8, 6);
            let pair = LoraPair::new(&mut store, &mut rng, "lora", 8, 6, 2, AttachPoint::Query)?;
            perturb_all(&mut store, &mut rng, 0.3);
            let x = randn(&mut rng, &[1, 5, 8]);
            let proj = randn(&mut rng, &[1, 5, 6]);
            run(
                &store,
                &[x],
                |g, s, v| {
                    let y = lora_apply(g, s, v[0], &trunk, Some(&pair))?;
                    project(g, y, &proj)
                },
                Probe::Coordinates(16),
                seed,
                tamper,
            )
        }
        Component::EfficientSelfAttention => {
            let (ch, h, w) = (8, 4, 4);
            let weights = AttentionWeights::new(&mut store, &mut rng, "attn", ch, 2, 2);
            let mut pair = |name: &str, at| LoraPair::new(&mut store, &mut rng, name, ch, ch, 2, at);
            let col = AttentionCollateral {
                query: Some(pair("lq", AttachPoint::Query)?),
                key: Some(pair("lk", AttachPoint::Key)?),
                value: Some(pair("lv", AttachPoint::Value)?),
                out: Some(pair("lo", AttachPoint::AttnOut)?),
            };
            perturb_all(&mut store, &mut rng, 0.3);
            let x = randn(&mut rng, &[1, h * w, ch]);
            let proj = randn(&mut rng, &[1, h * w, ch]);
            run(
                &store,
                &[x],
                |g, s, v| {
                    let y = efficient_self_attention(g, s, v[0], h, w, &weights, Some(&col))?;
                    project(g, y, &proj)
                },
                Probe::Coordinates(16),
                seed,
                tamper,
            )
        }
        Component::MixFfn => {
            let (ch, h, w) = (4, 4, 4);
            let weights = FfnWeights::new(&mut store, &mut rng, "ffn", ch);
            let pair = LoraPair::new(&mut store, &mut rng, "lf", ch, ch, 2, AttachPoint::FfnPostResidual)?;
            perturb_all(&mut store, &mut rng, 0.3);
            let x = randn(&mut rng, &[1, h * w, ch]);
            let proj = randn(&mut rng, &[1, h * w, ch]);
            run(
                &store,
                &[x],
                |g, s, v| {
                    let y = mix_ffn(g, s, v[0], h, w, &weights, Some(&pair))?;
                    project(g, y, &proj)
                },
                Probe::Coordinates(16),
                seed,
                tamper,
            )
        }
        Component::Cbam => {
            let weights = CbamWeights::new(&mut store, &mut rng, "cbam", 8, 4)?;
            perturb_all(&mut store, &mut rng, 0.3);
            let x = randn(&mut rng, &[1, 8, 5, 5]);
            let proj = randn(&mut rng, &[1, 8, 5, 5]);
            run(
                &store,
                &[x],
                |g, s, v| {
                    let y = cbam(g, s, v[0], &weights)?;
                    project(g, y, &proj)
                },
                Probe::Directions(8),
                seed,
                tamper,
            )
        }
        Component::IsrmForward => {
            let ch = 8;
            let weights = IsrmWeights::new(&mut store, &mut rng, ch, 2)?;
            perturb_all(&mut store, &mut rng, 0.1);
            let i4 = randn(&mut rng, &[1, ch, 4, 4]);
            let o4 = randn(&mut rng, &[1, ch, 4, 4]);
            let s = rng.uniform_tensor(&[1, 1, 128, 128], 0.0, 1.0);
            let proj = randn(&mut rng, &[1, ch, 4, 4]);
            run(
                &store,
                &[i4, o4, s],
                |g, st, v| {
                    let out = isrm_forward(g, st, v[0], v[1], v[2], &weights, Normalization::SharedDenominator)?;
                    project(g, out.refined, &proj)
                },
                // the 128×128 saliency input is large enough for a random
                // direction's projection to cancel
                Probe::Steered(8),
                seed,
                tamper,
            )
        }
        Component::FocalLoss | Component::BceLoss | Component::DiceLoss => {
            let logits = rng.normal_tensor(&[1, 1, 8, 8], 1.5);
            let target = binary_target(&mut rng, &[1, 1, 8, 8]);
            run(
                &store,
                &[logits],
                |g, _, v| {
                    let y = g.input(target.clone());
                    match c {
                        Component::FocalLoss => focal_loss(g, v[0], y, 2.0, 0.25),
                        Component::BceLoss => bce_loss(g, v[0], y),
                        _ => {
                            let p = g.sigmoid(v[0]);
                            dice_loss(g, p, y, 1.0)
                        }
                    }
                },
                Probe::Directions(12),
                seed,
                tamper,
            )
        }
        Component::TwoRound => {
            let (h, w) = (64, 64);
            let cfg = ModelConfig {
                height: h,
                width: w,
                ..ModelConfig::tiny()
            };
            let mut model = Model::<f64>::new(cfg, seed)?;
            perturb_all(&mut model.store, &mut rng, 0.05);
            let image = rng.uniform_tensor(&[1, 3, h, w], 0.0, 1.0);
            let flow = rng.uniform_tensor(&[1, 3, h, w], 0.0, 1.0);
            let target = binary_target(&mut rng, &[1, 1, h, w]);
            let net = model.net.clone();
            let weights = model.config.loss;
            let opts = GradcheckOptions {
                step: COMPOSITION_STEP,
                fallback_steps: COMPOSITION_FALLBACKS,
                probe: Probe::Steered(2),
                seed,
            };
            gradcheck_with_hook(
                &model.store,
                &[image, flow],
                |g, s, v| {
                    let out = predict_two_round(g, s, &net, v[0], v[1])?;
                    let y = g.input(target.clone());
                    Ok(combined_loss(g, out.round2.logits, out.round1.logits, y, &weights)?.total)
                },
                &opts,
                tamper,
            )
        }
    }
}

/// Runs every requested component over `seeds` seeds, keeping the worst
/// probe of each.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<ComponentResult>> {
    let mut out = Vec::with_capacity(opts.components.len());
    for &c in &opts.components {
        let tamper: Tamper = if opts.sign_flip == Some(c) { flip } else { keep };
        let clock = Instant::now();
        let mut res = ComponentResult {
            component: c,
            max_rel_error: 0.0,
            probes: 0,
            worst: String::new(),
            worst_seed: 0,
            seconds: 0.0,
        };
        for seed in 0..opts.seeds {
            let r = check_one(c, seed, tamper)?;
            res.probes += r.probes;
            if r.max_rel_error > res.max_rel_error || res.worst.is_empty() {
                res.max_rel_error = res.max_rel_error.max(r.max_rel_error);
                res.worst = r.worst;
                res.worst_seed = seed;
            }
        }
        res.seconds = clock.elapsed().as_secs_f64();
        log::info!("{c}: {:.3e} over {} probes", res.max_rel_error, res.probes);
        out.push(res);
    }
    Ok(out)
}

/// Fixed-width table with one line per component.
pub fn format_table(results: &[ComponentResult]) -> String {
    let mut s = format!(
        "{:<26} {:>12} {:>7} {:>6} {:>8}  {}\n",
        "component", "max_rel_err", "probes", "status", "seconds", "worst"
    );
    for r in results {
        s.push_str(&format!(
            "{:<26} {:>12.3e} {:>7} {:>6} {:>8.2}  {} (seed {})\n",
            r.component.name(),
            r.max_rel_error,
            r.probes,
            if r.passed() { "PASS" } else { "FAIL" },
            r.seconds,
            r.worst,
            r.worst_seed
        ));
    }
    s
}
