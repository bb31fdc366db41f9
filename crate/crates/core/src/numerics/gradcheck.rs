//! Central-difference verification of tape gradients (double precision).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Graph, SeededRng, Tensor, Var};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Result};

/// How perturbations are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    /// Perturb up to `n` individual coordinates of every tensor.
    Coordinates(usize),
    /// Perturb every tensor along `n` random unit directions and compare the
    /// directional derivative with the projected analytic gradient.
    Directions(usize),
    /// Like `Directions`, but each random unit direction is averaged with the
    /// normalised analytic gradient, so the projected derivative stays near
    /// `|g|` instead of cancelling to roundoff level in large tensors.
    Steered(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Steps retried when a probe disagrees at `step`, each with the
    /// Richardson estimate `(4·D(h/2) − D(h))/3`; the probe keeps its
    /// smallest error. Large fallbacks reach derivatives too small for
    /// roundoff at `step`, small ones avoid straddling ReLU kinks.
    pub fallback_steps: &'static [f64],
    pub probe: Probe,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            fallback_steps: &[],
            probe: Probe::Coordinates(16),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Tensor (parameter name or `input[i]`) holding the worst probe.
    pub worst: String,
}

/// Relative error with the denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-8)
}

fn evaluate<F>(f: &F, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_grad(t.clone())).collect();
    let loss = f(&mut g, store, &vars)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::contract(format!(
            "gradcheck needs a scalar function, got shape {:?}",
            g.shape(loss)
        )));
    }
    Ok((g, vars, loss))
}

fn value<F>(f: &F, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let (g, _, loss) = evaluate(f, store, inputs)?;
    Ok(g.value(loss).item())
}

fn normalize(v: &mut [f64]) {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Error at the primary step, then at each fallback until one is below
/// `ACCEPT`.
fn best_error(analytic: f64, opts: &GradcheckOptions, mut numeric: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    const ACCEPT: f64 = 1e-5;
    let mut best = relative_error(analytic, numeric(opts.step)?);
    for &h in opts.fallback_steps {
        if best <= ACCEPT {
            break;
        }
        let extrapolated = (4.0 * numeric(h / 2.0)? - numeric(h)?) / 3.0;
        best = best.min(relative_error(analytic, extrapolated));
    }
    Ok(best)
}

/// Compares tape gradients of `f` with respect to every parameter in `store`
/// and every tensor in `inputs` against central differences.
pub fn gradcheck<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with_hook(store, inputs, f, opts, |_| {})
}

/// Like [`gradcheck`], but lets `tamper` rewrite the analytic gradients
/// before comparison (harness self-tests).
pub fn gradcheck_with_hook<F, H>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: F,
    opts: &GradcheckOptions,
    tamper: H,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
    H: Fn(&mut [Tensor<f64>]),
{
    let (g, vars, loss) = evaluate(&f, store, inputs)?;
    let base = g.value(loss).item();
    if value(&f, store, inputs)?.to_bits() != base.to_bits() {
        return Err(Error::contract("gradcheck function is not deterministic"));
    }
    let grads = g.backward(loss)?;
    let mut analytic = grads.for_store(store);
    for (v, t) in vars.iter().zip(inputs) {
        analytic.push(grads.of(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())));
    }
    tamper(&mut analytic);

    let n_params = store.len();
    let name = |i: usize| {
        if i < n_params {
            String::from(store.entry(ParamId(i)).name.as_str())
        } else {
            format!("input[{}]", i - n_params)
        }
    };
    let mut rng = SeededRng::new(opts.seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        probes: 0,
        worst: String::new(),
    };

    // Evaluates f with tensor `which` displaced by `delta`.
    let shifted = |which: usize, delta: &dyn Fn(&mut [f64])| -> Result<f64> {
        if which < n_params {
            let mut s = store.clone();
            delta(s.get_mut(ParamId(which)).data_mut());
            value(&f, &s, inputs)
        } else {
            let mut ins = inputs.to_vec();
            delta(ins[which - n_params].data_mut());
            value(&f, store, &ins)
        }
    };

    for (ti, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        if n == 0 {
            continue;
        }
        match opts.probe {
            Probe::Coordinates(per) => {
                let picks: Vec<usize> = if n <= per {
                    (0..n).collect()
                } else {
                    (0..per).map(|_| rng.below(n)).collect()
                };
                for j in picks {
                    let err = best_error(grad.data()[j], opts, |h| {
                        let fp = shifted(ti, &|d: &mut [f64]| d[j] += h)?;
                        let fm = shifted(ti, &|d: &mut [f64]| d[j] -= h)?;
                        Ok((fp - fm) / (2.0 * h))
                    })?;
                    report.probes += 1;
                    if err > report.max_rel_error || report.worst.is_empty() {
                        report.max_rel_error = report.max_rel_error.max(err);
                        report.worst = name(ti);
                    }
                }
            }
            Probe::Directions(count) | Probe::Steered(count) => {
                let steer = match opts.probe {
                    Probe::Steered(_) => {
                        let mut s = grad.data().to_vec();
                        normalize(&mut s);
                        Some(s)
                    }
                    _ => None,
                };
                for _ in 0..count {
                    let mut dir: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
                    normalize(&mut dir);
                    if let Some(s) = &steer {
                        dir.iter_mut().zip(s).for_each(|(d, g)| *d += g);
                        normalize(&mut dir);
                    }
                    let projected: f64 = grad.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
                    let err = best_error(projected, opts, |h| {
                        let fp = shifted(ti, &|d: &mut [f64]| d.iter_mut().zip(&dir).for_each(|(x, u)| *x += h * u))?;
                        let fm = shifted(ti, &|d: &mut [f64]| d.iter_mut().zip(&dir).for_each(|(x, u)| *x -= h * u))?;
                        Ok((fp - fm) / (2.0 * h))
                    })?;
                    report.probes += 1;
                    if err > report.max_rel_error || report.worst.is_empty() {
                        report.max_rel_error = report.max_rel_error.max(err);
                        report.worst = name(ti);
                    }
                }
            }
        }
    }
    Ok(report)
}
