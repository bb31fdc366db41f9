//! Focal, binary cross-entropy and Dice terms on logits, and their weighted
//! two-head combination.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, Scalar, Tensor, Unary, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Focal weight.
    pub alpha: f64,
    /// BCE weight.
    pub beta: f64,
    /// Dice weight.
    pub gamma: f64,
    /// Weight of the round-one head.
    pub omega: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            beta: 10.0,
            gamma: 1.0,
            omega: 0.3,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_eps: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.omega, self.focal_gamma, self.dice_eps];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.omega) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::config("omega and focal_alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, a: Var, b: Var, op: &'static str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

fn check_binary<T: Scalar>(target: &Tensor<T>) -> Result<()> {
    match target.data().iter().position(|&v| v != T::zero() && v != T::one()) {
        Some(i) => Err(Error::contract(format!(
            "target must be binary, found {:?} at index {i}",
            target.data()[i].to_f64()
        ))),
        None => Ok(()),
    }
}

/// Mean of `−α_t (1−p_t)^γ log p_t`, with `log p_t = log σ(l·(2y−1))`.
pub fn focal_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: Var, gamma_f: f64, alpha_f: f64) -> Result<Var> {
    check_pair(g, logits, target, "focal_loss")?;
    let y = g.value(target).clone();
    check_binary(&y)?;
    let sign = g.input(y.map(|v| v + v - T::one()));
    let class_weight = g.input(y.map(|v| T::c(alpha_f) * v + T::c(1.0 - alpha_f) * (T::one() - v)));
    let z = g.mul(logits, sign)?;
    let log_pt = g.unary(z, Unary::LogSigmoid);
    let miss = g.unary(z, Unary::Affine(-T::one(), T::zero()));
    let one_minus_pt = g.sigmoid(miss);
    let modulator = g.pow(one_minus_pt, T::c(gamma_f));
    let t = g.mul(modulator, log_pt)?;
    let t = g.mul(t, class_weight)?;
    let m = g.mean(t)?;
    Ok(g.scale(m, -T::one()))
}

/// Mean of `softplus(l) − y·l`.
pub fn bce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: Var) -> Result<Var> {
    check_pair(g, logits, target, "bce_loss")?;
    let sp = g.unary(logits, Unary::Softplus);
    let yl = g.mul(target, logits)?;
    let d = g.sub(sp, yl)?;
    g.mean(d)
}

/// `1 − (2Σpg + ε)/(Σp + Σg + ε)` over the whole batch.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: Var, eps_d: f64) -> Result<Var> {
    check_pair(g, probs, target, "dice_loss")?;
    let pg = g.mul(probs, target)?;
    let inter = g.sum(pg)?;
    let num = g.affine(inter, T::c(2.0), T::c(eps_d));
    let sp = g.sum(probs)?;
    let st = g.sum(target)?;
    let den = g.add(sp, st)?;
    let den = g.affine(den, T::one(), T::c(eps_d));
    let ratio = g.div(num, den)?;
    Ok(g.affine(ratio, -T::one(), T::one()))
}

/// Term handles for one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadTerms {
    pub focal: Var,
    pub bce: Var,
    pub dice: Var,
    pub weighted: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CombinedLoss {
    pub total: Var,
    pub mask: HeadTerms,
    pub saliency: HeadTerms,
}

/// Scalar values of every term, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mask_focal: f64,
    pub mask_bce: f64,
    pub mask_dice: f64,
    pub saliency_focal: f64,
    pub saliency_bce: f64,
    pub saliency_dice: f64,
}

impl CombinedLoss {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        LossBreakdown {
            total: v(self.total),
            mask_focal: v(self.mask.focal),
            mask_bce: v(self.mask.bce),
            mask_dice: v(self.mask.dice),
            saliency_focal: v(self.saliency.focal),
            saliency_bce: v(self.saliency.bce),
            saliency_dice: v(self.saliency.dice),
        }
    }
}

/// `α·focal + β·bce + γ·dice` for one head.
pub fn head_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: Var, w: &LossWeights) -> Result<HeadTerms> {
    let focal = focal_loss(g, logits, target, w.focal_gamma, w.focal_alpha)?;
    let bce = bce_loss(g, logits, target)?;
    let probs = g.sigmoid(logits);
    let dice = dice_loss(g, probs, target, w.dice_eps)?;
    let a = g.scale(focal, T::c(w.alpha));
    let b = g.scale(bce, T::c(w.beta));
    let c = g.scale(dice, T::c(w.gamma));
    let ab = g.add(a, b)?;
    let weighted = g.add(ab, c)?;
    Ok(HeadTerms {
        focal,
        bce,
        dice,
        weighted,
    })
}

/// `L(M_pred) + ω·L(S)`.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    round2_logits: Var,
    round1_logits: Var,
    target: Var,
    w: &LossWeights,
) -> Result<CombinedLoss> {
    check_pair(g, round2_logits, round1_logits, "combined_loss")?;
    let mask = head_loss(g, round2_logits, target, w)?;
    let saliency = head_loss(g, round1_logits, target, w)?;
    let aux = g.scale(saliency.weighted, T::c(w.omega));
    let total = g.add(mask.weighted, aux)?;
    Ok(CombinedLoss { total, mask, saliency })
}
