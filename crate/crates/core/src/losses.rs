//! Training objectives as pure differentiable functions on the tape.
//!
//! Segmentation combines a class-balanced focal cross-entropy with a Tversky
//! overlap term; generation uses L1, a perceptual feature distance, and a
//! least-squares adversarial score; cycle consistency reuses those pieces in
//! both directions.

use serde::{Deserialize, Serialize};

use crate::tape::{Tape, VarId};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("shape mismatch: {what} ({a:?} vs {b:?})")]
    ShapeMismatch {
        what: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

/// All loss hyperparameters for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focal cross-entropy class weight.
    pub alpha_t: f64,
    /// Focal cross-entropy focusing exponent.
    pub gamma: f64,
    pub tversky_alpha: f64,
    pub tversky_beta: f64,
    /// Exponent on (1 - TI); 1.0 is the plain Tversky loss.
    pub tversky_gamma: f64,
    /// Weight of the focal CE term in the combined segmentation loss.
    pub lambda1: f64,
    /// Weight of the Tversky term in the combined segmentation loss.
    pub lambda2: f64,
    pub weight_perceptual: f64,
    pub weight_l1: f64,
    pub weight_adversarial: f64,
    pub weight_cycle: f64,
    /// Tversky denominator stabilizer for empty masks.
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_t: 0.25,
            gamma: 2.0,
            tversky_alpha: 0.4,
            tversky_beta: 0.6,
            tversky_gamma: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            weight_perceptual: 10.0,
            weight_l1: 100.0,
            weight_adversarial: 1.0,
            weight_cycle: 10.0,
            smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let err = |m: String| Err(LossError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.alpha_t) {
            return err(format!("alpha_t must be in [0,1], got {}", self.alpha_t));
        }
        if self.gamma < 0.0 {
            return err(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if self.tversky_alpha < 0.0 || self.tversky_beta < 0.0 {
            return err("tversky_alpha and tversky_beta must be >= 0".into());
        }
        if self.tversky_alpha + self.tversky_beta <= 0.0 {
            return err("tversky_alpha + tversky_beta must be > 0".into());
        }
        if self.tversky_gamma <= 0.0 {
            return err(format!("tversky_gamma must be > 0, got {}", self.tversky_gamma));
        }
        if self.smooth <= 0.0 {
            return err(format!("smooth must be > 0, got {}", self.smooth));
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("weight_perceptual", self.weight_perceptual),
            ("weight_l1", self.weight_l1),
            ("weight_adversarial", self.weight_adversarial),
            ("weight_cycle", self.weight_cycle),
        ] {
            if v < 0.0 {
                return err(format!("{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Every sub-term of one training step, all finite scalars.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub generator_total: f64,
    pub segmentation_total: f64,
    pub disc_image: f64,
    pub disc_mask: f64,
    pub adv_image: f64,
    pub adv_mask: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub cycle_mask: f64,
    pub cycle_image: f64,
    pub focal_ce: f64,
    pub tversky: f64,
}

impl LossReport {
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("generator_total", self.generator_total),
            ("segmentation_total", self.segmentation_total),
            ("disc_image", self.disc_image),
            ("disc_mask", self.disc_mask),
            ("adv_image", self.adv_image),
            ("adv_mask", self.adv_mask),
            ("l1", self.l1),
            ("perceptual", self.perceptual),
            ("cycle_mask", self.cycle_mask),
            ("cycle_image", self.cycle_image),
            ("focal_ce", self.focal_ce),
            ("tversky", self.tversky),
        ]
    }

    /// Name of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.entries()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

fn check_shapes(
    tape: &Tape,
    a: VarId,
    b: VarId,
    what: &'static str,
) -> Result<(), LossError> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(LossError::ShapeMismatch {
            what,
            a: sa.to_vec(),
            b: sb.to_vec(),
        });
    }
    Ok(())
}

/// Mean over pixels of -alpha_t (1 - p_t)^gamma log(p_t), with
/// p_t = pred on foreground and 1 - pred on background, clamped away from
/// {0, 1} before the logarithm.
pub fn focal_ce(
    tape: &mut Tape,
    pred: VarId,
    target: VarId,
    alpha_t: f64,
    gamma: f64,
) -> Result<VarId, LossError> {
    check_shapes(tape, pred, target, "focal_ce pred/target")?;
    // p_t = t*p + (1-t)*(1-p) = 1 - t - p + 2tp
    let tp = tape.mul(target, pred);
    let tp2 = tape.scale(tp, 2.0);
    let tplusp = tape.add(target, pred);
    let diff = tape.sub(tp2, tplusp);
    let pt = tape.add_scalar(diff, 1.0);
    let pt = tape.clamp(pt, PROB_EPS, 1.0 - PROB_EPS);
    let log_pt = tape.ln(pt);
    let one_minus = tape.neg(pt);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let focal = tape.powf(one_minus, gamma);
    let prod = tape.mul(focal, log_pt);
    let per_pixel = tape.scale(prod, -alpha_t);
    Ok(tape.mean(per_pixel))
}

/// (1 - (TP + smooth)/(TP + alpha FP + beta FN + smooth))^tversky_gamma with
/// soft (probabilistic) counts.
pub fn tversky_loss(
    tape: &mut Tape,
    pred: VarId,
    target: VarId,
    alpha: f64,
    beta: f64,
    tversky_gamma: f64,
    smooth: f64,
) -> Result<VarId, LossError> {
    check_shapes(tape, pred, target, "tversky pred/target")?;
    let tp_map = tape.mul(pred, target);
    let tp = tape.sum(tp_map);
    let not_target = {
        let n = tape.neg(target);
        tape.add_scalar(n, 1.0)
    };
    let fp_map = tape.mul(pred, not_target);
    let fp = tape.sum(fp_map);
    let not_pred = {
        let n = tape.neg(pred);
        tape.add_scalar(n, 1.0)
    };
    let fn_map = tape.mul(not_pred, target);
    let fn_ = tape.sum(fn_map);

    let num = tape.add_scalar(tp, smooth);
    let fp_w = tape.scale(fp, alpha);
    let fn_w = tape.scale(fn_, beta);
    let den = tape.add(tp, fp_w);
    let den = tape.add(den, fn_w);
    let den = tape.add_scalar(den, smooth);
    let ti = tape.div(num, den);
    let one_minus = tape.neg(ti);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    if tversky_gamma == 1.0 {
        Ok(one_minus)
    } else {
        Ok(tape.powf(one_minus, tversky_gamma))
    }
}

/// lambda1 * focal_ce + lambda2 * tversky.
pub fn segmentation_loss(
    tape: &mut Tape,
    pred: VarId,
    target: VarId,
    config: &LossConfig,
) -> Result<VarId, LossError> {
    let (l, _, _) = segmentation_loss_terms(tape, pred, target, config)?;
    Ok(l)
}

/// Combined loss plus both unweighted sub-terms (for reporting).
pub fn segmentation_loss_terms(
    tape: &mut Tape,
    pred: VarId,
    target: VarId,
    config: &LossConfig,
) -> Result<(VarId, VarId, VarId), LossError> {
    let fce = focal_ce(tape, pred, target, config.alpha_t, config.gamma)?;
    let tv = tversky_loss(
        tape,
        pred,
        target,
        config.tversky_alpha,
        config.tversky_beta,
        config.tversky_gamma,
        config.smooth,
    )?;
    let a = tape.scale(fce, config.lambda1);
    let b = tape.scale(tv, config.lambda2);
    Ok((tape.add(a, b), fce, tv))
}

/// Mean absolute pixel difference.
pub fn l1_loss(tape: &mut Tape, generated: VarId, real: VarId) -> Result<VarId, LossError> {
    check_shapes(tape, generated, real, "l1 generated/real")?;
    let d = tape.sub(generated, real);
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Mean of (score - target_label)^2 over the score map.
pub fn lsgan_loss(tape: &mut Tape, scores: VarId, target_label: f64) -> VarId {
    let d = tape.add_scalar(scores, -target_label);
    let sq = tape.mul(d, d);
    tape.mean(sq)
}

/// Mean absolute feature difference, summed over the selected layers of a
/// frozen extractor. Inputs are [C,H,W] variables with the extractor's input
/// channel count.
pub fn perceptual_loss(
    tape: &mut Tape,
    generated: VarId,
    real: VarId,
    extractor: &crate::evaluation::FeatureExtractor,
    layer_set: &[usize],
) -> Result<VarId, LossError> {
    check_shapes(tape, generated, real, "perceptual generated/real")?;
    if layer_set.is_empty() || layer_set.iter().any(|&l| l >= extractor.layers.len()) {
        return Err(LossError::InvalidConfig(format!(
            "layer_set {layer_set:?} out of range for a {}-layer extractor",
            extractor.layers.len()
        )));
    }
    let fg = extractor.forward_layers(tape, generated);
    let fr = extractor.forward_layers(tape, real);
    let mut total = None;
    for &l in layer_set {
        let d = tape.sub(fg[l], fr[l]);
        let a = tape.abs(d);
        let m = tape.mean(a);
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m),
        });
    }
    Ok(total.unwrap())
}
