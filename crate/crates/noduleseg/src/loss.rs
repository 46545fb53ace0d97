//! Loss configuration, the IoU-gated combination of Dice and weighted
//! cross entropy, and the gate state machine that drives it.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// How the Dice and cross-entropy terms are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossCombination {
    /// 0.5 * dice + 0.5 * (ce_weight * ce * gate). Default.
    Average,
    /// dice + ce_weight * ce * gate.
    Additive,
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub gate_iou_threshold: f64,
    pub gate_ema_decay: f64,
    pub dice_eps: f64,
    pub class_weights: Vec<f64>,
    pub combination: LossCombination,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ce_weight: 0.2,
            gate_iou_threshold: 0.45,
            gate_ema_decay: 0.9,
            dice_eps: 1e-6,
            class_weights: vec![1.0; 3],
            combination: LossCombination::Average,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ce_weight > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "ce_weight must be positive, got {}",
                self.ce_weight
            )));
        }
        if !(self.gate_iou_threshold > 0.0 && self.gate_iou_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gate_iou_threshold must lie in (0, 1), got {}",
                self.gate_iou_threshold
            )));
        }
        if !(self.gate_ema_decay >= 0.0 && self.gate_ema_decay < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gate_ema_decay must lie in [0, 1), got {}",
                self.gate_ema_decay
            )));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "dice_eps must be positive, got {}",
                self.dice_eps
            )));
        }
        if self.class_weights.is_empty()
            || self.class_weights.iter().any(|w| !w.is_finite() || *w <= 0.0)
        {
            return Err(Error::InvalidConfig(
                "class_weights must be nonempty, finite and positive".into(),
            ));
        }
        Ok(())
    }
}

/// Exponential moving average of training-batch hard IoU, with a
/// permanent latch once the threshold is reached.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GateState {
    pub ema_iou: f64,
    pub latched: bool,
}

impl GateState {
    /// 1.0 when open (classification loss active), 0.0 otherwise.
    pub fn factor(&self) -> f64 {
        if self.latched {
            1.0
        } else {
            0.0
        }
    }
}

/// w_c = total / (K * count_c), so the count-weighted mean of the
/// weights is exactly 1.
pub fn inverse_frequency_weights(class_counts: &[usize]) -> Result<Vec<f64>> {
    if class_counts.is_empty() {
        return Err(Error::DegenerateData("no classes".into()));
    }
    if let Some(c) = class_counts.iter().position(|&n| n == 0) {
        return Err(Error::DegenerateData(format!("class {} has zero samples", c)));
    }
    let total: usize = class_counts.iter().sum();
    let k = class_counts.len();
    Ok(class_counts
        .iter()
        .map(|&n| total as f64 / (k as f64 * n as f64))
        .collect())
}

/// Scalar-side combination, mirroring [`joint_loss_node`].
pub fn joint_loss(dice: f64, ce: f64, gate: &GateState, cfg: &LossConfig) -> f64 {
    let ce_term = cfg.ce_weight * ce * gate.factor();
    match cfg.combination {
        LossCombination::Average => 0.5 * dice + 0.5 * ce_term,
        LossCombination::Additive => dice + ce_term,
    }
}

/// Tape node for the combined loss. With the gate off the cross-entropy
/// coefficient is exactly zero, so its subgraph contributes exactly zero
/// gradient.
pub fn joint_loss_node<S: Scalar>(
    g: &mut Graph<S>,
    dice: Var,
    ce: Var,
    gate: &GateState,
    cfg: &LossConfig,
) -> Result<Var> {
    let ce_coeff = cfg.ce_weight * gate.factor();
    let (a, b) = match cfg.combination {
        LossCombination::Average => (0.5, 0.5 * ce_coeff),
        LossCombination::Additive => (1.0, ce_coeff),
    };
    g.affine_combine(&[(S::of_f64(a), dice), (S::of_f64(b), ce)])
}

/// Intersection over union of the thresholded prediction against a binary
/// target. Both masks empty counts as perfect agreement.
pub fn hard_iou<S: Scalar>(pred_probs: &Tensor<S>, target: &Tensor<S>, prob_threshold: f64) -> Result<f64> {
    if pred_probs.shape() != target.shape() {
        return Err(Error::InvalidShape(format!(
            "prediction shape {:?} vs target shape {:?}",
            pred_probs.shape(),
            target.shape()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, t) in pred_probs.data().iter().zip(target.data()) {
        let a = p.to_f64_lossy() > prob_threshold;
        let b = t.to_f64_lossy() > 0.5;
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// EMA update plus the permanent latch.
pub fn gate_update(state: GateState, batch_iou: f64, cfg: &LossConfig) -> GateState {
    let ema = cfg.gate_ema_decay * state.ema_iou + (1.0 - cfg.gate_ema_decay) * batch_iou;
    GateState {
        ema_iou: ema,
        latched: state.latched || ema >= cfg.gate_iou_threshold,
    }
}
