//! Score, box and mask losses with analytic gradients.
//!
//! Reductions: the score loss is averaged over labelled (non-ignored)
//! anchors, the box loss over positive anchors and the mask loss over
//! positive response positions.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorLabel, AnchorLabels, BoxDelta};
use crate::model::{MaskLogits, ResponseGrad, ResponseMap};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Box loss weight.
    pub lambda1: f64,
    /// Mask loss weight.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 30.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidConfig(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

pub fn box_loss(pred: &BoxDelta, target: &BoxDelta) -> f64 {
    pred.as_array()
        .iter()
        .zip(target.as_array())
        .map(|(p, t)| smooth_l1(p - t))
        .sum()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Two-class cross-entropy over the object and background probabilities.
pub fn score_loss(p_obj: f64, p_back: f64, y_o: f64, y_b: f64) -> f64 {
    let (po, pb) = (clamp_prob(p_obj), clamp_prob(p_back));
    let (qo, qb) = (clamp_prob(1.0 - p_obj), clamp_prob(1.0 - p_back));
    -(y_o * po.ln() + (1.0 - y_o) * qo.ln() + y_b * pb.ln() + (1.0 - y_b) * qb.ln())
}

/// Derivative of [`score_loss`] with respect to `(p_obj, p_back)`, treating
/// the two arguments as independent; zero where a clamp is active.
fn score_loss_prob_grad(p_obj: f64, p_back: f64, y_o: f64, y_b: f64) -> (f64, f64) {
    let inside = |p: f64| (PROB_EPS..=1.0 - PROB_EPS).contains(&p);
    let term = |p: f64, y: f64| {
        let mut g = 0.0;
        if inside(p) {
            g -= y / p;
        }
        if inside(1.0 - p) {
            g += (1.0 - y) / (1.0 - p);
        }
        g
    };
    (term(p_obj, y_o), term(p_back, y_b))
}

/// Score loss of one anchor from its logits, with gradients on the logits.
fn score_loss_logits(s_obj: f64, s_back: f64, y_o: f64) -> (f64, f64, f64) {
    let m = s_obj.max(s_back);
    let (eo, eb) = ((s_obj - m).exp(), (s_back - m).exp());
    let (po, pb) = (eo / (eo + eb), eb / (eo + eb));
    let y_b = 1.0 - y_o;
    let loss = score_loss(po, pb, y_o, y_b);
    let (go, gb) = score_loss_prob_grad(po, pb, y_o, y_b);
    let ds = po * pb * (go - gb);
    (loss, ds, -ds)
}

/// Per-position mask supervision: `flags[n]` is `y_n`, and every positive
/// position carries a `size * size` target of +1 / -1 values.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTarget {
    pub size: usize,
    pub flags: Vec<bool>,
    pub positions: Vec<usize>,
    pub targets: Array2<f64>,
}

impl MaskTarget {
    pub fn validate(&self) -> Result<()> {
        let positives: Vec<usize> = (0..self.flags.len()).filter(|&i| self.flags[i]).collect();
        if positives != self.positions {
            return Err(Error::InvalidInput("mask targets must cover exactly the positive positions".into()));
        }
        if self.targets.dim() != (self.positions.len(), self.size * self.size) {
            return Err(Error::ShapeMismatch("mask target rows".into()));
        }
        if self.targets.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidInput("mask targets must be +1 or -1".into()));
        }
        Ok(())
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel logistic loss over positive positions, each weighted
/// `1 / (size * size)`, averaged over positives. Negative positions have
/// zero weight and their logits are never read.
pub fn mask_loss(logits: &MaskLogits, target: &MaskTarget) -> Result<f64> {
    mask_loss_with_grad(logits, target).map(|(l, _)| l)
}

/// [`mask_loss`] plus its gradient, one row per entry of `logits.positions`.
pub fn mask_loss_with_grad(logits: &MaskLogits, target: &MaskTarget) -> Result<(f64, Array2<f64>)> {
    if logits.size != target.size {
        return Err(Error::ShapeMismatch(format!(
            "mask logits are {0}x{0}, targets {1}x{1}",
            logits.size, target.size
        )));
    }
    let mut grad = Array2::zeros(logits.logits.dim());
    let n_pos = target.positions.len();
    if n_pos == 0 {
        return Ok((0.0, grad));
    }
    let pixels = (target.size * target.size) as f64;
    let norm = 1.0 / (pixels * n_pos as f64);
    let mut total = 0.0;
    for (t, &pos) in target.positions.iter().enumerate() {
        let row = logits
            .positions
            .iter()
            .position(|&p| p == pos)
            .ok_or_else(|| Error::InvalidInput(format!("no mask logits for positive position {pos}")))?;
        let m = logits.logits.row(row);
        let c = target.targets.row(t);
        let mut g = grad.row_mut(row);
        for ((gv, &mv), &cv) in g.iter_mut().zip(m.iter()).zip(c.iter()) {
            total += softplus(-cv * mv);
            *gv = -cv * sigmoid(-cv * mv) * norm;
        }
    }
    Ok((total * norm, grad))
}

/// Weighted sum of the component losses; the mask term only counts when enabled.
pub fn total_loss(score: f64, box_: f64, mask: Option<f64>, weights: &LossWeights, mask_enabled: bool) -> f64 {
    let mut total = score + weights.lambda1 * box_;
    if mask_enabled {
        total += weights.lambda2 * mask.unwrap_or(0.0);
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub score: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<f64>,
    pub total: f64,
}

/// Losses of a response map against anchor labels (and mask targets when
/// given), with the gradient of the weighted total.
pub fn response_loss(
    resp: &ResponseMap,
    labels: &AnchorLabels,
    mask_target: Option<&MaskTarget>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, ResponseGrad)> {
    if labels.labels.len() != resp.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} anchors",
            labels.labels.len(),
            resp.len()
        )));
    }
    let mut grad = ResponseGrad::zeros_like(resp);
    let k = resp.anchors;

    let labelled = labels.labels.iter().filter(|l| **l != AnchorLabel::Ignore).count();
    let mut score = 0.0;
    if labelled > 0 {
        let norm = 1.0 / labelled as f64;
        for (i, label) in labels.labels.iter().enumerate() {
            let y_o = match label {
                AnchorLabel::Positive => 1.0,
                AnchorLabel::Negative => 0.0,
                AnchorLabel::Ignore => continue,
            };
            let (so, sb) = resp.logits(i);
            let (l, dso, dsb) = score_loss_logits(so, sb, y_o);
            score += l * norm;
            let (pos, a) = (i / k, i % k);
            grad.scores[[pos, 2 * a]] += dso * norm;
            grad.scores[[pos, 2 * a + 1]] += dsb * norm;
        }
    }

    let positives: Vec<usize> = labels.positives().collect();
    let mut box_ = 0.0;
    if !positives.is_empty() {
        let norm = 1.0 / positives.len() as f64;
        for &i in &positives {
            let target = labels.targets[i].ok_or_else(|| Error::InvalidInput(format!("positive anchor {i} has no target")))?;
            let pred = resp.delta(i);
            box_ += box_loss(&pred, &target) * norm;
            let (pos, a) = (i / k, i % k);
            for (j, (p, t)) in pred.as_array().iter().zip(target.as_array()).enumerate() {
                grad.deltas[[pos, 4 * a + j]] += weights.lambda1 * smooth_l1_grad(p - t) * norm;
            }
        }
    }

    let mut mask = None;
    if let Some(target) = mask_target {
        let logits = resp
            .masks
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("mask targets given but the response has no mask logits".into()))?;
        let (l, g) = mask_loss_with_grad(logits, target)?;
        mask = Some(l);
        grad.masks = Some(g * weights.lambda2);
    }
    let total = total_loss(score, box_, mask, weights, mask_target.is_some());
    Ok((LossBreakdown { score, box_, mask, total }, grad))
}
