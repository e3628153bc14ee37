//! Loss kernels and anchor target assignment for the multi-task detector.
//!
//! Every kernel returns its value together with the analytic derivative so
//! callers can backpropagate without an autodiff framework.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{ClassWeights, Label};
use crate::geometry::{iou, BBox};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;
/// Anchors with max IoU at or above this are foreground.
pub const FOREGROUND_IOU: f64 = 0.5;
/// Anchors with max IoU below this are background.
pub const BACKGROUND_IOU: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("probability {0} outside [0, 1]")]
    Domain(f64),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("no weight for class {0}")]
    MissingWeight(Label),
}

/// Focal loss parameters: focusing exponent `gamma` and foreground weight
/// `alpha` (background anchors are weighted by `1 - alpha`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl FocalParams {
    pub fn new(gamma: f64, alpha: f64) -> Result<Self, LossError> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(LossError::Config(format!("gamma must be finite and >= 0, got {gamma}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(LossError::Config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(Self { gamma, alpha })
    }
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.5,
            alpha: 0.25,
        }
    }
}

/// Focal loss of predicted probability `q` for binary target `y`, and its
/// derivative with respect to `q`.
///
/// With `q* = q` for `y = 1` and `1 - q` otherwise (`alpha*` likewise), the
/// loss is `-alpha* (1 - q*)^gamma ln q*`. Inside the clamped band the
/// derivative is that of the clamped function, i.e. zero.
pub fn focal_loss(q: f64, y: bool, p: FocalParams) -> Result<(f64, f64), LossError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(LossError::Domain(q));
    }
    let clamped = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let (qs, alpha_s, sign) = if y {
        (clamped, p.alpha, 1.0)
    } else {
        (1.0 - clamped, 1.0 - p.alpha, -1.0)
    };
    let one_minus = 1.0 - qs;
    let ln_q = qs.ln();
    let modulator = one_minus.powf(p.gamma);
    let loss = -alpha_s * modulator * ln_q;

    let d_qs = if p.gamma == 0.0 {
        -alpha_s / qs
    } else {
        alpha_s * (p.gamma * one_minus.powf(p.gamma - 1.0) * ln_q - modulator / qs)
    };
    let grad = if clamped == q { sign * d_qs } else { 0.0 };
    Ok((loss, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Focal loss on a logit `z` (`q = sigmoid(z)`), returning the derivative
/// with respect to `z`.
pub fn focal_loss_logit(z: f64, y: bool, p: FocalParams) -> (f64, f64) {
    let q = sigmoid(z);
    let (loss, dq) = focal_loss(q, y, p).expect("sigmoid output lies in [0, 1]");
    (loss, dq * q * (1.0 - q))
}

/// Smooth L1 with transition at `|r| = 1`: `0.5 r^2` inside, `|r| - 0.5`
/// outside. Returns the loss and its derivative.
pub fn smooth_l1(r: f64) -> (f64, f64) {
    if r.abs() < 1.0 {
        (0.5 * r * r, r)
    } else {
        (r.abs() - 0.5, r.signum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assignment {
    /// Matched to ground truth `gt` with class index `class`.
    Foreground { gt: usize, class: usize },
    Background,
    /// Between the IoU bands; contributes no classification loss.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets {
    pub assignments: Vec<Assignment>,
    /// Regression offsets `(dx, dy, dw, dh)` for foreground anchors.
    pub offsets: Vec<Option<[f64; 4]>>,
    pub max_iou: Vec<f64>,
}

impl AnchorTargets {
    pub fn num_foreground(&self) -> usize {
        self.assignments
            .iter()
            .filter(|a| matches!(a, Assignment::Foreground { .. }))
            .count()
    }
}

/// Offsets of `gt` relative to `anchor`: center shift in anchor units and
/// log size ratios.
pub fn encode_offsets(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    [
        (gx - ax) / anchor.width(),
        (gy - ay) / anchor.height(),
        (gt.width() / anchor.width()).ln(),
        (gt.height() / anchor.height()).ln(),
    ]
}

/// Inverse of [`encode_offsets`]. `None` if the decoded box is degenerate.
pub fn decode_offsets(anchor: &BBox, t: [f64; 4]) -> Option<BBox> {
    let (ax, ay) = anchor.center();
    let cx = ax + t[0] * anchor.width();
    let cy = ay + t[1] * anchor.height();
    // cap the log-ratio so untrained heads cannot overflow
    let w = anchor.width() * t[2].min(8.0).exp();
    let h = anchor.height() * t[3].min(8.0).exp();
    BBox::from_center(cx, cy, w, h).ok()
}

/// Assigns each anchor to the ground truth of highest IoU using the
/// foreground/background IoU bands. Ties go to the earlier ground truth.
pub fn assign_anchors(anchors: &[BBox], gts: &[(BBox, usize)]) -> AnchorTargets {
    let mut assignments = Vec::with_capacity(anchors.len());
    let mut offsets = Vec::with_capacity(anchors.len());
    let mut max_iou = Vec::with_capacity(anchors.len());
    for a in anchors {
        let best = gts
            .iter()
            .enumerate()
            .map(|(i, (g, _))| (i, iou(a, g)))
            .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((i, v)),
            });
        let (assignment, offset, m) = match best {
            Some((i, v)) if v >= FOREGROUND_IOU => (
                Assignment::Foreground {
                    gt: i,
                    class: gts[i].1,
                },
                Some(encode_offsets(a, &gts[i].0)),
                v,
            ),
            Some((_, v)) if v < BACKGROUND_IOU => (Assignment::Background, None, v),
            None => (Assignment::Background, None, 0.0),
            Some((_, v)) => (Assignment::Ignored, None, v),
        };
        assignments.push(assignment);
        offsets.push(offset);
        max_iou.push(m);
    }
    AnchorTargets {
        assignments,
        offsets,
        max_iou,
    }
}

/// Relative weights of the regression, artifact and polyp loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub reg: f64,
    pub art: f64,
    pub pol: f64,
}

impl TaskWeights {
    pub fn new(reg: f64, art: f64, pol: f64) -> Self {
        Self { reg, art, pol }
    }
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal: FocalParams,
    pub task_weights: TaskWeights,
    /// Per-class weights for the flat multi-class head.
    pub class_weights: Option<ClassWeights>,
    /// Coefficient of the squared-norm weight regularizer.
    pub reg_coeff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal: FocalParams::default(),
            task_weights: TaskWeights::default(),
            class_weights: None,
            reg_coeff: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        FocalParams::new(self.focal.gamma, self.focal.alpha)?;
        let w = self.task_weights;
        if [w.reg, w.art, w.pol].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LossError::Config("task weights must be finite and >= 0".into()));
        }
        if w.reg == 0.0 && w.art == 0.0 && w.pol == 0.0 {
            return Err(LossError::Config("at least one task weight must be positive".into()));
        }
        if !self.reg_coeff.is_finite() || self.reg_coeff < 0.0 {
            return Err(LossError::Config("regularizer coefficient must be >= 0".into()));
        }
        Ok(())
    }
}

/// `w_pol * polyp + w_art * artifact + w_reg * reg + lambda * regularizer`.
pub fn composite_loss(
    polyp_cls_loss: f64,
    artifact_cls_loss: f64,
    reg_loss: f64,
    regularizer_value: f64,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    cfg.validate()?;
    let w = cfg.task_weights;
    Ok(w.pol * polyp_cls_loss
        + w.art * artifact_cls_loss
        + w.reg * reg_loss
        + cfg.reg_coeff * regularizer_value)
}

/// `sum_c weight(c) * loss(c)`.
pub fn weighted_class_loss(
    per_class_losses: &BTreeMap<Label, f64>,
    weights: &ClassWeights,
) -> Result<f64, LossError> {
    per_class_losses.iter().try_fold(0.0, |acc, (label, loss)| {
        let w = weights.get(*label).ok_or(LossError::MissingWeight(*label))?;
        Ok(acc + w * loss)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{class_weighting, ArtifactClass};

    #[test]
    fn focal_hand_values() {
        let ce = FocalParams::new(0.0, 0.5).unwrap();
        let (l, _) = focal_loss(0.5, true, ce).unwrap();
        assert!((l - 0.346574).abs() < 1e-6);

        let p = FocalParams::new(2.0, 0.25).unwrap();
        let (l1, _) = focal_loss(0.5, true, p).unwrap();
        assert!((l1 - 0.043322).abs() < 1e-6);
        let (l0, _) = focal_loss(0.5, false, p).unwrap();
        assert!((l0 - 0.129965).abs() < 1e-6);
    }

    #[test]
    fn focal_domain_and_clamp() {
        let p = FocalParams::default();
        assert_eq!(focal_loss(1.5, true, p), Err(LossError::Domain(1.5)));
        assert_eq!(focal_loss(-0.1, true, p), Err(LossError::Domain(-0.1)));
        let (l, g) = focal_loss(0.0, true, p).unwrap();
        assert!(l.is_finite() && l > 0.0);
        assert_eq!(g, 0.0);
        let (l, _) = focal_loss(1.0, true, p).unwrap();
        assert!((0.0..1e-12).contains(&l));
    }

    #[test]
    fn focal_params_validation() {
        assert!(FocalParams::new(-1.0, 0.25).is_err());
        assert!(FocalParams::new(2.0, 0.0).is_err());
        assert!(FocalParams::new(2.0, 1.0).is_err());
        assert!(FocalParams::new(f64::INFINITY, 0.5).is_err());
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), (0.0, 0.0));
        assert_eq!(smooth_l1(0.5).0, 0.125);
        assert_eq!(smooth_l1(2.0), (1.5, 1.0));
        assert_eq!(smooth_l1(-2.0), (1.5, -1.0));
    }

    #[test]
    fn anchor_bands() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        // identical anchor
        let t = assign_anchors(&[g], &[(g, 3)]);
        assert_eq!(t.assignments[0], Assignment::Foreground { gt: 0, class: 3 });
        assert_eq!(t.offsets[0], Some([0.0, 0.0, 0.0, 0.0]));
        // IoU 0.45: 10x10 vs 10x4.5 inside
        let a = BBox::new(0.0, 0.0, 10.0, 4.5).unwrap();
        let t = assign_anchors(&[a], &[(g, 0)]);
        assert!((t.max_iou[0] - 0.45).abs() < 1e-12);
        assert_eq!(t.assignments[0], Assignment::Ignored);
        // no gts
        let t = assign_anchors(&[a, g], &[]);
        assert!(t.assignments.iter().all(|a| *a == Assignment::Background));
    }

    #[test]
    fn offsets_round_trip() {
        let a = BBox::new(4.0, 4.0, 20.0, 20.0).unwrap();
        let g = BBox::new(6.0, 3.0, 25.0, 18.0).unwrap();
        let back = decode_offsets(&a, encode_offsets(&a, &g)).unwrap();
        for (x, y) in back.to_array().iter().zip(g.to_array()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_examples() {
        let mut cfg = LossConfig::default();
        assert_eq!(composite_loss(2.0, 3.0, 4.0, 0.0, &cfg).unwrap(), 9.0);
        cfg.task_weights = TaskWeights::new(1.0, 1.0, 20.0);
        assert_eq!(composite_loss(1.0, 1.0, 1.0, 0.0, &cfg).unwrap(), 22.0);
        assert_eq!(composite_loss(0.0, 0.0, 0.0, 0.0, &cfg).unwrap(), 0.0);
        cfg.reg_coeff = 0.5;
        assert_eq!(composite_loss(0.0, 0.0, 0.0, 4.0, &cfg).unwrap(), 2.0);
        cfg.task_weights = TaskWeights::new(0.0, 0.0, 0.0);
        assert!(matches!(
            composite_loss(1.0, 1.0, 1.0, 0.0, &cfg),
            Err(LossError::Config(_))
        ));
    }

    #[test]
    fn weighted_class_examples() {
        let w = class_weighting(Some(0.75), &ArtifactClass::ANALYSIS).unwrap();
        let mut losses = BTreeMap::from([(Label::Polyp, 1.0)]);
        for c in ArtifactClass::ANALYSIS {
            losses.insert(Label::Artifact(c), 1.0);
        }
        assert!((weighted_class_loss(&losses, &w).unwrap() - 1.0).abs() < 1e-12);

        let uniform = class_weighting(None, &ArtifactClass::ANALYSIS).unwrap();
        let vals: Vec<f64> = (0..7).map(f64::from).collect();
        let losses: BTreeMap<Label, f64> = uniform.labels().zip(vals.iter().copied()).collect();
        let mean = vals.iter().sum::<f64>() / 7.0;
        assert!((weighted_class_loss(&losses, &uniform).unwrap() - mean).abs() < 1e-12);

        let blur_only = class_weighting(Some(0.5), &[ArtifactClass::Blur]).unwrap();
        let losses = BTreeMap::from([(Label::Artifact(ArtifactClass::Misc), 1.0)]);
        assert_eq!(
            weighted_class_loss(&losses, &blur_only),
            Err(LossError::MissingWeight(Label::Artifact(ArtifactClass::Misc)))
        );
    }
}
