//! Turning raw head outputs into scored, suppressed detections.

use super::model::ToyModel;
use super::ToyError;
use crate::datamodel::{ArtifactClass, Dataset, Detection, FrameRecord, Label, LabelMode};
use crate::geometry::{iou, ImageSize};
use crate::loss::{decode_offsets, PROB_EPS};

use super::scene::SyntheticScene;

/// Greedy non-maximum suppression within each label: detections are taken
/// in descending score order (ties keep input order) and a detection is
/// dropped when its IoU with a kept detection of the same label exceeds
/// `iou_threshold`.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.label == d.label && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Decoded detections with score at least `score_threshold`, clipped to the
/// grid and suppressed per label. Scores are capped just below 1, so a
/// threshold of 1 returns nothing.
pub fn predict_boxes(
    m: &ToyModel,
    grid: &[f64],
    side: usize,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>, ToyError> {
    let fwd = m.forward(grid, side)?;
    let image = ImageSize::new(side as u32, side as u32)
        .map_err(|e| ToyError::Shape(e.to_string()))?;
    let anchors = m.arch.anchors();
    let mut raw = Vec::new();
    let mut emit = |probs: Vec<f64>, k: usize, label_of: &dyn Fn(usize) -> Label| {
        if k == 0 {
            return;
        }
        for (idx, q) in probs.into_iter().enumerate() {
            let score = q.min(1.0 - PROB_EPS);
            if score < score_threshold {
                continue;
            }
            let a = idx / k;
            let o = &fwd.offsets[a * 4..a * 4 + 4];
            let Some(b) = decode_offsets(&anchors[a], [o[0], o[1], o[2], o[3]])
                .and_then(|b| b.clip_to(image))
            else {
                continue;
            };
            raw.push(Detection::new(b, score, label_of(idx % k)).expect("score in [0, 1]"));
        }
    };
    let artifact = |j: usize| {
        Label::Artifact(ArtifactClass::from_code(j as u8).expect("artifact output below 6"))
    };
    match m.arch.mode {
        LabelMode::TwoHead => {
            emit(fwd.polyp_probs(), 1, &|_| Label::Polyp);
            emit(fwd.artifact_probs(), m.arch.artifact_outputs(), &artifact);
        }
        LabelMode::FlatMultiClass => {
            emit(fwd.polyp_probs(), m.arch.polyp_outputs(), &|j| {
                if j == 0 {
                    Label::Polyp
                } else {
                    artifact(j - 1)
                }
            });
        }
    }
    Ok(nms(raw, nms_iou))
}

/// Runs [`predict_boxes`] on every scene. Each frame keeps the scene's
/// ground-truth polyps; predicted polyps go to `pred_polyps` and predicted
/// artifacts to `artifacts`.
pub fn predict_dataset(
    m: &ToyModel,
    name: &str,
    scenes: &[SyntheticScene],
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Dataset, ToyError> {
    let mut frames = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let dets = predict_boxes(m, &s.grid, s.size, score_threshold, nms_iou)?;
        let mut f = FrameRecord::new(super::scene_frame_id(i), s.image_size());
        f.gt_polyps = s.gt_polyps.clone();
        let (polyps, artifacts): (Vec<_>, Vec<_>) =
            dets.into_iter().partition(|d| d.label == Label::Polyp);
        f.pred_polyps = polyps;
        f.artifacts = artifacts;
        frames.push(f);
    }
    Dataset::new(name, frames).map_err(|e| ToyError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::super::model::Architecture;
    use super::*;
    use crate::geometry::BBox;

    fn det(x: f64, score: f64, label: Label) -> Detection {
        Detection::new(BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(), score, label).unwrap()
    }

    #[test]
    fn nms_keeps_best_of_overlapping_pair() {
        // IoU of [0,10] and [0.5,10.5] widths: 9.5 / 10.5 > 0.9
        let kept = nms(vec![det(0.5, 0.6, Label::Polyp), det(0.0, 0.9, Label::Polyp)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_is_per_class() {
        let b = Label::Artifact(ArtifactClass::Bubbles);
        let kept = nms(vec![det(0.0, 0.9, Label::Polyp), det(0.0, 0.8, b)], 0.5);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn threshold_one_is_empty() {
        let mut m = ToyModel::zeros(Architecture::new(LabelMode::TwoHead)).unwrap();
        let n = m.params.polyp.len();
        for v in &mut m.params.polyp[n - 3..] {
            *v = 1e3;
        }
        let grid = vec![0.5; 64 * 64];
        assert!(predict_boxes(&m, &grid, 64, 1.0, 0.5).unwrap().is_empty());
        let some = predict_boxes(&m, &grid, 64, 0.9, 0.5).unwrap();
        assert!(!some.is_empty());
        assert!(some.iter().all(|d| d.label == Label::Polyp));
    }

    #[test]
    fn boxes_are_clipped() {
        let mut m = ToyModel::zeros(Architecture::new(LabelMode::FlatMultiClass)).unwrap();
        let n = m.params.polyp.len();
        for v in &mut m.params.polyp[n - 21..] {
            *v = 5.0;
        }
        let grid = vec![0.5; 64 * 64];
        let dets = predict_boxes(&m, &grid, 64, 0.5, 0.5).unwrap();
        assert!(!dets.is_empty());
        for d in dets {
            assert!(d.bbox.x_min() >= 0.0 && d.bbox.x_max() <= 64.0);
        }
    }
}
