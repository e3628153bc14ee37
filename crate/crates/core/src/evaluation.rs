//! Centroid-criterion matching and detection metrics.
//!
//! A detection is a true positive when the center of its box lies inside a
//! ground-truth polyp box. Two counting modes exist:
//!
//! - [`MatchMode::Strict`]: each ground truth absorbs at most one detection;
//!   later detections of an already-found polyp are false positives.
//! - [`MatchMode::Analysis`]: duplicates are kept, so every detection whose
//!   center falls in any ground truth counts as a true positive.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::Detection;
use crate::geometry::{centroid_inside, BBox};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("cannot aggregate outcomes from different matching modes")]
    ModeMix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Strict,
    Analysis,
}

/// Per-frame matching result. Indices refer to the input slices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchOutcome {
    pub mode: MatchMode,
    /// `(detection index, gt index)` pairs, in matching order.
    pub tp_pairs: Vec<(usize, usize)>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

impl MatchOutcome {
    pub fn tp(&self) -> usize {
        self.tp_pairs.len()
    }

    /// Whether detection `det` was counted as a true positive.
    pub fn is_tp(&self, det: usize) -> bool {
        self.tp_pairs.iter().any(|&(d, _)| d == det)
    }
}

/// Indices of detections scoring at least `threshold`, by descending score
/// (ties keep input order).
pub fn ranked_detections(dets: &[Detection], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score >= threshold)
        .collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

pub fn match_frame(
    gt: &[BBox],
    dets: &[Detection],
    score_threshold: f64,
    mode: MatchMode,
) -> MatchOutcome {
    let order = ranked_detections(dets, score_threshold);
    let mut tp_pairs = Vec::new();
    let mut fp = Vec::new();
    let mut hit = vec![false; gt.len()];

    for d in order {
        let det_box = &dets[d].bbox;
        let found = match mode {
            MatchMode::Strict => {
                (0..gt.len()).find(|&g| !hit[g] && centroid_inside(det_box, &gt[g]))
            }
            MatchMode::Analysis => (0..gt.len()).find(|&g| centroid_inside(det_box, &gt[g])),
        };
        match found {
            Some(g) => {
                hit[g] = true;
                tp_pairs.push((d, g));
            }
            None => fp.push(d),
        }
    }

    let fn_ = match mode {
        MatchMode::Strict => (0..gt.len()).filter(|&g| !hit[g]).collect(),
        // a gt counts as found if any surviving centroid lies in it, even
        // when that detection was attributed to an earlier overlapping gt
        MatchMode::Analysis => (0..gt.len())
            .filter(|&g| {
                !tp_pairs
                    .iter()
                    .any(|&(d, _)| centroid_inside(&dets[d].bbox, &gt[g]))
            })
            .collect(),
    };

    MatchOutcome {
        mode,
        tp_pairs,
        fp,
        fn_,
    }
}

/// F-beta score; 0 when both precision and recall are 0.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Micro-aggregated detection metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self::with_scores(tp, fp, fn_, precision, recall)
    }

    /// Metrics from precision and recall alone (counts zero).
    pub fn from_scores(precision: f64, recall: f64) -> Self {
        Self::with_scores(0, 0, 0, precision, recall)
    }

    fn with_scores(tp: usize, fp: usize, fn_: usize, precision: f64, recall: f64) -> Self {
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: f_beta(precision, recall, 1.0),
            f2: f_beta(precision, recall, 2.0),
        }
    }

    /// Aggregates outcomes that all share one mode.
    pub fn from_outcomes<'a, I>(outcomes: I) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = &'a MatchOutcome>,
    {
        let mut mode = None;
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for o in outcomes {
            match mode {
                None => mode = Some(o.mode),
                Some(m) if m != o.mode => return Err(EvalError::ModeMix),
                Some(_) => {}
            }
            tp += o.tp();
            fp += o.fp.len();
            fn_ += o.fn_.len();
        }
        Ok(Self::from_counts(tp, fp, fn_))
    }
}

/// Shorthand for [`Metrics::from_outcomes`].
pub fn metrics(outcomes: &[MatchOutcome]) -> Result<Metrics, EvalError> {
    Metrics::from_outcomes(outcomes)
}
