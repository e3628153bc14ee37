//! Artifact-effect analyses over annotated datasets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{ArtifactClass, Dataset, FrameRecord};
use crate::evaluation::{match_frame, MatchMode, MatchOutcome, Metrics};
use crate::geometry::{contains, iou, union_area_fraction, BBox};

/// Default score at which artifact detections are taken into account.
pub const DEFAULT_ARTIFACT_THRESHOLD: f64 = 0.25;
/// Default score at which polyp detections are taken into account.
pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.5;
/// Boxes overlap when their IoU is strictly above this value.
pub const DEFAULT_OVERLAP_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("correlation needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("area threshold {value} for {class} outside [0, 1]")]
    BadThreshold { class: ArtifactClass, value: f64 },
}

/// When an artifact class counts as present in a frame.
///
/// A class is present when the union of its boxes covers more than the
/// class's area fraction of the image. A zero threshold means "at least one
/// box". Only artifact boxes scoring at least `min_score` are considered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceRule {
    thresholds: BTreeMap<ArtifactClass, f64>,
    pub min_score: f64,
}

impl Default for PresenceRule {
    fn default() -> Self {
        let thresholds = BTreeMap::from([
            (ArtifactClass::Blur, 0.50),
            (ArtifactClass::Specularity, 0.05),
            (ArtifactClass::Misc, 0.02),
            (ArtifactClass::Bubbles, 0.02),
            (ArtifactClass::Contrast, 0.0),
            (ArtifactClass::Saturation, 0.0),
        ]);
        Self {
            thresholds,
            min_score: DEFAULT_ARTIFACT_THRESHOLD,
        }
    }
}

impl PresenceRule {
    /// Rule with every class at threshold 0 (any box means present).
    pub fn any_box(min_score: f64) -> Self {
        Self {
            thresholds: ArtifactClass::ANALYSIS.iter().map(|c| (*c, 0.0)).collect(),
            min_score,
        }
    }

    pub fn threshold(&self, class: ArtifactClass) -> f64 {
        self.thresholds.get(&class).copied().unwrap_or(0.0)
    }

    pub fn set_threshold(&mut self, class: ArtifactClass, value: f64) -> Result<(), AnalysisError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(AnalysisError::BadThreshold { class, value });
        }
        self.thresholds.insert(class, value);
        Ok(())
    }

    pub fn with_threshold(mut self, class: ArtifactClass, value: f64) -> Result<Self, AnalysisError> {
        self.set_threshold(class, value)?;
        Ok(self)
    }
}

pub fn artifact_present(frame: &FrameRecord, class: ArtifactClass, rule: &PresenceRule) -> bool {
    let boxes = frame.artifact_boxes(class, rule.min_score);
    let t = rule.threshold(class);
    if t == 0.0 {
        !boxes.is_empty()
    } else {
        union_area_fraction(&boxes, frame.image) > t
    }
}

/// Present-minus-absent metric differences, in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDiff {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub f2: f64,
}

impl ScoreDiff {
    fn between(present: &Metrics, absent: &Metrics) -> Self {
        Self {
            precision: 100.0 * (present.precision - absent.precision),
            recall: 100.0 * (present.recall - absent.recall),
            f1: 100.0 * (present.f1 - absent.f1),
            f2: 100.0 * (present.f2 - absent.f2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceRow {
    pub class: ArtifactClass,
    pub present_frames: usize,
    pub absent_frames: usize,
    /// Share of frames where the class is present, in [0, 1].
    pub frequency: f64,
    pub present: Metrics,
    pub absent: Metrics,
    pub diff: ScoreDiff,
    /// One of the two splits is empty; differences are not meaningful.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceReport {
    pub total_frames: usize,
    /// Rows in table order (bubbles, blur, misc, specularity, saturation, contrast).
    pub rows: Vec<PresenceRow>,
}

/// Splits frames by artifact presence per class and compares strict-mode
/// polyp detection metrics between the splits.
pub fn presence_analysis(d: &Dataset, rule: &PresenceRule, det_threshold: f64) -> PresenceReport {
    let outcomes: Vec<MatchOutcome> = d
        .frames()
        .iter()
        .map(|f| match_frame(&f.gt_polyps, &f.pred_polyps, det_threshold, MatchMode::Strict))
        .collect();

    let rows = ArtifactClass::TABLE_ORDER
        .iter()
        .map(|&class| {
            let mut present = Vec::new();
            let mut absent = Vec::new();
            for (f, o) in d.frames().iter().zip(&outcomes) {
                if artifact_present(f, class, rule) {
                    present.push(o);
                } else {
                    absent.push(o);
                }
            }
            let pm = Metrics::from_outcomes(present.iter().copied()).expect("single mode");
            let am = Metrics::from_outcomes(absent.iter().copied()).expect("single mode");
            PresenceRow {
                class,
                present_frames: present.len(),
                absent_frames: absent.len(),
                frequency: if d.is_empty() {
                    0.0
                } else {
                    present.len() as f64 / d.len() as f64
                },
                diff: ScoreDiff::between(&pm, &am),
                present: pm,
                absent: am,
                degenerate: present.is_empty() || absent.is_empty(),
            }
        })
        .collect();

    PresenceReport {
        total_frames: d.len(),
        rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// IoU with the artifact box above the overlap threshold.
    Overlap,
    /// The artifact box lies fully inside the polyp box.
    Contains,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolypCategory {
    GroundTruth,
    TruePositive,
    FalsePositive,
    FalseNegative,
}

impl PolypCategory {
    pub const ALL: [PolypCategory; 4] = [
        PolypCategory::GroundTruth,
        PolypCategory::TruePositive,
        PolypCategory::FalsePositive,
        PolypCategory::FalseNegative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolypCategory::GroundTruth => "ground-truth",
            PolypCategory::TruePositive => "true positives",
            PolypCategory::FalsePositive => "false positives",
            PolypCategory::FalseNegative => "false negatives",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationConfig {
    pub relation: Relation,
    pub iou_threshold: f64,
    pub artifact_threshold: f64,
    pub det_threshold: f64,
    pub mode: MatchMode,
}

impl RelationConfig {
    pub fn new(relation: Relation) -> Self {
        Self {
            relation,
            iou_threshold: DEFAULT_OVERLAP_IOU,
            artifact_threshold: DEFAULT_ARTIFACT_THRESHOLD,
            det_threshold: DEFAULT_DETECTION_THRESHOLD,
            mode: MatchMode::Analysis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRow {
    pub category: PolypCategory,
    /// Number of polyp boxes in this category.
    pub frequency: usize,
    /// Boxes related to at least one artifact of any analysis class.
    pub any: usize,
    /// Boxes related per class, in table order.
    pub per_class: [usize; 6],
}

fn share(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

impl RelationRow {
    pub fn any_share(&self) -> f64 {
        share(self.any, self.frequency)
    }

    pub fn class_share(&self, class: ArtifactClass) -> f64 {
        ArtifactClass::TABLE_ORDER
            .iter()
            .position(|c| *c == class)
            .map(|i| share(self.per_class[i], self.frequency))
            .unwrap_or(0.0)
    }

    /// Shares in table order.
    pub fn shares(&self) -> [f64; 6] {
        self.per_class.map(|c| share(c, self.frequency))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationReport {
    pub config: RelationConfig,
    /// Rows in category order (ground truth, TP, FP, FN).
    pub rows: Vec<RelationRow>,
}

impl RelationReport {
    pub fn row(&self, category: PolypCategory) -> &RelationRow {
        self.rows
            .iter()
            .find(|r| r.category == category)
            .expect("every category has a row")
    }
}

struct Tally {
    frequency: usize,
    any: usize,
    per_class: [usize; 6],
}

impl Tally {
    fn new() -> Self {
        Self {
            frequency: 0,
            any: 0,
            per_class: [0; 6],
        }
    }

    fn add(&mut self, related: [bool; 6]) {
        self.frequency += 1;
        if related.iter().any(|r| *r) {
            self.any += 1;
        }
        for (n, r) in self.per_class.iter_mut().zip(related) {
            *n += usize::from(r);
        }
    }
}

/// For each polyp-box category, counts the boxes that overlap (or contain)
/// at least one artifact box of each class.
pub fn relation_analysis(d: &Dataset, cfg: &RelationConfig) -> RelationReport {
    let related = |polyp: &BBox, artifacts: &[Vec<BBox>; 6]| -> [bool; 6] {
        std::array::from_fn(|i| {
            artifacts[i].iter().any(|a| match cfg.relation {
                Relation::Overlap => iou(polyp, a) > cfg.iou_threshold,
                Relation::Contains => contains(polyp, a),
            })
        })
    };

    let mut tallies: [Tally; 4] = std::array::from_fn(|_| Tally::new());
    for f in d.frames() {
        let artifacts: [Vec<BBox>; 6] = std::array::from_fn(|i| {
            f.artifact_boxes(ArtifactClass::TABLE_ORDER[i], cfg.artifact_threshold)
        });
        let outcome = match_frame(&f.gt_polyps, &f.pred_polyps, cfg.det_threshold, cfg.mode);

        for g in &f.gt_polyps {
            tallies[0].add(related(g, &artifacts));
        }
        for &(d, _) in &outcome.tp_pairs {
            tallies[1].add(related(&f.pred_polyps[d].bbox, &artifacts));
        }
        for &d in &outcome.fp {
            tallies[2].add(related(&f.pred_polyps[d].bbox, &artifacts));
        }
        for &g in &outcome.fn_ {
            tallies[3].add(related(&f.gt_polyps[g], &artifacts));
        }
    }

    let rows = PolypCategory::ALL
        .iter()
        .zip(tallies)
        .map(|(&category, t)| RelationRow {
            category,
            frequency: t.frequency,
            any: t.any,
            per_class: t.per_class,
        })
        .collect();
    RelationReport { config: *cfg, rows }
}

/// Phi coefficient of two binary indicator series. `None` if either series
/// is constant.
pub fn phi(x: &[bool], y: &[bool]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "indicator series must have equal length");
    let (mut n11, mut n10, mut n01, mut n00) = (0u64, 0u64, 0u64, 0u64);
    for (&a, &b) in x.iter().zip(y) {
        match (a, b) {
            (true, true) => n11 += 1,
            (true, false) => n10 += 1,
            (false, true) => n01 += 1,
            (false, false) => n00 += 1,
        }
    }
    let row1 = (n11 + n10) as f64;
    let row0 = (n01 + n00) as f64;
    let col1 = (n11 + n01) as f64;
    let col0 = (n10 + n00) as f64;
    let denom = row1 * row0 * col1 * col0;
    if denom == 0.0 {
        return None;
    }
    let num = n11 as f64 * n00 as f64 - n10 as f64 * n01 as f64;
    Some((num / denom.sqrt()).clamp(-1.0, 1.0))
}

/// Pairwise phi coefficients of per-frame presence indicators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    /// Row/column classes, in table order.
    pub classes: [ArtifactClass; 6],
    /// `NaN` marks an undefined entry.
    pub values: [[f64; 6]; 6],
    /// Classes whose indicator never changes across frames.
    pub constant: Vec<ArtifactClass>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: ArtifactClass, b: ArtifactClass) -> Option<f64> {
        let i = self.classes.iter().position(|c| *c == a)?;
        let j = self.classes.iter().position(|c| *c == b)?;
        let v = self.values[i][j];
        (!v.is_nan()).then_some(v)
    }
}

pub fn correlation_matrix(
    d: &Dataset,
    rule: &PresenceRule,
) -> Result<CorrelationMatrix, AnalysisError> {
    if d.len() < 2 {
        return Err(AnalysisError::TooFewFrames(d.len()));
    }
    let classes = ArtifactClass::TABLE_ORDER;
    let indicators: Vec<Vec<bool>> = classes
        .iter()
        .map(|&c| d.frames().iter().map(|f| artifact_present(f, c, rule)).collect())
        .collect();

    let mut values = [[f64::NAN; 6]; 6];
    for i in 0..6 {
        values[i][i] = 1.0;
        for j in (i + 1)..6 {
            let v = phi(&indicators[i], &indicators[j]).unwrap_or(f64::NAN);
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    let constant = classes
        .iter()
        .zip(&indicators)
        .filter(|(_, ind)| ind.iter().all(|&b| b == ind[0]))
        .map(|(c, _)| *c)
        .collect();
    Ok(CorrelationMatrix {
        classes,
        values,
        constant,
    })
}
