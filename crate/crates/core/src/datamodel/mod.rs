//! Annotation data model: frames, datasets, labels and the dataset
//! construction steps used to build multi-task training sets.

mod fusion;
mod io;

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, ImageSize};

pub use fusion::{
    apply_label_spec, artifacts_per_image, class_weighting, merge_pseudo_labels, ClassWeights,
    LabelMode, LabeledDataset, MultiTaskLabelSpec,
};
pub use io::{
    dataset_from_csv, dataset_from_json, dataset_to_json, load_dataset, save_dataset, DatasetFormat,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {locus}: {reason}")]
    Parse { locus: String, reason: String },
    #[error("invalid record at {locus}: {reason}")]
    Invariant { locus: String, reason: String },
    #[error("frame '{frame_id}' is not present in the polyp dataset")]
    UnknownFrame { frame_id: String },
    #[error("configuration error: {0}")]
    Config(String),
}

/// Endoscopic artifact classes with their stable integer codes.
///
/// `Instrument` is accepted on ingestion but never takes part in analyses or
/// label specs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactClass {
    Blur = 0,
    Bubbles = 1,
    Contrast = 2,
    Specularity = 3,
    Saturation = 4,
    Misc = 5,
    Instrument = 6,
}

impl ArtifactClass {
    pub const ALL: [ArtifactClass; 7] = [
        ArtifactClass::Blur,
        ArtifactClass::Bubbles,
        ArtifactClass::Contrast,
        ArtifactClass::Specularity,
        ArtifactClass::Saturation,
        ArtifactClass::Misc,
        ArtifactClass::Instrument,
    ];

    /// The six classes that take part in analyses, in code order.
    pub const ANALYSIS: [ArtifactClass; 6] = [
        ArtifactClass::Blur,
        ArtifactClass::Bubbles,
        ArtifactClass::Contrast,
        ArtifactClass::Specularity,
        ArtifactClass::Saturation,
        ArtifactClass::Misc,
    ];

    /// Row/column order used by the report tables.
    pub const TABLE_ORDER: [ArtifactClass; 6] = [
        ArtifactClass::Bubbles,
        ArtifactClass::Blur,
        ArtifactClass::Misc,
        ArtifactClass::Specularity,
        ArtifactClass::Saturation,
        ArtifactClass::Contrast,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(usize::from(code)).copied()
    }

    pub fn is_analyzed(self) -> bool {
        self != ArtifactClass::Instrument
    }

    pub fn name(self) -> &'static str {
        match self {
            ArtifactClass::Blur => "blur",
            ArtifactClass::Bubbles => "bubbles",
            ArtifactClass::Contrast => "contrast",
            ArtifactClass::Specularity => "specularity",
            ArtifactClass::Saturation => "saturation",
            ArtifactClass::Misc => "misc",
            ArtifactClass::Instrument => "instrument",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let lower = name.trim().to_ascii_lowercase();
        let lower = lower.trim_end_matches('.');
        Self::ALL.into_iter().find(|c| c.name() == lower)
    }
}

impl fmt::Display for ArtifactClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Serialized as `"polyp"` or the artifact class name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Label {
    Polyp,
    Artifact(ArtifactClass),
}

impl Label {
    pub fn from_name(name: &str) -> Option<Self> {
        if name.trim().eq_ignore_ascii_case("polyp") {
            Some(Label::Polyp)
        } else {
            ArtifactClass::from_name(name).map(Label::Artifact)
        }
    }
}

impl From<Label> for String {
    fn from(l: Label) -> Self {
        l.to_string()
    }
}

impl TryFrom<String> for Label {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Label::from_name(&s).ok_or_else(|| format!("unknown label '{s}'"))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Polyp => f.write_str("polyp"),
            Label::Artifact(c) => c.fmt(f),
        }
    }
}

/// A scored, labeled box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub label: Label,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, label: Label) -> Result<Self, DataError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(DataError::Invariant {
                locus: "detection".into(),
                reason: format!("score {score} outside [0, 1]"),
            });
        }
        Ok(Self { bbox, score, label })
    }

    pub fn polyp(bbox: BBox, score: f64) -> Result<Self, DataError> {
        Self::new(bbox, score, Label::Polyp)
    }

    pub fn artifact(bbox: BBox, score: f64, class: ArtifactClass) -> Result<Self, DataError> {
        Self::new(bbox, score, Label::Artifact(class))
    }

    pub fn artifact_class(&self) -> Option<ArtifactClass> {
        match self.label {
            Label::Artifact(c) => Some(c),
            Label::Polyp => None,
        }
    }
}

/// Ground truth, polyp predictions and artifact boxes for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: String,
    pub image: ImageSize,
    pub gt_polyps: Vec<BBox>,
    pub pred_polyps: Vec<Detection>,
    pub artifacts: Vec<Detection>,
}

impl FrameRecord {
    pub fn new(frame_id: impl Into<String>, image: ImageSize) -> Self {
        Self {
            frame_id: frame_id.into(),
            image,
            gt_polyps: Vec::new(),
            pred_polyps: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// Artifact boxes of `class` with score at or above `min_score`.
    pub fn artifact_boxes(&self, class: ArtifactClass, min_score: f64) -> Vec<BBox> {
        self.artifacts
            .iter()
            .filter(|d| d.label == Label::Artifact(class) && d.score >= min_score)
            .map(|d| d.bbox)
            .collect()
    }

    fn check(&self, locus: &str) -> Result<(), DataError> {
        for (i, d) in self.pred_polyps.iter().enumerate() {
            if d.label != Label::Polyp {
                return Err(DataError::Invariant {
                    locus: format!("{locus}.pred_polyps[{i}]"),
                    reason: format!("expected a polyp label, found {}", d.label),
                });
            }
        }
        for (i, d) in self.artifacts.iter().enumerate() {
            if d.artifact_class().is_none() {
                return Err(DataError::Invariant {
                    locus: format!("{locus}.artifacts[{i}]"),
                    reason: "expected an artifact label, found polyp".into(),
                });
            }
        }
        Ok(())
    }
}

/// Ordered collection of frames with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    frames: Vec<FrameRecord>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, frames: Vec<FrameRecord>) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(frames.len());
        for (i, f) in frames.iter().enumerate() {
            let locus = format!("frames[{i}] ('{}')", f.frame_id);
            if !seen.insert(f.frame_id.as_str()) {
                return Err(DataError::Invariant {
                    locus,
                    reason: "duplicate frame_id".into(),
                });
            }
            f.check(&locus)?;
        }
        Ok(Self {
            name: name.into(),
            frames,
        })
    }

    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            frames: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<FrameRecord> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, frame_id: &str) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    /// Applies `f` to every frame; frame ids must stay unique.
    pub fn map_frames(
        &self,
        f: impl FnMut(&FrameRecord) -> FrameRecord,
    ) -> Result<Dataset, DataError> {
        Dataset::new(self.name.clone(), self.frames.iter().map(f).collect())
    }
}
