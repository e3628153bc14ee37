//! Pseudo-label fusion and multi-task label specs.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{ArtifactClass, DataError, Dataset, FrameRecord, Label};

/// Builds the fused multi-task dataset.
///
/// Every frame of `polyp_ds` keeps its polyp annotations; its artifacts are
/// replaced by the detections of the matching `artifact_ds` frame scoring at
/// least `threshold`. Frames absent from `artifact_ds` get no artifacts.
/// Scores of promoted detections are kept for provenance.
pub fn merge_pseudo_labels(
    polyp_ds: &Dataset,
    artifact_ds: &Dataset,
    threshold: f64,
) -> Result<Dataset, DataError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(DataError::Config(format!(
            "pseudo-label threshold {threshold} outside [0, 1]"
        )));
    }
    let known: HashSet<&str> = polyp_ds.frames().iter().map(|f| f.frame_id.as_str()).collect();
    if let Some(stray) = artifact_ds
        .frames()
        .iter()
        .find(|f| !known.contains(f.frame_id.as_str()))
    {
        return Err(DataError::UnknownFrame {
            frame_id: stray.frame_id.clone(),
        });
    }
    let by_id: HashMap<&str, &FrameRecord> = artifact_ds
        .frames()
        .iter()
        .map(|f| (f.frame_id.as_str(), f))
        .collect();

    polyp_ds.map_frames(|f| {
        let artifacts = by_id
            .get(f.frame_id.as_str())
            .map(|a| {
                a.artifacts
                    .iter()
                    .filter(|d| d.score >= threshold)
                    .copied()
                    .collect()
            })
            .unwrap_or_default();
        FrameRecord {
            artifacts,
            ..f.clone()
        }
    })
}

/// Mean number of artifact boxes per frame (0 for an empty dataset).
pub fn artifacts_per_image(d: &Dataset) -> f64 {
    if d.is_empty() {
        return 0.0;
    }
    let total: usize = d.frames().iter().map(|f| f.artifacts.len()).sum();
    total as f64 / d.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Separate polyp and artifact classification heads.
    TwoHead,
    /// One classification head over polyp plus artifact classes.
    FlatMultiClass,
}

/// Per-label classification weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(BTreeMap<Label, f64>);

impl ClassWeights {
    pub fn new(weights: BTreeMap<Label, f64>) -> Result<Self, DataError> {
        if weights.is_empty() {
            return Err(DataError::Config("empty class weight map".into()));
        }
        if let Some((l, w)) = weights.iter().find(|(_, w)| !(0.0..=1.0).contains(*w)) {
            return Err(DataError::Config(format!("weight {w} for {l} outside [0, 1]")));
        }
        let sum: f64 = weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!("class weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn get(&self, label: Label) -> Option<f64> {
        self.0.get(&label).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, f64)> + '_ {
        self.0.iter().map(|(l, w)| (*l, *w))
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.0.keys().copied()
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }
}

/// Polyp weight `polyp_share`, remainder split equally over `artifacts`.
/// `None` gives every label the same weight.
pub fn class_weighting(
    polyp_share: Option<f64>,
    artifacts: &[ArtifactClass],
) -> Result<ClassWeights, DataError> {
    let unique: BTreeSet<ArtifactClass> = artifacts.iter().copied().collect();
    if unique.is_empty() {
        return Err(DataError::Config("no artifact classes to weight".into()));
    }
    let n = unique.len() as f64;
    let (polyp, each) = match polyp_share {
        None => (1.0 / (n + 1.0), 1.0 / (n + 1.0)),
        Some(s) if s > 0.0 && s < 1.0 => (s, (1.0 - s) / n),
        Some(s) => {
            return Err(DataError::Config(format!(
                "polyp share {s} must lie strictly between 0 and 1"
            )))
        }
    };
    let mut map = BTreeMap::new();
    map.insert(Label::Polyp, polyp);
    for c in unique {
        map.insert(Label::Artifact(c), each);
    }
    ClassWeights::new(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskLabelSpec {
    pub mode: LabelMode,
    /// Score at which artifact detections are promoted to ground truth.
    pub artifact_threshold: f64,
    pub included_artifacts: BTreeSet<ArtifactClass>,
    pub class_weights: ClassWeights,
}

impl MultiTaskLabelSpec {
    pub fn new(
        mode: LabelMode,
        artifact_threshold: f64,
        included: &[ArtifactClass],
        polyp_share: Option<f64>,
    ) -> Result<Self, DataError> {
        let spec = Self {
            mode,
            artifact_threshold,
            included_artifacts: included.iter().copied().collect(),
            class_weights: class_weighting(polyp_share, included)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// All six analysis classes, uniform weights.
    pub fn all_classes(mode: LabelMode, artifact_threshold: f64) -> Self {
        Self::new(mode, artifact_threshold, &ArtifactClass::ANALYSIS, None)
            .expect("default spec is valid")
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.included_artifacts.is_empty() {
            return Err(DataError::Config(
                "included_artifacts must not be empty".into(),
            ));
        }
        if self.included_artifacts.contains(&ArtifactClass::Instrument) {
            return Err(DataError::Config(
                "instrument is not an analysis class".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.artifact_threshold) {
            return Err(DataError::Config(format!(
                "artifact threshold {} outside [0, 1]",
                self.artifact_threshold
            )));
        }
        let expected: BTreeSet<Label> = std::iter::once(Label::Polyp)
            .chain(self.included_artifacts.iter().map(|c| Label::Artifact(*c)))
            .collect();
        let got: BTreeSet<Label> = self.class_weights.labels().collect();
        if expected != got {
            return Err(DataError::Config(
                "class weights must cover exactly polyp plus the included artifacts".into(),
            ));
        }
        // re-check sum in case the label spec was deserialized
        ClassWeights::new(self.class_weights.0.clone()).map(|_| ())
    }

    /// Label space in head order: polyp first, then included artifacts by code.
    pub fn label_space(&self) -> Vec<Label> {
        std::iter::once(Label::Polyp)
            .chain(self.included_artifacts.iter().map(|c| Label::Artifact(*c)))
            .collect()
    }
}

/// A dataset restricted to a label spec.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dataset: Dataset,
    pub spec: MultiTaskLabelSpec,
}

impl LabeledDataset {
    /// Class index of `label` in the flat label space, `None` if excluded.
    pub fn flat_index(&self, label: Label) -> Option<usize> {
        self.spec.label_space().iter().position(|l| *l == label)
    }

    pub fn num_flat_classes(&self) -> usize {
        self.spec.included_artifacts.len() + 1
    }
}

/// Drops artifacts outside the spec's included classes. Polyp annotations
/// are never touched.
pub fn apply_label_spec(
    d: &Dataset,
    spec: &MultiTaskLabelSpec,
) -> Result<LabeledDataset, DataError> {
    spec.validate()?;
    let dataset = d.map_frames(|f| FrameRecord {
        artifacts: f
            .artifacts
            .iter()
            .filter(|a| {
                a.artifact_class()
                    .is_some_and(|c| spec.included_artifacts.contains(&c))
            })
            .copied()
            .collect(),
        ..f.clone()
    })?;
    Ok(LabeledDataset {
        dataset,
        spec: spec.clone(),
    })
}
