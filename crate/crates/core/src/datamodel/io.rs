//! Canonical JSON and CSV import.
//!
//! Canonical JSON (schema 1):
//!
//! ```text
//! { "frames": [ { "artifacts": [{"box": [x0,y0,x1,y1], "class": 0-6, "score": f}],
//!                 "frame_id": str, "gt_polyps": [[x0,y0,x1,y1]],
//!                 "height": int, "pred_polyps": [{"box": [...], "score": f}],
//!                 "width": int } ],
//!   "name": str, "schema": 1 }
//! ```
//!
//! Keys are emitted in sorted order and the file ends with a newline.
//!
//! CSV import reads `frame_id,label,score,x_min,y_min,x_max,y_max` rows.
//! `label` is `gt` (ground-truth polyp, score ignored), `polyp` (predicted
//! polyp), an artifact class name, or `image`; an `image` row carries the
//! frame size as `x_max = width`, `y_max = height`. Frames keep the order in
//! which their id first appears.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArtifactClass, DataError, Dataset, Detection, FrameRecord, Label};
use crate::geometry::{BBox, ImageSize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Json,
    Csv,
}

impl DatasetFormat {
    /// `.csv` selects CSV, anything else canonical JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Json,
        }
    }
}

// Field order is alphabetical so the derived serializer emits sorted keys.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    frames: Vec<FrameFile>,
    name: String,
    schema: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameFile {
    artifacts: Vec<ArtifactFile>,
    frame_id: String,
    gt_polyps: Vec<[f64; 4]>,
    height: u32,
    pred_polyps: Vec<PolypFile>,
    width: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArtifactFile {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    class: u8,
    score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolypFile {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
}

fn invariant(locus: String, reason: impl ToString) -> DataError {
    DataError::Invariant {
        locus,
        reason: reason.to_string(),
    }
}

fn make_box(c: [f64; 4], locus: &str) -> Result<BBox, DataError> {
    BBox::try_from(c).map_err(|e| invariant(locus.to_string(), e))
}

fn make_det(c: [f64; 4], score: f64, label: Label, locus: &str) -> Result<Detection, DataError> {
    let bbox = make_box(c, locus)?;
    if !(0.0..=1.0).contains(&score) {
        return Err(invariant(
            locus.to_string(),
            format!("score {score} outside [0, 1]"),
        ));
    }
    Ok(Detection { bbox, score, label })
}

impl FrameFile {
    fn into_record(self, index: usize) -> Result<FrameRecord, DataError> {
        let locus = format!("frames[{index}] ('{}')", self.frame_id);
        let image = ImageSize::new(self.width, self.height).map_err(|e| invariant(locus.clone(), e))?;
        let gt_polyps = self
            .gt_polyps
            .into_iter()
            .enumerate()
            .map(|(i, c)| make_box(c, &format!("{locus}.gt_polyps[{i}]")))
            .collect::<Result<_, _>>()?;
        let pred_polyps = self
            .pred_polyps
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                make_det(p.bbox, p.score, Label::Polyp, &format!("{locus}.pred_polyps[{i}]"))
            })
            .collect::<Result<_, _>>()?;
        let artifacts = self
            .artifacts
            .into_iter()
            .enumerate()
            .map(|(i, a)| {
                let l = format!("{locus}.artifacts[{i}]");
                let class = ArtifactClass::from_code(a.class)
                    .ok_or_else(|| invariant(l.clone(), format!("unknown class code {}", a.class)))?;
                make_det(a.bbox, a.score, Label::Artifact(class), &l)
            })
            .collect::<Result<_, _>>()?;
        Ok(FrameRecord {
            frame_id: self.frame_id,
            image,
            gt_polyps,
            pred_polyps,
            artifacts,
        })
    }

    fn from_record(f: &FrameRecord) -> Self {
        FrameFile {
            artifacts: f
                .artifacts
                .iter()
                .map(|d| ArtifactFile {
                    bbox: d.bbox.to_array(),
                    class: d.artifact_class().map(ArtifactClass::code).unwrap_or_default(),
                    score: d.score,
                })
                .collect(),
            frame_id: f.frame_id.clone(),
            gt_polyps: f.gt_polyps.iter().map(BBox::to_array).collect(),
            height: f.image.height,
            pred_polyps: f
                .pred_polyps
                .iter()
                .map(|d| PolypFile {
                    bbox: d.bbox.to_array(),
                    score: d.score,
                })
                .collect(),
            width: f.image.width,
        }
    }
}

/// Serializes to canonical JSON text (sorted keys, trailing newline).
pub fn dataset_to_json(d: &Dataset) -> String {
    let file = DatasetFile {
        frames: d.frames().iter().map(FrameFile::from_record).collect(),
        name: d.name().to_string(),
        schema: SCHEMA_VERSION,
    };
    let mut out = serde_json::to_string_pretty(&file).expect("dataset serialization is infallible");
    out.push('\n');
    out
}

pub fn dataset_from_json(text: &str) -> Result<Dataset, DataError> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| DataError::Parse {
        locus: format!("line {} column {}", e.line(), e.column()),
        reason: e.to_string(),
    })?;
    if file.schema != SCHEMA_VERSION {
        return Err(DataError::Parse {
            locus: "schema".into(),
            reason: format!("unsupported schema version {}", file.schema),
        });
    }
    let frames = file
        .frames
        .into_iter()
        .enumerate()
        .map(|(i, f)| f.into_record(i))
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(file.name, frames)
}

fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, DataError> {
    let text = read_text(path)?;
    match format {
        DatasetFormat::Json => dataset_from_json(&text),
        DatasetFormat::Csv => {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("dataset")
                .to_string();
            dataset_from_csv(&name, &text)
        }
    }
}

pub fn save_dataset(d: &Dataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, dataset_to_json(d)).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    frame_id: String,
    label: String,
    score: Option<f64>,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Default)]
struct PartialFrame {
    image: Option<ImageSize>,
    gt: Vec<BBox>,
    preds: Vec<Detection>,
    artifacts: Vec<Detection>,
}

pub fn dataset_from_csv(name: &str, text: &str) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut order: Vec<String> = Vec::new();
    let mut frames: HashMap<String, PartialFrame> = HashMap::new();

    let headers = reader
        .headers()
        .map_err(|e| DataError::Parse {
            locus: "header".into(),
            reason: e.to_string(),
        })?
        .clone();

    for result in reader.records() {
        let record = result.map_err(|e| DataError::Parse {
            locus: e
                .position()
                .map(|p| format!("line {}", p.line()))
                .unwrap_or_else(|| "unknown line".into()),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or_default();
        let row: CsvRow = record.deserialize(Some(&headers)).map_err(|e| DataError::Parse {
            locus: format!("line {line}"),
            reason: e.to_string(),
        })?;
        let locus = format!("line {line} (frame '{}')", row.frame_id);
        let coords = [row.x_min, row.y_min, row.x_max, row.y_max];

        if !frames.contains_key(&row.frame_id) {
            order.push(row.frame_id.clone());
        }
        let entry = frames.entry(row.frame_id.clone()).or_default();
        let label = row.label.to_ascii_lowercase();
        let score = || {
            row.score
                .ok_or_else(|| invariant(locus.clone(), "missing score for a detection row"))
        };
        match label.as_str() {
            "image" => {
                let (w, h) = (row.x_max, row.y_max);
                if w.fract() != 0.0 || h.fract() != 0.0 || w < 1.0 || h < 1.0 || w > f64::from(u32::MAX) || h > f64::from(u32::MAX) {
                    return Err(invariant(locus, format!("invalid image size {w}x{h}")));
                }
                entry.image = Some(ImageSize::new(w as u32, h as u32).map_err(|e| invariant(locus, e))?);
            }
            "gt" | "gt_polyp" => entry.gt.push(make_box(coords, &locus)?),
            "polyp" => entry
                .preds
                .push(make_det(coords, score()?, Label::Polyp, &locus)?),
            other => {
                let class = ArtifactClass::from_name(other)
                    .ok_or_else(|| invariant(locus.clone(), format!("unknown label '{}'", row.label)))?;
                entry
                    .artifacts
                    .push(make_det(coords, score()?, Label::Artifact(class), &locus)?);
            }
        }
    }

    let records = order
        .into_iter()
        .map(|id| {
            let p = frames.remove(&id).expect("every ordered id has a frame");
            let image = p.image.ok_or_else(|| {
                invariant(format!("frame '{id}'"), "no `image` row giving the frame size")
            })?;
            Ok(FrameRecord {
                frame_id: id,
                image,
                gt_polyps: p.gt,
                pred_polyps: p.preds,
                artifacts: p.artifacts,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Dataset::new(name, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Dataset {
        let img = ImageSize::new(64, 48).unwrap();
        let mut f = FrameRecord::new("f0", img);
        f.gt_polyps.push(BBox::new(1.0, 2.0, 10.0, 12.5).unwrap());
        f.pred_polyps
            .push(Detection::polyp(BBox::new(2.0, 2.0, 9.0, 11.0).unwrap(), 0.75).unwrap());
        f.artifacts.push(
            Detection::artifact(
                BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
                0.3,
                ArtifactClass::Instrument,
            )
            .unwrap(),
        );
        Dataset::new("fixture", vec![f]).unwrap()
    }

    #[test]
    fn empty_dataset_parses() {
        let d = dataset_from_json(r#"{"frames": [], "name": "e", "schema": 1}"#).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.name(), "e");
    }

    #[test]
    fn json_round_trip_is_byte_stable() {
        let d = fixture();
        let text = dataset_to_json(&d);
        assert!(text.ends_with('\n'));
        let back = dataset_from_json(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(dataset_to_json(&back), text);
        // instrument keeps code 6
        assert!(text.contains("\"class\": 6"));
    }

    #[test]
    fn keys_are_sorted() {
        let text = dataset_to_json(&fixture());
        let order = ["\"frames\"", "\"name\"", "\"schema\""];
        let pos: Vec<usize> = order.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        let keys = [
            "\"artifacts\"",
            "\"frame_id\"",
            "\"gt_polyps\"",
            "\"height\"",
            "\"pred_polyps\"",
            "\"width\"",
        ];
        let pos: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn json_invariant_errors_carry_locus() {
        let text = r#"{"frames": [{"artifacts": [], "frame_id": "x", "gt_polyps": [[5, 0, 1, 4]],
            "height": 10, "pred_polyps": [], "width": 10}], "name": "n", "schema": 1}"#;
        match dataset_from_json(text) {
            Err(DataError::Invariant { locus, .. }) => {
                assert!(locus.contains("gt_polyps[0]"), "{locus}")
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad_class = r#"{"frames": [{"artifacts": [{"box": [0,0,1,1], "class": 9, "score": 0.5}],
            "frame_id": "x", "gt_polyps": [], "height": 10, "pred_polyps": [], "width": 10}],
            "name": "n", "schema": 1}"#;
        assert!(matches!(
            dataset_from_json(bad_class),
            Err(DataError::Invariant { .. })
        ));
        assert!(matches!(
            dataset_from_json("{not json"),
            Err(DataError::Parse { .. })
        ));
        assert!(matches!(
            dataset_from_json(r#"{"frames": [], "name": "e", "schema": 2}"#),
            Err(DataError::Parse { .. })
        ));
    }

    #[test]
    fn csv_import() {
        let text = "frame_id,label,score,x_min,y_min,x_max,y_max\n\
                    a,image,,0,0,100,80\n\
                    a,gt,,10,10,30,30\n\
                    a,polyp,0.9,12,12,28,28\n\
                    b,image,,0,0,100,80\n\
                    a,bubbles,0.4,0,0,5,5\n\
                    b,Misc.,0.7,1,1,2,2\n";
        let d = dataset_from_csv("t", text).unwrap();
        assert_eq!(d.len(), 2);
        let a = &d.frames()[0];
        assert_eq!(a.frame_id, "a");
        assert_eq!(a.image, ImageSize::new(100, 80).unwrap());
        assert_eq!(a.gt_polyps.len(), 1);
        assert_eq!(a.pred_polyps[0].score, 0.9);
        assert_eq!(a.artifacts[0].label, Label::Artifact(ArtifactClass::Bubbles));
        assert_eq!(
            d.frames()[1].artifacts[0].label,
            Label::Artifact(ArtifactClass::Misc)
        );
    }

    #[test]
    fn csv_inverted_box_names_row() {
        let text = "frame_id,label,score,x_min,y_min,x_max,y_max\n\
                    a,image,,0,0,100,80\n\
                    a,gt,,30,10,10,30\n";
        match dataset_from_csv("t", text) {
            Err(DataError::Invariant { locus, .. }) => assert!(locus.starts_with("line 3"), "{locus}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_requires_image_size() {
        let text = "frame_id,label,score,x_min,y_min,x_max,y_max\na,gt,,1,1,2,2\n";
        assert!(matches!(
            dataset_from_csv("t", text),
            Err(DataError::Invariant { .. })
        ));
    }
}
