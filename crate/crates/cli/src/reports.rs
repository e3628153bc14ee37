//! `eval`, `analyze` and `merge-labels`.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use polypart_core::analysis::{
    correlation_matrix, presence_analysis, relation_analysis, PresenceRule, Relation,
    RelationConfig, DEFAULT_ARTIFACT_THRESHOLD, DEFAULT_DETECTION_THRESHOLD, DEFAULT_OVERLAP_IOU,
};
use polypart_core::datamodel::{
    artifacts_per_image, load_dataset, merge_pseudo_labels, save_dataset, DatasetFormat,
};
use polypart_core::evaluation::{match_frame, metrics};
use polypart_core::report::Table;
use polypart_core::{ArtifactClass, Dataset, MatchMode};

use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::{emit, Format, Mode};

pub fn read_dataset(path: &Path, manifest: &mut RunManifest) -> CliResult<Dataset> {
    manifest.input(path)?;
    Ok(load_dataset(path, DatasetFormat::from_path(path))?)
}

fn non_empty(d: Dataset, path: &Path) -> CliResult<Dataset> {
    if d.is_empty() {
        Err(CliError::empty(&path.display().to_string()))
    } else {
        Ok(d)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset file (.json canonical, .csv flat rows).
    pub dataset: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DETECTION_THRESHOLD)]
    pub det_threshold: f64,
    #[arg(long, value_enum, default_value_t = Mode::Strict)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = Format::Md)]
    pub format: Format,
    /// Write the report here (plus `<out>.manifest.json`) instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    check_unit("det-threshold", a.det_threshold)?;
    let mut m = RunManifest::new("eval");
    let d = non_empty(read_dataset(&a.dataset, &mut m)?, &a.dataset)?;
    m.set("det_threshold", a.det_threshold)
        .set("mode", a.mode)
        .set("format", a.format);
    let mode = MatchMode::from(a.mode);
    let outcomes: Vec<_> = d
        .frames()
        .iter()
        .map(|f| match_frame(&f.gt_polyps, &f.pred_polyps, a.det_threshold, mode))
        .collect();
    let report = metrics(&outcomes).expect("outcomes share one mode");
    emit(&render(&report, a.format), a.out.as_deref(), &mut m)
}

fn render(t: &impl Table, f: Format) -> String {
    match f {
        Format::Md => t.to_markdown(),
        Format::Csv => t.to_csv(),
    }
}

fn check_unit(name: &str, v: f64) -> CliResult<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(CliError::input(format!("--{name} {v} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Presence,
    Overlap,
    Contain,
    Corr,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// Minimum score for an artifact box to count.
    #[arg(long, default_value_t = DEFAULT_ARTIFACT_THRESHOLD)]
    pub artifact_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_DETECTION_THRESHOLD)]
    pub det_threshold: f64,
    /// IoU above which a polyp box overlaps an artifact box.
    #[arg(long, default_value_t = DEFAULT_OVERLAP_IOU)]
    pub iou_threshold: f64,
    /// Area-fraction override, e.g. `blur=0.5`. Repeatable.
    #[arg(long = "area-threshold", value_name = "CLASS=FRACTION")]
    pub area_thresholds: Vec<String>,
    /// Matching mode for relation analyses.
    #[arg(long, value_enum, default_value_t = Mode::Analysis)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = Format::Md)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_override(s: &str) -> CliResult<(ArtifactClass, f64)> {
    let bad = || CliError::input(format!("bad --area-threshold '{s}', expected CLASS=FRACTION"));
    let (name, value) = s.split_once('=').ok_or_else(bad)?;
    let class = ArtifactClass::from_name(name.trim())
        .filter(|c| c.is_analyzed())
        .ok_or_else(|| CliError::input(format!("unknown artifact class '{name}'")))?;
    let value: f64 = value.trim().parse().map_err(|_| bad())?;
    Ok((class, value))
}

pub fn analyze(a: &AnalyzeArgs) -> CliResult<()> {
    for (name, v) in [
        ("artifact-threshold", a.artifact_threshold),
        ("det-threshold", a.det_threshold),
        ("iou-threshold", a.iou_threshold),
    ] {
        check_unit(name, v)?;
    }
    let mut rule = PresenceRule::default();
    rule.min_score = a.artifact_threshold;
    for s in &a.area_thresholds {
        let (class, v) = parse_override(s)?;
        rule.set_threshold(class, v)?;
    }

    let mut m = RunManifest::new("analyze");
    let d = non_empty(read_dataset(&a.dataset, &mut m)?, &a.dataset)?;
    m.set("kind", a.kind)
        .set("artifact_threshold", a.artifact_threshold)
        .set("det_threshold", a.det_threshold)
        .set("format", a.format);
    match a.kind {
        Kind::Presence | Kind::Corr => {
            let thresholds: std::collections::BTreeMap<String, f64> = ArtifactClass::ANALYSIS
                .iter()
                .map(|c| (c.name().to_string(), rule.threshold(*c)))
                .collect();
            m.set("area_thresholds", thresholds);
        }
        Kind::Overlap | Kind::Contain => {
            m.set("iou_threshold", a.iou_threshold).set("mode", a.mode);
        }
    }

    let text = match a.kind {
        Kind::Presence => render(&presence_analysis(&d, &rule, a.det_threshold), a.format),
        Kind::Overlap | Kind::Contain => {
            let relation = if a.kind == Kind::Overlap {
                Relation::Overlap
            } else {
                Relation::Contains
            };
            let cfg = RelationConfig {
                relation,
                iou_threshold: a.iou_threshold,
                artifact_threshold: a.artifact_threshold,
                det_threshold: a.det_threshold,
                mode: a.mode.into(),
            };
            render(&relation_analysis(&d, &cfg), a.format)
        }
        Kind::Corr => render(&correlation_matrix(&d, &rule)?, a.format),
    };
    emit(&text, a.out.as_deref(), &mut m)
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Dataset with ground-truth polyp annotations.
    pub polyps: PathBuf,
    /// Dataset whose artifact detections become pseudo-labels.
    pub artifacts: PathBuf,
    /// Minimum score for a detection to be promoted.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Fused dataset output (canonical JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Also report artifacts per image at these thresholds, e.g. `0.2,0.5,0.8`.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Vec<f64>,
}

pub fn merge(a: &MergeArgs) -> CliResult<()> {
    let mut m = RunManifest::new("merge-labels");
    let polyps = non_empty(read_dataset(&a.polyps, &mut m)?, &a.polyps)?;
    let artifacts = read_dataset(&a.artifacts, &mut m)?;
    m.set("threshold", a.threshold);
    if !a.sweep.is_empty() {
        m.set("sweep", &a.sweep);
    }

    let fused = merge_pseudo_labels(&polyps, &artifacts, a.threshold)?;
    let mut summary = String::from("threshold,artifacts_per_image\n");
    let mut thresholds = a.sweep.clone();
    if !thresholds.contains(&a.threshold) {
        thresholds.push(a.threshold);
    }
    for t in thresholds {
        let d = merge_pseudo_labels(&polyps, &artifacts, t)?;
        summary += &format!("{t},{:.6}\n", artifacts_per_image(&d));
    }
    save_dataset(&fused, &a.out)?;
    m.output(&a.out);
    print!("{summary}");
    m.write(&crate::manifest::sidecar(&a.out))
}
