//! Artifact-aware polyp detection analytics.
//!
//! The crate covers the quantitative side of studying endoscopic artifacts
//! in polyp detection:
//!
//! - [`geometry`]: exact axis-aligned box arithmetic (IoU, centroid
//!   membership, containment, union coverage).
//! - [`datamodel`]: frames, datasets, canonical JSON/CSV I/O, pseudo-label
//!   fusion and multi-task label specs.
//! - [`evaluation`]: centroid-criterion matching and precision/recall/F-beta.
//! - [`analysis`]: presence, overlap/containment and co-occurrence analyses.
//! - [`report`]: CSV and Markdown renderings of metrics and analyses.
//! - [`loss`]: focal, smooth-L1, anchor assignment and the composite
//!   multi-task loss.
//! - [`toy`]: a small anchor-based detector with hand-written backprop,
//!   synthetic scenes, training and gradient checking.

pub mod analysis;
pub mod datamodel;
pub mod evaluation;
pub mod geometry;
pub mod loss;
pub mod report;
pub mod toy;

pub use datamodel::{
    ArtifactClass, Dataset, Detection, FrameRecord, Label, LabelMode, MultiTaskLabelSpec,
};
pub use evaluation::{MatchMode, MatchOutcome, Metrics};
pub use geometry::{BBox, ImageSize};
