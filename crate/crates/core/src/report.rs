//! CSV and Markdown renderings of metrics and analysis reports.
//!
//! Column layouts (CSV headers):
//!
//! | report      | header |
//! |-------------|--------|
//! | metrics     | `tp,fp,fn,precision,recall,f1,f2` |
//! | presence    | `artifact,frequency_pct,present_frames,absent_frames,precision_diff,recall_diff,f1_diff,f2_diff,degenerate` |
//! | relation    | `polyp_type,frequency,any_artifact,bubbles,blur,misc,specularity,saturation,contrast` (shares in %) |
//! | correlation | `artifact,bubbles,blur,misc,specularity,saturation,contrast` (`NA` when undefined) |
//!
//! Presence differences are `NA` (CSV) or `n/a` (Markdown) when one split
//! is empty. CSV values carry six decimals; Markdown tables use
//! three decimals for metrics, two for presence and correlation,
//! one for relation shares. Output is a pure function of the report.

use std::fmt::Write;

use crate::analysis::{CorrelationMatrix, PresenceReport, PresenceRow, Relation, RelationReport};
use crate::datamodel::ArtifactClass;
use crate::evaluation::Metrics;

pub trait Table {
    fn to_csv(&self) -> String;
    fn to_markdown(&self) -> String;
}

fn class_header(c: ArtifactClass) -> &'static str {
    match c {
        ArtifactClass::Misc => "misc.",
        other => other.name(),
    }
}

/// Score differences, or `missing` for every cell when a split is empty.
fn diff_cells(r: &PresenceRow, fmt: impl Fn(f64) -> String, missing: &str) -> Vec<String> {
    let d = r.diff;
    [d.precision, d.recall, d.f1, d.f2]
        .into_iter()
        .map(|v| if r.degenerate { missing.to_string() } else { fmt(v) })
        .collect()
}

fn md_row(cells: &[String]) -> String {
    format!("| {} |\n", cells.join(" | "))
}

fn md_rule(n: usize) -> String {
    format!("|{}\n", "---|".repeat(n))
}

impl Table for Metrics {
    fn to_csv(&self) -> String {
        format!(
            "tp,fp,fn,precision,recall,f1,f2\n{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1, self.f2
        )
    }

    fn to_markdown(&self) -> String {
        let head = ["TP", "FP", "FN", "Precision", "Recall", "F1", "F2"].map(String::from);
        let mut out = md_row(&head);
        out += &md_rule(head.len());
        out += &md_row(&[
            self.tp.to_string(),
            self.fp.to_string(),
            self.fn_.to_string(),
            format!("{:.3}", self.precision),
            format!("{:.3}", self.recall),
            format!("{:.3}", self.f1),
            format!("{:.3}", self.f2),
        ]);
        out
    }
}

impl Table for PresenceReport {
    fn to_csv(&self) -> String {
        let mut out = String::from(
            "artifact,frequency_pct,present_frames,absent_frames,precision_diff,recall_diff,f1_diff,f2_diff,degenerate\n",
        );
        for r in &self.rows {
            let diffs = diff_cells(r, |v| format!("{v:.6}"), "NA");
            writeln!(
                out,
                "{},{:.6},{},{},{},{}",
                r.class,
                100.0 * r.frequency,
                r.present_frames,
                r.absent_frames,
                diffs.join(","),
                r.degenerate
            )
            .unwrap();
        }
        out
    }

    fn to_markdown(&self) -> String {
        let head = [
            "Artifact type",
            "Frequency (%)",
            "precision",
            "recall",
            "F1",
            "F2",
        ]
        .map(String::from);
        let mut out = format!(
            "Score difference (%), present minus absent, over {} frames\n\n",
            self.total_frames
        );
        out += &md_row(&head);
        out += &md_rule(head.len());
        for r in &self.rows {
            let mut cells = vec![
                class_header(r.class).to_string(),
                format!("{:.2}", 100.0 * r.frequency),
            ];
            cells.extend(diff_cells(r, |v| format!("{v:.2}"), "n/a"));
            out += &md_row(&cells);
        }
        out
    }
}

impl Table for RelationReport {
    fn to_csv(&self) -> String {
        let mut out = String::from("polyp_type,frequency,any_artifact");
        for c in ArtifactClass::TABLE_ORDER {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for r in &self.rows {
            write!(out, "{},{},{:.6}", r.category.name(), r.frequency, 100.0 * r.any_share()).unwrap();
            for s in r.shares() {
                write!(out, ",{:.6}", 100.0 * s).unwrap();
            }
            out.push('\n');
        }
        out
    }

    fn to_markdown(&self) -> String {
        let what = match self.config.relation {
            Relation::Overlap => "overlapping",
            Relation::Contains => "containing",
        };
        let mut head = vec![
            "Polyp type".to_string(),
            "Frequency".to_string(),
            "Any artifact".to_string(),
        ];
        head.extend(ArtifactClass::TABLE_ORDER.iter().map(|c| class_header(*c).to_string()));
        let mut out = format!("Share of polyps {what} artifacts (%)\n\n");
        out += &md_row(&head);
        out += &md_rule(head.len());
        for r in &self.rows {
            let mut cells = vec![
                r.category.name().to_string(),
                r.frequency.to_string(),
                format!("{:.1}", 100.0 * r.any_share()),
            ];
            cells.extend(r.shares().iter().map(|s| format!("{:.1}", 100.0 * s)));
            out += &md_row(&cells);
        }
        out
    }
}

impl Table for CorrelationMatrix {
    fn to_csv(&self) -> String {
        let mut out = String::from("artifact");
        for c in self.classes {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for (i, c) in self.classes.iter().enumerate() {
            out += c.name();
            for v in self.values[i] {
                if v.is_nan() {
                    out += ",NA";
                } else {
                    write!(out, ",{v:.6}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    fn to_markdown(&self) -> String {
        let mut head = vec![String::new()];
        head.extend(self.classes.iter().map(|c| class_header(*c).to_string()));
        let mut out = md_row(&head);
        out += &md_rule(head.len());
        for (i, c) in self.classes.iter().enumerate() {
            let mut cells = vec![class_header(*c).to_string()];
            cells.extend(self.values[i].iter().map(|v| {
                if v.is_nan() {
                    "n/a".to_string()
                } else {
                    format!("{v:.2}")
                }
            }));
            out += &md_row(&cells);
        }
        if !self.constant.is_empty() {
            let names: Vec<&str> = self.constant.iter().map(|c| c.name()).collect();
            writeln!(out, "\nconstant indicators: {}", names.join(", ")).unwrap();
        }
        out
    }
}
