//! Report serialisation and plain-text tables.
//!
//! The detection table has one column per object class followed by mAP, with
//! APs printed as percentages to one decimal. The screening table lists
//! A, P, R, F1 as fractions and TP/FP rates as percentages, two decimals each.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{DetectionReport, PipelineReport};
use crate::data::ObjectClass;

/// The document written by the evaluation commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<PipelineReport>,
    /// Whole-image baseline, when it was run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_image: Option<PipelineReport>,
    pub config: serde_json::Value,
}

/// Leading label columns of a table row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableRow {
    pub group: String,
    pub model: String,
    pub network: String,
}

impl TableRow {
    pub fn new(group: impl Into<String>, model: impl Into<String>, network: impl Into<String>) -> Self {
        Self {
            group: group.into(),
            model: model.into(),
            network: network.into(),
        }
    }
}

fn title_case(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

fn layout(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{cell:<w$}", w = widths[c]))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

/// Per-class AP table. `at_50` selects AP@0.5 instead of the range-averaged AP.
/// Excluded classes print as `-`.
pub fn render_detection_table(rows: &[(TableRow, &DetectionReport)], at_50: bool) -> String {
    let mut cells = vec![];
    let mut header = vec!["Model".to_string(), "Network configuration".to_string()];
    header.extend(ObjectClass::ALL.iter().map(|c| title_case(c.name())));
    header.push("mAP".into());
    cells.push(header);
    for (label, report) in rows {
        let mut row = vec![label.model.clone(), label.network.clone()];
        for class in ObjectClass::ALL {
            row.push(match report.per_class.get(&class) {
                Some(ap) => format!("{:.1}", 100.0 * if at_50 { ap.ap50 } else { ap.ap }),
                None => "-".into(),
            });
        }
        let map = if at_50 { report.map50 } else { report.map };
        row.push(format!("{:.1}", 100.0 * map));
        cells.push(row);
    }
    layout(&cells)
}

fn fraction(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

/// Screening table: group, model, network, then A, P, R, F1, TP(%), FP(%).
pub fn render_pipeline_table(rows: &[(TableRow, &PipelineReport)]) -> String {
    let mut cells = vec![["Object Detection", "Model", "Network configuration", "A", "P", "R", "F1", "TP(%)", "FP(%)"]
        .map(String::from)
        .to_vec()];
    for (label, r) in rows {
        cells.push(vec![
            label.group.clone(),
            label.model.clone(),
            label.network.clone(),
            fraction(r.accuracy),
            fraction(r.precision),
            fraction(r.recall),
            fraction(r.f1),
            fraction(r.tp_pct),
            fraction(r.fp_pct),
        ]);
    }
    layout(&cells)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::eval::{ClassAp, ConfusionCounts};

    fn cells_of(line: &str) -> Vec<&str> {
        line.split("  ").map(str::trim).filter(|s| !s.is_empty()).collect()
    }

    #[test]
    fn detection_table_reproduces_published_row() {
        let aps = [0.994, 0.922, 1.0, 1.0, 0.965, 0.996];
        let per_class: BTreeMap<_, _> = ObjectClass::ALL
            .iter()
            .zip(aps)
            .map(|(&c, ap)| (c, ClassAp { ap, ap50: ap }))
            .collect();
        let report = DetectionReport {
            per_class,
            map: 0.979,
            map50: 0.979,
            excluded: vec![],
            counts: BTreeMap::new(),
            theta_set: vec![0.5],
        };
        let table = render_detection_table(&[(TableRow::new("", "Mask R-CNN", "ResNet101"), &report)], false);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(
            cells_of(lines[0]),
            ["Model", "Network configuration", "Bottle", "Hairdryer", "Iron", "Toaster", "Mobile", "Laptop", "mAP"]
        );
        assert!(lines[1].chars().all(|c| c == '-'));
        assert_eq!(
            cells_of(lines[2]),
            ["Mask R-CNN", "ResNet101", "99.4", "92.2", "100.0", "100.0", "96.5", "99.6", "97.9"]
        );
    }

    #[test]
    fn pipeline_table_reproduces_published_row() {
        let r = PipelineReport {
            accuracy: Some(0.66),
            precision: Some(0.67),
            recall: Some(0.59),
            f1: Some(0.63),
            tp_pct: Some(59.25),
            fp_pct: Some(27.67),
            counts: ConfusionCounts::default(),
            degenerate: false,
        };
        let table = render_pipeline_table(&[(TableRow::new("Dual CNN", "Classification via CNN", "ResNet50"), &r)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(
            cells_of(lines[0]),
            ["Object Detection", "Model", "Network configuration", "A", "P", "R", "F1", "TP(%)", "FP(%)"]
        );
        assert_eq!(
            cells_of(lines[2]),
            ["Dual CNN", "Classification via CNN", "ResNet50", "0.66", "0.67", "0.59", "0.63", "59.25", "27.67"]
        );
    }

    #[test]
    fn missing_values_render_as_dash() {
        let r = PipelineReport::empty();
        let table = render_pipeline_table(&[(TableRow::new("g", "m", "n"), &r)]);
        assert!(table.lines().nth(2).unwrap().contains(" -"));
    }
}
