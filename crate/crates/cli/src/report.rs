//! Text tables and JSON documents written by the commands.

use serde::Serialize;
use sst_core::train::{MetricsReport, ValidationRecord, VarianceReport};
use std::fmt::Write;

const COLUMNS: [&str; 5] = ["W", "N1", "N2", "N3", "R"];

/// Per-class F1 then mean F1, accuracy and kappa, one row per report.
pub fn metrics_table(rows: &[(&str, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(name, _)| name.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}", "");
    for c in COLUMNS.iter().chain(&["Mean", "Acc", "Kappa"]) {
        let _ = write!(out, " {c:>6}");
    }
    out.push('\n');
    for (name, m) in rows {
        let _ = write!(out, "{name:<width$}");
        for v in m.per_class_f1.iter().chain([&m.macro_f1, &m.accuracy, &m.kappa]) {
            let _ = write!(out, " {v:>6.3}");
        }
        out.push('\n');
    }
    out
}

/// Rows of true classes against predicted classes.
pub fn confusion_table(m: &MetricsReport) -> String {
    let mut out = String::from("true\\pred");
    for c in COLUMNS {
        let _ = write!(out, " {c:>7}");
    }
    out.push('\n');
    for (c, row) in COLUMNS.iter().zip(&m.confusion) {
        let _ = write!(out, "{c:<9}");
        for v in row {
            let _ = write!(out, " {v:>7}");
        }
        out.push('\n');
    }
    out
}

/// Mean and standard deviation per sampling mode.
pub fn variance_table(report: &VarianceReport) -> String {
    let mut out = format!("{:<16} {:>4} {:>15} {:>15} {:>15}\n", "sampling", "runs", "F1", "Acc", "Kappa");
    for m in &report.modes {
        let cell = |mean: f64, sd: f64| format!("{mean:.3} ± {sd:.3}");
        let _ = writeln!(
            out,
            "{:<16} {:>4} {:>15} {:>15} {:>15}",
            m.mode.to_string(),
            m.runs,
            cell(m.macro_f1_mean, m.macro_f1_sd),
            cell(m.accuracy_mean, m.accuracy_sd),
            cell(m.kappa_mean, m.kappa_sd)
        );
    }
    out
}

pub fn history_table(history: &[ValidationRecord]) -> String {
    let mut out = format!("{:>7} {:>9} {:>8} {:>8} {:>8}\n", "step", "val_loss", "macro_f1", "acc", "kappa");
    for h in history {
        let mark = if h.improved { " *" } else { "" };
        let _ = writeln!(
            out,
            "{:>7} {:>9.4} {:>8.4} {:>8.4} {:>8.4}{mark}",
            h.step, h.val_loss, h.macro_f1, h.accuracy, h.kappa
        );
    }
    out
}

/// The metrics document: a report plus the validation history that led to it.
#[derive(Debug, Serialize)]
pub struct MetricsDocument<'a> {
    pub confusion: &'a [[u64; 5]; 5],
    pub per_class_f1: &'a [f64; 5],
    pub macro_f1: f64,
    pub accuracy: f64,
    pub kappa: f64,
    pub history: &'a [ValidationRecord],
}

impl<'a> MetricsDocument<'a> {
    pub fn new(m: &'a MetricsReport, history: &'a [ValidationRecord]) -> Self {
        Self {
            confusion: &m.confusion,
            per_class_f1: &m.per_class_f1,
            macro_f1: m.macro_f1,
            accuracy: m.accuracy,
            kappa: m.kappa,
            history,
        }
    }
}

pub fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use sst_core::train::evaluate_metrics;

    #[test]
    fn table_has_class_columns_then_mean() {
        let m = evaluate_metrics(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 3]).unwrap();
        let t = metrics_table(&[("valid", &m)]);
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["W", "N1", "N2", "N3", "R", "Mean", "Acc", "Kappa"]);
        let row: Vec<&str> = t.lines().nth(1).unwrap().split_whitespace().collect();
        assert_eq!(row[0], "valid");
        assert_eq!(row[1], "1.000");
        assert_eq!(row[7], "0.800");
    }

    #[test]
    fn metrics_document_keys() {
        let m = evaluate_metrics(&[0, 1], &[0, 1]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&to_json(&MetricsDocument::new(&m, &[]))).unwrap();
        let mut keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        keys.sort();
        assert_eq!(keys, ["accuracy", "confusion", "history", "kappa", "macro_f1", "per_class_f1"]);
    }
}
