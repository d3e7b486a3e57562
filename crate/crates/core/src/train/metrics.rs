use crate::error::{Error, Result};
use crate::N_CLASSES;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Rows are true classes, columns predicted classes.
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    pub per_class_f1: [f64; N_CLASSES],
    pub macro_f1: f64,
    pub accuracy: f64,
    pub kappa: f64,
}

impl MetricsReport {
    pub fn from_confusion(confusion: [[u64; N_CLASSES]; N_CLASSES]) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let diag: u64 = (0..N_CLASSES).map(|i| confusion[i][i]).sum();
        let rows: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..N_CLASSES).map(|j| confusion.iter().map(|r| r[j]).sum()).collect();
        let mut per_class_f1 = [0.0; N_CLASSES];
        for c in 0..N_CLASSES {
            let tp = confusion[c][c];
            let denom = rows[c] + cols[c];
            per_class_f1[c] = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        }
        let n = total as f64;
        let accuracy = if total == 0 { 0.0 } else { diag as f64 / n };
        let p_e = if total == 0 { 0.0 } else { rows.iter().zip(&cols).map(|(r, c)| (*r as f64) * (*c as f64)).sum::<f64>() / (n * n) };
        let kappa = if p_e == 1.0 { 0.0 } else { (accuracy - p_e) / (1.0 - p_e) };
        Self {
            confusion,
            per_class_f1,
            macro_f1: per_class_f1.iter().sum::<f64>() / N_CLASSES as f64,
            accuracy,
            kappa,
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Confusion matrix, per-class F1 (`2TP / (2TP + FP + FN)`, 0 for classes
/// absent from both sides), macro F1, accuracy and Cohen's kappa (0 when
/// chance agreement is 1).
pub fn evaluate_metrics(truth: &[u8], pred: &[u8]) -> Result<MetricsReport> {
    if truth.len() != pred.len() {
        return Err(Error::Contract(format!("{} true labels but {} predictions", truth.len(), pred.len())));
    }
    if truth.is_empty() {
        return Err(Error::Contract("no labels to score".into()));
    }
    let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t as usize >= N_CLASSES || p as usize >= N_CLASSES {
            return Err(Error::Data(format!("label pair ({t}, {p}) at index {i} is outside 0..{N_CLASSES}")));
        }
        confusion[t as usize][p as usize] += 1;
    }
    Ok(MetricsReport::from_confusion(confusion))
}
