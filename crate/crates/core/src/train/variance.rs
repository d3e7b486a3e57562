use super::{train, transfer_evaluate, MetricsReport, TrainConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampling::{EpochStore, SamplingMode};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: SamplingMode,
    pub seed: u64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub kappa: f64,
}

/// Mean and sample standard deviation (n - 1) over the runs of one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: SamplingMode,
    pub runs: usize,
    pub macro_f1_mean: f64,
    pub macro_f1_sd: f64,
    pub accuracy_mean: f64,
    pub accuracy_sd: f64,
    pub kappa_mean: f64,
    pub kappa_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub runs: Vec<RunMetrics>,
    pub modes: Vec<ModeSummary>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ModeSummary {
    fn of(mode: SamplingMode, runs: &[RunMetrics]) -> Self {
        let col = |f: fn(&RunMetrics) -> f64| mean_sd(&runs.iter().map(f).collect::<Vec<_>>());
        let (macro_f1_mean, macro_f1_sd) = col(|r| r.macro_f1);
        let (accuracy_mean, accuracy_sd) = col(|r| r.accuracy);
        let (kappa_mean, kappa_sd) = col(|r| r.kappa);
        Self { mode, runs: runs.len(), macro_f1_mean, macro_f1_sd, accuracy_mean, accuracy_sd, kappa_mean, kappa_sd }
    }
}

/// Trains `n_runs` times under each of `modes`. Run `i` uses seed
/// `base.seed + i`, or `base.seed` for every run when `identical_seeds` is set.
/// Each run is scored on `test` when given, otherwise on its own validation
/// subjects.
pub fn variance_experiment(
    store: &EpochStore,
    test: Option<&EpochStore>,
    config: &ModelConfig,
    base: &TrainConfig,
    modes: &[SamplingMode],
    n_runs: usize,
    identical_seeds: bool,
) -> Result<VarianceReport> {
    if n_runs < 2 {
        return Err(Error::Config(format!("a spread needs at least 2 runs, got {n_runs}")));
    }
    if modes.is_empty() {
        return Err(Error::Config("no sampling modes to compare".into()));
    }
    let mut runs = Vec::new();
    let mut summaries = Vec::new();
    for &mode in modes {
        let mut mode_runs = Vec::with_capacity(n_runs);
        for i in 0..n_runs {
            let seed = if identical_seeds { base.seed } else { base.seed + i as u64 };
            let cfg = TrainConfig { seed, sampling: mode, ..base.clone() };
            let (params, summary) = train(store, config, &cfg)?;
            let report: MetricsReport = match test {
                Some(t) => transfer_evaluate(config, &params, t, &cfg.loss)?,
                None => summary.final_report,
            };
            mode_runs.push(RunMetrics {
                mode,
                seed,
                macro_f1: report.macro_f1,
                accuracy: report.accuracy,
                kappa: report.kappa,
            });
        }
        summaries.push(ModeSummary::of(mode, &mode_runs));
        runs.extend(mode_runs);
    }
    Ok(VarianceReport { runs, modes: summaries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_sd() {
        let (m, s) = mean_sd(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!(m, 5.0);
        assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[0.3, 0.3]).1, 0.0);
    }

    #[test]
    fn too_few_runs() {
        let store = EpochStore::new(10, 1, 300);
        let err = variance_experiment(&store, None, &ModelConfig::toy(), &TrainConfig::default(), &SamplingMode::ALL, 1, false);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
