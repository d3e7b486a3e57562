//! Synthetic five-class sleep recordings: each stage is a sinusoid at its own
//! frequency plus white Gaussian noise, with stage sequences drawn from a
//! sticky Markov chain.

use crate::error::{Error, Result};
use crate::model::EPOCH_SECONDS;
use crate::sampling::{EpochStore, SubjectRecord};
use crate::N_CLASSES;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub epochs_per_subject: usize,
    pub fs: usize,
    /// Oscillation frequency of each class, in Hz.
    pub class_freqs: [f64; N_CLASSES],
    pub amplitude: f64,
    pub noise_sd: f64,
    /// Probability that the next epoch keeps the current stage.
    pub stay_prob: f64,
}

impl SynthSpec {
    /// Frequencies at fixed fractions of the sampling rate, so the spec stays
    /// valid for any `fs`.
    pub fn for_rate(fs: usize) -> Self {
        let f = fs as f64;
        Self {
            n_subjects: 8,
            epochs_per_subject: 60,
            fs,
            class_freqs: [0.04 * f, 0.08 * f, 0.14 * f, 0.22 * f, 0.32 * f],
            amplitude: 1.0,
            noise_sd: 0.1,
            stay_prob: 0.6,
        }
    }

    pub fn samples_per_epoch(&self) -> usize {
        EPOCH_SECONDS * self.fs
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.fs as f64 / 2.0;
        if self.fs == 0 || self.n_subjects == 0 || self.epochs_per_subject == 0 {
            return Err(Error::Config("synthetic spec needs positive fs, subjects and epochs".into()));
        }
        for (i, f) in self.class_freqs.iter().enumerate() {
            if !(*f > 0.0 && *f < nyquist) {
                return Err(Error::Config(format!("class {i} frequency {f} Hz is outside (0, {nyquist}) Hz")));
            }
            if self.class_freqs[..i].iter().any(|g| (g - f).abs() < 1.0 / EPOCH_SECONDS as f64) {
                return Err(Error::Config(format!("class {i} frequency {f} Hz is not distinct")));
            }
        }
        if !(self.noise_sd >= 0.0 && (0.0..=1.0).contains(&self.stay_prob)) {
            return Err(Error::Config("noise_sd must be >= 0 and stay_prob in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Stage sequence of `n` epochs: keep the stage with `stay_prob`, otherwise
/// jump to a uniformly drawn stage.
fn stage_chain(n: usize, stay_prob: f64, rng: &mut impl Rng) -> Vec<u8> {
    let mut labels = Vec::with_capacity(n);
    let mut current = rng.random_range(0..N_CLASSES) as u8;
    for _ in 0..n {
        labels.push(current);
        if rng.random::<f64>() >= stay_prob {
            current = rng.random_range(0..N_CLASSES) as u8;
        }
    }
    labels
}

pub fn synth_dataset(spec: &SynthSpec, rng: &mut impl Rng) -> Result<EpochStore> {
    spec.validate()?;
    let t = spec.samples_per_epoch();
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let mut store = EpochStore::new(spec.fs, 1, t);
    for s in 0..spec.n_subjects {
        let labels = stage_chain(spec.epochs_per_subject, spec.stay_prob, rng);
        let mut epochs = Vec::with_capacity(labels.len() * t);
        for &y in &labels {
            let omega = 2.0 * PI * spec.class_freqs[y as usize] / spec.fs as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            for n in 0..t {
                epochs.push(spec.amplitude * (omega * n as f64 + phase).sin() + noise.sample(rng));
            }
        }
        store.push_subject(SubjectRecord { id: format!("synth{s:03}"), epochs, labels })?;
    }
    Ok(store)
}
