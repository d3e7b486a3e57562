use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{N_CLASSES, STAGE_NAMES};
use std::collections::HashMap;

/// One scored recording: epochs in temporal order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    /// `n_epochs * channels * samples_per_epoch` values.
    pub epochs: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Address of a single epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EpochRef {
    pub subject: usize,
    pub pos: usize,
}

/// A contiguous run of `S` epochs starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Window {
    pub subject: usize,
    pub start: usize,
}

impl Window {
    pub fn epochs(self, len: usize) -> Vec<EpochRef> {
        (self.start..self.start + len).map(|pos| EpochRef { subject: self.subject, pos }).collect()
    }

    /// The window a reference list spells out, if it is contiguous.
    pub fn from_epochs(refs: &[EpochRef]) -> Option<Window> {
        let first = *refs.first()?;
        let contiguous = refs.iter().enumerate().all(|(i, r)| r.subject == first.subject && r.pos == first.pos + i);
        contiguous.then_some(Window { subject: first.subject, start: first.pos })
    }
}

/// Labelled single-channel (or multi-channel) epochs grouped by subject.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStore {
    pub fs: usize,
    pub channels: usize,
    pub samples_per_epoch: usize,
    subjects: Vec<SubjectRecord>,
}

impl EpochStore {
    pub fn new(fs: usize, channels: usize, samples_per_epoch: usize) -> Self {
        Self { fs, channels, samples_per_epoch, subjects: Vec::new() }
    }

    pub fn push_subject(&mut self, record: SubjectRecord) -> Result<()> {
        let per_epoch = self.channels * self.samples_per_epoch;
        if record.epochs.len() != record.labels.len() * per_epoch {
            return Err(Error::Data(format!(
                "subject `{}`: {} samples for {} epochs of {per_epoch}",
                record.id,
                record.epochs.len(),
                record.labels.len()
            )));
        }
        if let Some(pos) = record.labels.iter().position(|&y| y as usize >= N_CLASSES) {
            return Err(Error::Data(format!("subject `{}`: label {} at epoch {pos}", record.id, record.labels[pos])));
        }
        self.subjects.push(record);
        Ok(())
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn n_epochs(&self) -> usize {
        self.subjects.iter().map(|s| s.labels.len()).sum()
    }

    pub fn label(&self, r: EpochRef) -> u8 {
        self.subjects[r.subject].labels[r.pos]
    }

    pub fn epoch(&self, r: EpochRef) -> &[f64] {
        let n = self.channels * self.samples_per_epoch;
        &self.subjects[r.subject].epochs[r.pos * n..(r.pos + 1) * n]
    }

    pub fn class_counts(&self) -> [usize; N_CLASSES] {
        let mut counts = [0; N_CLASSES];
        for y in self.subjects.iter().flat_map(|s| &s.labels) {
            counts[*y as usize] += 1;
        }
        counts
    }

    /// A new store holding the listed subjects, in the given order.
    pub fn select(&self, subjects: &[usize]) -> EpochStore {
        EpochStore { subjects: subjects.iter().map(|&i| self.subjects[i].clone()).collect(), ..self.clone_empty() }
    }

    fn clone_empty(&self) -> EpochStore {
        EpochStore::new(self.fs, self.channels, self.samples_per_epoch)
    }

    /// Stacks sequences of epochs into `[B, S, C, T]`.
    pub fn gather(&self, sequences: &[Vec<EpochRef>]) -> Result<Tensor> {
        let seq = sequences.first().map_or(0, Vec::len);
        if sequences.iter().any(|s| s.len() != seq) {
            return Err(Error::dim("sequences of unequal length"));
        }
        let mut data = Vec::with_capacity(sequences.len() * seq * self.channels * self.samples_per_epoch);
        for r in sequences.iter().flatten() {
            data.extend_from_slice(self.epoch(*r));
        }
        Tensor::new(vec![sequences.len(), seq, self.channels, self.samples_per_epoch], data)
    }
}

/// Lookup tables over every length-`S` window of a store.
#[derive(Debug, Clone)]
pub struct WindowIndex {
    pub seq_len: usize,
    /// Windows keyed by the class of their center epoch (position `S / 2`).
    by_center: [Vec<Window>; N_CLASSES],
    /// Every epoch keyed by its class.
    by_class: [Vec<EpochRef>; N_CLASSES],
    by_sequence: HashMap<Vec<u8>, Vec<Window>>,
}

impl WindowIndex {
    pub fn build(store: &EpochStore, seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        let mut by_center: [Vec<Window>; N_CLASSES] = Default::default();
        let mut by_class: [Vec<EpochRef>; N_CLASSES] = Default::default();
        let mut by_sequence: HashMap<Vec<u8>, Vec<Window>> = HashMap::new();
        for (subject, rec) in store.subjects().iter().enumerate() {
            for (pos, &y) in rec.labels.iter().enumerate() {
                by_class[y as usize].push(EpochRef { subject, pos });
            }
            if rec.labels.len() < seq_len {
                continue;
            }
            for start in 0..=rec.labels.len() - seq_len {
                let w = Window { subject, start };
                let labels = &rec.labels[start..start + seq_len];
                by_center[labels[seq_len / 2] as usize].push(w);
                by_sequence.entry(labels.to_vec()).or_default().push(w);
            }
        }
        Ok(Self { seq_len, by_center, by_class, by_sequence })
    }

    pub fn windows_centered_on(&self, class: usize) -> &[Window] {
        &self.by_center[class]
    }

    pub fn epochs_of(&self, class: usize) -> &[EpochRef] {
        &self.by_class[class]
    }

    pub fn windows_matching(&self, labels: &[u8]) -> &[Window] {
        self.by_sequence.get(labels).map_or(&[], Vec::as_slice)
    }

    pub(crate) fn require_centers(&self) -> Result<()> {
        match self.by_center.iter().position(Vec::is_empty) {
            Some(c) => Err(Error::Data(format!(
                "no length-{} window is centered on class {} ({})",
                self.seq_len, c, STAGE_NAMES[c]
            ))),
            None => Ok(()),
        }
    }

    pub(crate) fn require_class(&self, class: usize) -> Result<&[EpochRef]> {
        let epochs = &self.by_class[class];
        if epochs.is_empty() {
            return Err(Error::Data(format!("store has no epochs of class {class} ({})", STAGE_NAMES[class])));
        }
        Ok(epochs)
    }
}
