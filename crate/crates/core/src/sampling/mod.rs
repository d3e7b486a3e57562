//! Building `(X, X', Y)` training batches.
//!
//! Anchors `X` are drawn class-balanced on the center epoch of each window.
//! The companion `X'` carries the same label sequence: an exact window match
//! when the store has one, otherwise an epoch-by-epoch assembly of random
//! epochs with the right class. A two-slot memory keeps the companions that
//! coincided with the lowest and highest validation loss and replays them
//! with probability `p0` each.

mod store;

pub use store::{EpochRef, EpochStore, SubjectRecord, Window, WindowIndex};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::N_CLASSES;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which memory slots may be replayed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplingMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "easy")]
    Easy,
    #[serde(rename = "easy+difficult")]
    EasyDifficult,
}

impl SamplingMode {
    pub const ALL: [SamplingMode; 3] = [SamplingMode::None, SamplingMode::Easy, SamplingMode::EasyDifficult];
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::None => "none",
            SamplingMode::Easy => "easy",
            SamplingMode::EasyDifficult => "easy+difficult",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SamplingMode::None),
            "easy" => Ok(SamplingMode::Easy),
            "easy+difficult" => Ok(SamplingMode::EasyDifficult),
            other => Err(Error::Config(format!("unknown sampling mode `{other}` (none, easy, easy+difficult)"))),
        }
    }
}

/// Where a batch's companions came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Random,
    Easy,
    Difficult,
}

/// A stored companion batch and the validation loss that earned it the slot.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredCompanion {
    pub companions: Vec<Vec<EpochRef>>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMemory {
    pub p0: f64,
    pub mode: SamplingMode,
    pub easy: Option<StoredCompanion>,
    pub difficult: Option<StoredCompanion>,
    best: f64,
    worst: f64,
}

impl SamplingMemory {
    pub fn new(p0: f64, mode: SamplingMode) -> Result<Self> {
        if !(0.0..0.5).contains(&p0) {
            return Err(Error::Config(format!("p0 must lie in [0, 0.5), got {p0}")));
        }
        Ok(Self { p0, mode, easy: None, difficult: None, best: f64::INFINITY, worst: f64::NEG_INFINITY })
    }

    /// Lowest validation loss seen so far.
    pub fn best(&self) -> f64 {
        self.best
    }

    /// Highest validation loss seen so far.
    pub fn worst(&self) -> f64 {
        self.worst
    }

    fn choose(&self, rng: &mut impl Rng) -> (Provenance, Option<&StoredCompanion>) {
        let u: f64 = rng.random();
        let easy_on = self.mode != SamplingMode::None;
        let difficult_on = self.mode == SamplingMode::EasyDifficult;
        if u < self.p0 {
            if let (true, Some(s)) = (easy_on, &self.easy) {
                return (Provenance::Easy, Some(s));
            }
        } else if u < 2.0 * self.p0 {
            if let (true, Some(s)) = (difficult_on, &self.difficult) {
                return (Provenance::Difficult, Some(s));
            }
        }
        (Provenance::Random, None)
    }
}

/// Epoch addresses of one training batch; materialize with
/// [`PairBatch::x`] / [`PairBatch::xp`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub anchors: Vec<Vec<EpochRef>>,
    pub companions: Vec<Vec<EpochRef>>,
    /// Row-major `[B, S]`.
    pub labels: Vec<u8>,
    pub provenance: Provenance,
}

impl PairBatch {
    pub fn batch_size(&self) -> usize {
        self.anchors.len()
    }

    pub fn seq_len(&self) -> usize {
        self.anchors.first().map_or(0, Vec::len)
    }

    pub fn x(&self, store: &EpochStore) -> Result<Tensor> {
        store.gather(&self.anchors)
    }

    pub fn xp(&self, store: &EpochStore) -> Result<Tensor> {
        store.gather(&self.companions)
    }

    /// True when every anchor and companion epoch carries its `Y` label.
    pub fn labels_consistent(&self, store: &EpochStore) -> bool {
        let s = self.seq_len();
        self.anchors.iter().zip(&self.companions).enumerate().all(|(b, (a, c))| {
            (0..s).all(|i| {
                let y = self.labels[b * s + i];
                store.label(a[i]) == y && store.label(c[i]) == y
            })
        })
    }
}

/// `count` windows: a class is drawn uniformly, then a window whose center
/// epoch has that class.
pub fn balanced_anchor_indices(index: &WindowIndex, count: usize, rng: &mut impl Rng) -> Result<Vec<Window>> {
    index.require_centers()?;
    Ok((0..count)
        .map(|_| {
            let class = rng.random_range(0..N_CLASSES);
            *index.windows_centered_on(class).choose(rng).expect("checked non-empty")
        })
        .collect())
}

/// A companion sequence with labels `labels`. Exact window matches other than
/// `exclude` are preferred; otherwise each epoch is drawn independently from
/// its class.
pub fn match_companion(
    index: &WindowIndex,
    labels: &[u8],
    exclude: Option<Window>,
    rng: &mut impl Rng,
) -> Result<Vec<EpochRef>> {
    let exact: Vec<Window> =
        index.windows_matching(labels).iter().copied().filter(|w| Some(*w) != exclude).collect();
    if let Some(w) = exact.choose(rng) {
        return Ok(w.epochs(labels.len()));
    }
    labels
        .iter()
        .map(|&y| {
            let pool = index.require_class(y as usize)?;
            Ok(*pool.choose(rng).expect("checked non-empty"))
        })
        .collect()
}

/// Draws one batch of `batch` sequences. A replayed companion fixes `Y`, and
/// the anchors are then redrawn to carry the same labels.
pub fn draw_pair_batch(
    store: &EpochStore,
    index: &WindowIndex,
    memory: &SamplingMemory,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<PairBatch> {
    let s = index.seq_len;
    let (provenance, stored) = memory.choose(rng);
    let (anchors, companions) = match stored {
        Some(stored) => {
            let companions = stored.companions.clone();
            let anchors = companions
                .iter()
                .map(|c| {
                    let labels: Vec<u8> = c.iter().map(|r| store.label(*r)).collect();
                    match_companion(index, &labels, Window::from_epochs(c), rng)
                })
                .collect::<Result<Vec<_>>>()?;
            (anchors, companions)
        }
        None => {
            let windows = balanced_anchor_indices(index, batch, rng)?;
            let companions = windows
                .iter()
                .map(|w| {
                    let labels: Vec<u8> = w.epochs(s).into_iter().map(|r| store.label(r)).collect();
                    match_companion(index, &labels, Some(*w), rng)
                })
                .collect::<Result<Vec<_>>>()?;
            (windows.into_iter().map(|w| w.epochs(s)).collect(), companions)
        }
    };
    let labels = anchors.iter().flatten().map(|r| store.label(*r)).collect();
    Ok(PairBatch { anchors, companions, labels, provenance })
}

/// Records `batch`'s companions in the easy slot on a new lowest validation
/// loss and in the difficult slot on a new highest one. Ties keep the
/// incumbent.
pub fn update_memory(memory: &mut SamplingMemory, batch: &PairBatch, val_loss: f64) -> Result<()> {
    if val_loss.is_nan() {
        return Err(Error::Contract("validation loss is NaN".into()));
    }
    if val_loss < memory.best {
        memory.best = val_loss;
        memory.easy = Some(StoredCompanion { companions: batch.companions.clone(), loss: val_loss });
    }
    if val_loss > memory.worst {
        memory.worst = val_loss;
        memory.difficult = Some(StoredCompanion { companions: batch.companions.clone(), loss: val_loss });
    }
    Ok(())
}
