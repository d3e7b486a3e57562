//! EDF+ time-stamped annotation lists (TALs) and hypnograms.
//!
//! A TAL is `+onset[\x15duration]\x14text\x14...\x00`; an annotation record
//! holds one or more TALs followed by NUL padding.

use crate::error::{Error, Result};
use crate::STAGE_NAMES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Wake,
    N1,
    N2,
    N3,
    Rem,
    /// Movement, unscored or unknown epochs.
    Other,
}

impl Stage {
    pub fn class(self) -> Option<u8> {
        match self {
            Stage::Wake => Some(0),
            Stage::N1 => Some(1),
            Stage::N2 => Some(2),
            Stage::N3 => Some(3),
            Stage::Rem => Some(4),
            Stage::Other => None,
        }
    }

    pub fn from_class(class: u8) -> Stage {
        match class {
            0 => Stage::Wake,
            1 => Stage::N1,
            2 => Stage::N2,
            3 => Stage::N3,
            4 => Stage::Rem,
            _ => Stage::Other,
        }
    }

    pub fn name(self) -> &'static str {
        self.class().map_or("?", |c| STAGE_NAMES[c as usize])
    }
}

/// Annotation text to stage. Texts absent from the table are not stage
/// annotations and are skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct StageMap {
    pub entries: Vec<(String, Stage)>,
}

impl Default for StageMap {
    fn default() -> Self {
        let entries = [
            ("Sleep stage W", Stage::Wake),
            ("Sleep stage 1", Stage::N1),
            ("Sleep stage 2", Stage::N2),
            ("Sleep stage 3", Stage::N3),
            ("Sleep stage 4", Stage::N3),
            ("Sleep stage R", Stage::Rem),
            ("Sleep stage N1", Stage::N1),
            ("Sleep stage N2", Stage::N2),
            ("Sleep stage N3", Stage::N3),
            ("Sleep stage ?", Stage::Other),
            ("Movement time", Stage::Other),
        ];
        Self { entries: entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }
}

impl StageMap {
    pub fn lookup(&self, text: &str) -> Option<Stage> {
        self.entries.iter().find(|(k, _)| k == text).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypnogramEntry {
    pub onset: f64,
    pub duration: f64,
    pub stage: Stage,
}

impl HypnogramEntry {
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

/// Onset-sorted, non-overlapping stage intervals (seconds).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hypnogram {
    pub entries: Vec<HypnogramEntry>,
}

impl Hypnogram {
    /// One entry per epoch of `epoch_s` seconds, starting at 0.
    pub fn from_epoch_labels(labels: &[u8], epoch_s: f64) -> Self {
        let entries = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| HypnogramEntry { onset: i as f64 * epoch_s, duration: epoch_s, stage: Stage::from_class(y) })
            .collect();
        Self { entries }
    }

    /// The stage covering all of `[start, end)`, if a single entry does.
    pub fn stage_covering(&self, start: f64, end: f64) -> Option<Stage> {
        const TOL: f64 = 1e-9;
        let i = self.entries.partition_point(|e| e.onset <= start + TOL);
        let e = self.entries.get(i.checked_sub(1)?)?;
        (e.end() + TOL >= end).then_some(e.stage)
    }
}

pub fn parse_tal_annotations(bytes: &[u8]) -> Result<Hypnogram> {
    parse_tal_with(bytes, &StageMap::default())
}

pub fn parse_tal_with(bytes: &[u8], map: &StageMap) -> Result<Hypnogram> {
    let mut entries = Vec::new();
    let mut start = 0;
    let mut index = 0;
    while start < bytes.len() {
        let end = bytes[start..].iter().position(|&b| b == 0).map_or(bytes.len(), |p| start + p);
        if end > start {
            parse_one(&bytes[start..end], start, index, map, &mut entries)?;
            index += 1;
        }
        start = end + 1;
    }
    entries.sort_by(|a: &HypnogramEntry, b| a.onset.total_cmp(&b.onset));
    for pair in entries.windows(2) {
        if pair[1].onset + 1e-9 < pair[0].end() {
            return Err(Error::parse(
                0,
                format!("stage annotations overlap: {} s + {} s and {} s", pair[0].onset, pair[0].duration, pair[1].onset),
            ));
        }
    }
    Ok(Hypnogram { entries })
}

fn parse_one(tal: &[u8], offset: usize, index: usize, map: &StageMap, out: &mut Vec<HypnogramEntry>) -> Result<()> {
    let bad = |msg: &str| Error::parse(offset, format!("TAL {index}: {msg}"));
    let text = std::str::from_utf8(tal).map_err(|_| bad("not UTF-8"))?;
    let mut fields = text.split('\x14');
    let timing = fields.next().unwrap_or_default();
    if !text.ends_with('\x14') {
        return Err(bad("missing the closing 0x14"));
    }
    let (onset, duration) = match timing.split_once('\x15') {
        Some((o, d)) => (o, Some(d)),
        None => (timing, None),
    };
    if !onset.starts_with(['+', '-']) {
        return Err(bad(&format!("onset `{onset}` lacks a sign")));
    }
    let onset: f64 = onset.parse().map_err(|_| bad(&format!("onset `{onset}` is not a number")))?;
    let duration: Option<f64> = duration
        .map(|d| d.parse().map_err(|_| bad(&format!("duration `{d}` is not a number"))))
        .transpose()?;
    // split leaves one empty piece after the closing 0x14
    let texts: Vec<&str> = fields.collect();
    for t in &texts[..texts.len() - 1] {
        if let Some(stage) = map.lookup(t) {
            let duration = duration.ok_or_else(|| bad(&format!("stage `{t}` has no duration")))?;
            out.push(HypnogramEntry { onset, duration, stage });
        }
    }
    Ok(())
}

/// Encodes stage entries as TALs, one per entry, preceded by the
/// time-keeping TAL `+0\x14\x14`.
pub fn encode_tal(hyp: &Hypnogram) -> Vec<u8> {
    let mut out = b"+0\x14\x14\x00".to_vec();
    for e in &hyp.entries {
        let text = match e.stage {
            Stage::Wake => "Sleep stage W",
            Stage::N1 => "Sleep stage 1",
            Stage::N2 => "Sleep stage 2",
            Stage::N3 => "Sleep stage 3",
            Stage::Rem => "Sleep stage R",
            Stage::Other => "Sleep stage ?",
        };
        out.extend_from_slice(format!("+{}\x15{}\x14{text}\x14\x00", e.onset, e.duration).as_bytes());
    }
    out
}

/// Plain-text labels, one epoch per line: `W`, `1`, `2`, `3`, `R`. Blank
/// lines are ignored.
pub fn parse_label_sidecar(text: &str) -> Result<Vec<u8>> {
    let mut labels = Vec::new();
    let mut offset = 0;
    for (line_no, line) in text.split_inclusive('\n').enumerate() {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            labels.push(match trimmed {
                "W" => 0,
                "1" => 1,
                "2" => 2,
                "3" => 3,
                "R" => 4,
                other => {
                    return Err(Error::parse(offset, format!("line {}: unknown stage `{other}`", line_no + 1)));
                }
            });
        }
        offset += line.len();
    }
    Ok(labels)
}

pub fn write_label_sidecar(labels: &[u8]) -> String {
    labels.iter().map(|&y| ["W", "1", "2", "3", "R"][y as usize].to_string() + "\n").collect()
}
