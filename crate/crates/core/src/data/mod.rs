//! Getting labelled epochs into an [`EpochStore`]: EDF/EDF+ files with TAL
//! hypnograms or plain label sidecars, optional resampling, and a synthetic
//! generator for desk-scale runs.

pub mod edf;
pub mod resample;
pub mod synth;
pub mod tal;

pub use edf::{parse_edf, parse_edf_with, write_edf, EdfFile, EdfHeader, ParseOptions, SignalHeader, SignalTrace};
pub use resample::{resample, resample_signal};
pub use synth::{synth_dataset, SynthSpec};
pub use tal::{parse_label_sidecar, parse_tal_annotations, Hypnogram, HypnogramEntry, Stage, StageMap};

use crate::error::{Error, Result};
use crate::model::EPOCH_SECONDS;
use crate::sampling::{EpochStore, SubjectRecord};
use std::path::{Path, PathBuf};

/// Fixed-length labelled windows cut from one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoched {
    pub samples_per_epoch: usize,
    /// `labels.len() * samples_per_epoch` values.
    pub epochs: Vec<f64>,
    pub labels: Vec<u8>,
    /// Windows not fully covered by one known stage.
    pub dropped: usize,
}

/// Cuts `trace` into consecutive `epoch_s`-second windows and keeps those
/// covered end to end by a single W/N1/N2/N3/REM hypnogram entry.
pub fn epoch_and_label(trace: &SignalTrace, hyp: &Hypnogram, epoch_s: usize) -> Result<Epoched> {
    let t = trace.fs * epoch_s as f64;
    if (t - t.round()).abs() > 1e-9 || t < 1.0 {
        return Err(Error::Config(format!("{} Hz x {epoch_s} s is not a whole number of samples", trace.fs)));
    }
    let t = t.round() as usize;
    let mut out = Epoched { samples_per_epoch: t, epochs: Vec::new(), labels: Vec::new(), dropped: 0 };
    for (k, window) in trace.samples.chunks_exact(t).enumerate() {
        let start = (k * epoch_s) as f64;
        match hyp.stage_covering(start, start + epoch_s as f64).and_then(Stage::class) {
            Some(y) => {
                out.epochs.extend_from_slice(window);
                out.labels.push(y);
            }
            None => out.dropped += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Signal label to use; the first non-annotation signal when `None`.
    pub channel: Option<String>,
    pub lenient: bool,
    /// Resample to this rate before epoching.
    pub target_fs: Option<f64>,
    pub stage_map: StageMap,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    /// `(file, kept epochs, dropped windows)`.
    pub recordings: Vec<(String, usize, usize)>,
    pub warnings: Vec<String>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn with_file<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse { offset, message: format!("{}: {message}", path.display()) },
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn is_hypnogram_file(path: &Path) -> bool {
    path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".hyp.edf"))
}

/// Hypnogram for `recording`: `<stem>.labels`, then `<stem>.hyp.edf`, then the
/// recording's own annotation signal.
fn hypnogram_for(recording: &Path, file: &EdfFile, opts: &LoadOptions) -> Result<Hypnogram> {
    let sidecar = recording.with_extension("labels");
    if sidecar.exists() {
        let text = String::from_utf8(read(&sidecar)?).map_err(|_| Error::parse(0, "label sidecar is not UTF-8"))?;
        let labels = with_file(&sidecar, parse_label_sidecar(&text))?;
        return Ok(Hypnogram::from_epoch_labels(&labels, EPOCH_SECONDS as f64));
    }
    let hyp_path = recording.with_extension("hyp.edf");
    let tal = if hyp_path.exists() {
        let hyp_file = with_file(&hyp_path, parse_edf_with(&read(&hyp_path)?, ParseOptions { lenient: opts.lenient }))?;
        hyp_file.annotation_bytes()
    } else {
        file.annotation_bytes()
    };
    let tal = tal.ok_or_else(|| {
        Error::Data(format!("{}: no .labels sidecar, .hyp.edf file or annotation signal", recording.display()))
    })?;
    with_file(recording, tal::parse_tal_with(&tal, &opts.stage_map))
}

/// One subject from an EDF recording and its hypnogram.
pub fn load_recording(path: &Path, opts: &LoadOptions) -> Result<(SubjectRecord, f64, LoadReport)> {
    let file = with_file(path, parse_edf_with(&read(path)?, ParseOptions { lenient: opts.lenient }))?;
    let mut report = LoadReport::default();
    report.warnings.extend(file.warnings.iter().map(|w| format!("{}: {w}", path.display())));
    let index = match &opts.channel {
        Some(label) => file.header.signals.iter().position(|s| s.label == *label).ok_or_else(|| {
            let have: Vec<&str> = file.header.signals.iter().map(|s| s.label.as_str()).collect();
            Error::Data(format!("{}: no signal labelled `{label}` (have {have:?})", path.display()))
        })?,
        None => file
            .header
            .signals
            .iter()
            .position(|s| !s.is_annotation())
            .ok_or_else(|| Error::Data(format!("{}: no data signal", path.display())))?,
    };
    let hyp = hypnogram_for(path, &file, opts)?;
    let mut trace = file.signals[index].clone();
    if let Some(target) = opts.target_fs {
        trace = resample(&trace, target)?;
    }
    let epoched = epoch_and_label(&trace, &hyp, EPOCH_SECONDS)?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("recording").to_string();
    report.recordings.push((id.clone(), epoched.labels.len(), epoched.dropped));
    Ok((SubjectRecord { id, epochs: epoched.epochs, labels: epoched.labels }, trace.fs, report))
}

/// Every `*.edf` recording in `dir` (hypnogram files excluded), in file-name
/// order.
pub fn load_store_dir(dir: &Path, opts: &LoadOptions) -> Result<(EpochStore, LoadReport)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("edf")) && !is_hypnogram_file(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("{}: no .edf recordings", dir.display())));
    }
    let mut store: Option<EpochStore> = None;
    let mut report = LoadReport::default();
    for path in &paths {
        let (record, fs, r) = load_recording(path, opts)?;
        report.recordings.extend(r.recordings);
        report.warnings.extend(r.warnings);
        if (fs - fs.round()).abs() > 1e-9 {
            return Err(Error::Data(format!("{}: non-integer rate {fs} Hz; resample first", path.display())));
        }
        let fs = fs.round() as usize;
        let store = store.get_or_insert_with(|| EpochStore::new(fs, 1, EPOCH_SECONDS * fs));
        if store.fs != fs {
            return Err(Error::Data(format!("{}: {fs} Hz differs from {} Hz of earlier files", path.display(), store.fs)));
        }
        store.push_subject(record)?;
    }
    Ok((store.expect("at least one path"), report))
}

/// A single-channel EDF with one 30 s record per epoch. The physical range
/// is the symmetric integer bound of the data.
pub fn recording_to_edf(record: &SubjectRecord, fs: usize, channel: &str) -> Result<EdfFile> {
    let t = EPOCH_SECONDS * fs;
    if record.epochs.len() != record.labels.len() * t {
        return Err(Error::Data(format!("subject `{}` is not single-channel at {fs} Hz", record.id)));
    }
    let bound = record.epochs.iter().fold(0.0f64, |m, v| m.max(v.abs())).ceil().max(1.0);
    let signal = edf::signal_header(channel, -bound, bound, t);
    let digital: Vec<i16> = record.epochs.iter().map(|&v| signal.quantize(v)).collect();
    let samples = digital.iter().map(|&d| signal.scale(d)).collect();
    let mut patient = record.id.clone();
    patient.truncate(80);
    let header = EdfHeader {
        version: "0".into(),
        patient,
        recording: "synthetic".into(),
        start_date: "01.01.00".into(),
        start_time: "00.00.00".into(),
        header_bytes: 512,
        reserved: String::new(),
        n_records: record.labels.len() as i64,
        record_duration: EPOCH_SECONDS as f64,
        signals: vec![signal],
    };
    Ok(EdfFile {
        header,
        signals: vec![SignalTrace { label: channel.to_string(), fs: fs as f64, samples, digital }],
        warnings: vec![],
    })
}

/// Writes `<dir>/<id>.edf` and `<dir>/<id>.labels` for every subject.
pub fn export_store(store: &EpochStore, dir: &Path, channel: &str) -> Result<Vec<PathBuf>> {
    if store.channels != 1 {
        return Err(Error::Data("only single-channel stores can be exported".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for rec in store.subjects() {
        let edf_path = dir.join(format!("{}.edf", rec.id));
        std::fs::write(&edf_path, write_edf(&recording_to_edf(rec, store.fs, channel)?)?)?;
        std::fs::write(dir.join(format!("{}.labels", rec.id)), tal::write_label_sidecar(&rec.labels))?;
        written.push(edf_path);
    }
    Ok(written)
}
