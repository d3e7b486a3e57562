//! EDF / EDF+ reading and writing.

use crate::error::{Error, Result};

pub const ANNOTATION_LABEL: &str = "EDF Annotations";

const FIXED_HEADER: usize = 256;
const PER_SIGNAL: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
    pub reserved: String,
}

impl SignalHeader {
    pub fn is_annotation(&self) -> bool {
        self.label == ANNOTATION_LABEL
    }

    /// Digital to physical units.
    pub fn scale(&self, digital: i16) -> f64 {
        let span_p = self.physical_max - self.physical_min;
        let span_d = (self.digital_max - self.digital_min) as f64;
        (digital as f64 - self.digital_min as f64) * span_p / span_d + self.physical_min
    }

    /// Physical to digital units, rounded and clamped to the digital range.
    pub fn quantize(&self, physical: f64) -> i16 {
        let span_p = self.physical_max - self.physical_min;
        let span_d = (self.digital_max - self.digital_min) as f64;
        let d = ((physical - self.physical_min) * span_d / span_p + self.digital_min as f64).round();
        d.clamp(self.digital_min as f64, self.digital_max as f64) as i16
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    pub header_bytes: usize,
    /// `"EDF+C"` / `"EDF+D"` for EDF+ files, blank otherwise.
    pub reserved: String,
    /// `-1` while a recording is in progress.
    pub n_records: i64,
    pub record_duration: f64,
    pub signals: Vec<SignalHeader>,
}

impl EdfHeader {
    pub fn n_signals(&self) -> usize {
        self.signals.len()
    }

    pub fn record_bytes(&self) -> usize {
        self.signals.iter().map(|s| s.samples_per_record * 2).sum()
    }

    /// Sampling rate of signal `i` in Hz.
    pub fn fs(&self, i: usize) -> f64 {
        self.signals[i].samples_per_record as f64 / self.record_duration
    }
}

/// One decoded signal: physical values plus the raw digital samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrace {
    pub label: String,
    pub fs: f64,
    pub samples: Vec<f64>,
    pub digital: Vec<i16>,
}

impl SignalTrace {
    /// A trace with no digital backing, e.g. after resampling.
    pub fn from_physical(label: impl Into<String>, fs: f64, samples: Vec<f64>) -> Self {
        Self { label: label.into(), fs, samples, digital: Vec::new() }
    }

    /// The digital samples as little-endian bytes (the TAL stream of an
    /// annotation signal).
    pub fn raw_bytes(&self) -> Vec<u8> {
        self.digital.iter().flat_map(|d| d.to_le_bytes()).collect()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfFile {
    pub header: EdfHeader,
    pub signals: Vec<SignalTrace>,
    /// Irregularities tolerated in lenient mode.
    pub warnings: Vec<String>,
}

impl EdfFile {
    pub fn signal(&self, label: &str) -> Option<&SignalTrace> {
        self.signals.iter().find(|s| s.label == label)
    }

    /// Concatenated TAL bytes of every annotation signal.
    pub fn annotation_bytes(&self) -> Option<Vec<u8>> {
        let mut found = false;
        let mut out = Vec::new();
        for (h, s) in self.header.signals.iter().zip(&self.signals) {
            if h.is_annotation() {
                found = true;
                out.extend(s.raw_bytes());
            }
        }
        found.then_some(out)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Accept NUL / leading-space padding, `n_records = -1`, a wrong
    /// `header_bytes` field and a trailing partial record, with warnings.
    pub lenient: bool,
}

struct Fields<'a> {
    bytes: &'a [u8],
    pos: usize,
    lenient: bool,
    warnings: Vec<String>,
}

impl<'a> Fields<'a> {
    fn raw(&mut self, width: usize, name: &str) -> Result<(usize, &'a str)> {
        let at = self.pos;
        let Some(slice) = self.bytes.get(at..at + width) else {
            return Err(Error::parse(at, format!("header truncated inside `{name}`")));
        };
        self.pos += width;
        if let Some(i) = slice.iter().position(|b| !(b.is_ascii() && (*b >= 0x20 || *b == 0))) {
            return Err(Error::parse(at + i, format!("non-ASCII byte in `{name}`")));
        }
        let text = std::str::from_utf8(slice).expect("ascii");
        Ok((at, text))
    }

    fn text(&mut self, width: usize, name: &str) -> Result<String> {
        let lenient = self.lenient;
        let (at, raw) = self.raw(width, name)?;
        let raw = raw.to_string();
        if raw.contains('\0') {
            if !lenient {
                return Err(Error::parse(at, format!("NUL byte in `{name}`")));
            }
            self.warnings.push(format!("`{name}` at byte {at} is NUL-padded"));
        }
        Ok(raw.trim_end_matches([' ', '\0']).to_string())
    }

    fn number<T: std::str::FromStr>(&mut self, width: usize, name: &str) -> Result<T> {
        let lenient = self.lenient;
        let (at, raw) = self.raw(width, name)?;
        let strict = raw.trim_end_matches(' ');
        let loose = raw.trim_matches([' ', '\0']);
        if let Ok(v) = strict.parse::<T>() {
            return Ok(v);
        }
        match loose.parse::<T>() {
            Ok(v) if lenient => {
                self.warnings.push(format!("`{name}` at byte {at} has padded value `{raw}`"));
                Ok(v)
            }
            _ => Err(Error::parse(at, format!("`{name}` is not a number: `{raw}`"))),
        }
    }

    fn per_signal<T>(
        &mut self,
        ns: usize,
        mut read: impl FnMut(&mut Self, usize) -> Result<T>,
    ) -> Result<Vec<T>> {
        (0..ns).map(|i| read(self, i)).collect()
    }
}

pub fn parse_edf(bytes: &[u8]) -> Result<EdfFile> {
    parse_edf_with(bytes, ParseOptions::default())
}

pub fn parse_edf_with(bytes: &[u8], opts: ParseOptions) -> Result<EdfFile> {
    if bytes.len() < FIXED_HEADER {
        return Err(Error::parse(bytes.len(), format!("file is {} bytes, shorter than the 256-byte header", bytes.len())));
    }
    let mut f = Fields { bytes, pos: 0, lenient: opts.lenient, warnings: Vec::new() };
    let version = f.text(8, "version")?;
    let patient = f.text(80, "patient")?;
    let recording = f.text(80, "recording")?;
    let start_date = f.text(8, "start date")?;
    let start_time = f.text(8, "start time")?;
    let header_at = f.pos;
    let header_bytes: usize = f.number(8, "header bytes")?;
    let reserved = f.text(44, "reserved")?;
    let records_at = f.pos;
    let n_records: i64 = f.number(8, "number of records")?;
    let duration_at = f.pos;
    let record_duration: f64 = f.number(8, "record duration")?;
    let ns_at = f.pos;
    let ns: usize = f.number(4, "number of signals")?;
    if ns == 0 {
        return Err(Error::parse(ns_at, "file declares no signals"));
    }
    if !(record_duration.is_finite() && record_duration > 0.0) {
        return Err(Error::parse(duration_at, format!("record duration {record_duration} is not positive")));
    }
    let expected = FIXED_HEADER + PER_SIGNAL * ns;
    if header_bytes != expected {
        if !opts.lenient {
            return Err(Error::parse(header_at, format!("header bytes field says {header_bytes}, expected {expected}")));
        }
        f.warnings.push(format!("header bytes field says {header_bytes}, using {expected}"));
    }

    let labels = f.per_signal(ns, |f, i| f.text(16, &format!("signal {i} label")))?;
    let transducers = f.per_signal(ns, |f, i| f.text(80, &format!("signal {i} transducer")))?;
    let dims = f.per_signal(ns, |f, i| f.text(8, &format!("signal {i} physical dimension")))?;
    let pmin_at = f.pos;
    let pmins = f.per_signal(ns, |f, i| f.number::<f64>(8, &format!("signal {i} physical minimum")))?;
    let pmaxs = f.per_signal(ns, |f, i| f.number::<f64>(8, &format!("signal {i} physical maximum")))?;
    let dmin_at = f.pos;
    let dmins = f.per_signal(ns, |f, i| f.number::<i32>(8, &format!("signal {i} digital minimum")))?;
    let dmaxs = f.per_signal(ns, |f, i| f.number::<i32>(8, &format!("signal {i} digital maximum")))?;
    let prefilters = f.per_signal(ns, |f, i| f.text(80, &format!("signal {i} prefiltering")))?;
    let spr_at = f.pos;
    let sprs = f.per_signal(ns, |f, i| f.number::<usize>(8, &format!("signal {i} samples per record")))?;
    let sig_reserved = f.per_signal(ns, |f, i| f.text(32, &format!("signal {i} reserved")))?;

    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        if dmins[i] >= dmaxs[i] {
            return Err(Error::parse(
                dmin_at + 8 * i,
                format!("signal {i}: digital minimum {} is not below maximum {}", dmins[i], dmaxs[i]),
            ));
        }
        if pmins[i] == pmaxs[i] {
            return Err(Error::parse(pmin_at + 8 * i, format!("signal {i}: physical range is empty")));
        }
        if sprs[i] == 0 {
            return Err(Error::parse(spr_at + 8 * i, format!("signal {i}: zero samples per record")));
        }
        signals.push(SignalHeader {
            label: labels[i].clone(),
            transducer: transducers[i].clone(),
            physical_dimension: dims[i].clone(),
            physical_min: pmins[i],
            physical_max: pmaxs[i],
            digital_min: dmins[i],
            digital_max: dmaxs[i],
            prefiltering: prefilters[i].clone(),
            samples_per_record: sprs[i],
            reserved: sig_reserved[i].clone(),
        });
    }
    let mut header = EdfHeader {
        version,
        patient,
        recording,
        start_date,
        start_time,
        header_bytes,
        reserved,
        n_records,
        record_duration,
        signals,
    };

    let data_start = expected;
    let record_bytes = header.record_bytes();
    let available = bytes.len().saturating_sub(data_start);
    let whole = available / record_bytes;
    let n_records = if n_records < 0 {
        if !opts.lenient {
            return Err(Error::parse(records_at, format!("number of records is {n_records}")));
        }
        f.warnings.push(format!("number of records is {n_records}; inferred {whole} from the file size"));
        whole
    } else {
        n_records as usize
    };
    let needed = data_start + n_records * record_bytes;
    if bytes.len() < needed {
        let cut_record = whole;
        if !opts.lenient {
            return Err(Error::parse(
                data_start + cut_record * record_bytes,
                format!("truncated inside data record {cut_record} of {n_records}"),
            ));
        }
        f.warnings.push(format!("file ends inside record {cut_record}; keeping {whole} complete records"));
    } else if bytes.len() > needed {
        f.warnings.push(format!("{} trailing bytes after the last record", bytes.len() - needed));
    }
    let n_records = n_records.min(whole);
    if opts.lenient {
        header.n_records = n_records as i64;
        header.header_bytes = expected;
    }

    let mut digital: Vec<Vec<i16>> =
        header.signals.iter().map(|s| Vec::with_capacity(s.samples_per_record * n_records)).collect();
    let mut pos = data_start;
    for _ in 0..n_records {
        for (i, s) in header.signals.iter().enumerate() {
            let chunk = &bytes[pos..pos + 2 * s.samples_per_record];
            digital[i].extend(chunk.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])));
            pos += 2 * s.samples_per_record;
        }
    }
    let traces = header
        .signals
        .iter()
        .zip(digital)
        .enumerate()
        .map(|(i, (s, d))| SignalTrace {
            label: s.label.clone(),
            fs: header.fs(i),
            samples: d.iter().map(|&v| s.scale(v)).collect(),
            digital: d,
        })
        .collect();
    Ok(EdfFile { header, signals: traces, warnings: f.warnings })
}

fn put_text(out: &mut Vec<u8>, value: &str, width: usize, name: &str) -> Result<()> {
    if !value.is_ascii() || value.len() > width {
        return Err(Error::Config(format!("`{name}` value `{value}` does not fit {width} ASCII bytes")));
    }
    out.extend_from_slice(value.as_bytes());
    out.extend(std::iter::repeat_n(b' ', width - value.len()));
    Ok(())
}

/// Shortest decimal text of at most 8 characters that parses back to `v`.
fn format_real(v: f64, name: &str) -> Result<String> {
    let plain = format!("{v}");
    if plain.len() <= 8 {
        return Ok(plain);
    }
    for precision in (0..8).rev() {
        let s = format!("{v:.precision$}");
        if s.len() <= 8 && s.parse::<f64>() == Ok(v) {
            return Ok(s);
        }
    }
    Err(Error::Config(format!("`{name}` value {v} has no exact 8-character form")))
}

/// Serializes `file` from its header and digital samples. The header must
/// be self-consistent; physical values are not consulted.
pub fn write_edf(file: &EdfFile) -> Result<Vec<u8>> {
    let h = &file.header;
    let ns = h.n_signals();
    if file.signals.len() != ns {
        return Err(Error::Contract(format!("{ns} signal headers but {} traces", file.signals.len())));
    }
    if h.n_records < 0 {
        return Err(Error::Contract("cannot write an unknown record count".into()));
    }
    let n_records = h.n_records as usize;
    for (i, (s, t)) in h.signals.iter().zip(&file.signals).enumerate() {
        if t.digital.len() != s.samples_per_record * n_records {
            return Err(Error::Contract(format!(
                "signal {i} has {} samples, header implies {}",
                t.digital.len(),
                s.samples_per_record * n_records
            )));
        }
        if s.digital_min >= s.digital_max || s.physical_min == s.physical_max {
            return Err(Error::Contract(format!("signal {i} has an empty digital or physical range")));
        }
    }
    let header_bytes = FIXED_HEADER + PER_SIGNAL * ns;
    let mut out = Vec::with_capacity(header_bytes + n_records * h.record_bytes());
    put_text(&mut out, &h.version, 8, "version")?;
    put_text(&mut out, &h.patient, 80, "patient")?;
    put_text(&mut out, &h.recording, 80, "recording")?;
    put_text(&mut out, &h.start_date, 8, "start date")?;
    put_text(&mut out, &h.start_time, 8, "start time")?;
    put_text(&mut out, &header_bytes.to_string(), 8, "header bytes")?;
    put_text(&mut out, &h.reserved, 44, "reserved")?;
    put_text(&mut out, &n_records.to_string(), 8, "number of records")?;
    put_text(&mut out, &format_real(h.record_duration, "record duration")?, 8, "record duration")?;
    put_text(&mut out, &ns.to_string(), 4, "number of signals")?;

    let each = |out: &mut Vec<u8>, width: usize, name: &str, value: &dyn Fn(&SignalHeader) -> Result<String>| {
        h.signals.iter().try_for_each(|s| put_text(out, &value(s)?, width, name))
    };
    each(&mut out, 16, "label", &|s| Ok(s.label.clone()))?;
    each(&mut out, 80, "transducer", &|s| Ok(s.transducer.clone()))?;
    each(&mut out, 8, "physical dimension", &|s| Ok(s.physical_dimension.clone()))?;
    each(&mut out, 8, "physical minimum", &|s| format_real(s.physical_min, "physical minimum"))?;
    each(&mut out, 8, "physical maximum", &|s| format_real(s.physical_max, "physical maximum"))?;
    each(&mut out, 8, "digital minimum", &|s| Ok(s.digital_min.to_string()))?;
    each(&mut out, 8, "digital maximum", &|s| Ok(s.digital_max.to_string()))?;
    each(&mut out, 80, "prefiltering", &|s| Ok(s.prefiltering.clone()))?;
    each(&mut out, 8, "samples per record", &|s| Ok(s.samples_per_record.to_string()))?;
    each(&mut out, 32, "reserved", &|s| Ok(s.reserved.clone()))?;

    for r in 0..n_records {
        for (s, t) in h.signals.iter().zip(&file.signals) {
            let n = s.samples_per_record;
            for d in &t.digital[r * n..(r + 1) * n] {
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Header for a signal spanning `[physical_min, physical_max]` over the full
/// 16-bit range.
pub fn signal_header(label: &str, physical_min: f64, physical_max: f64, samples_per_record: usize) -> SignalHeader {
    SignalHeader {
        label: label.to_string(),
        transducer: String::new(),
        physical_dimension: "uV".to_string(),
        physical_min,
        physical_max,
        digital_min: -32768,
        digital_max: 32767,
        prefiltering: String::new(),
        samples_per_record,
        reserved: String::new(),
    }
}

/// An annotation signal of `bytes_per_record` bytes per record.
pub fn annotation_header(bytes_per_record: usize) -> SignalHeader {
    SignalHeader {
        physical_dimension: String::new(),
        physical_min: -1.0,
        physical_max: 1.0,
        ..signal_header(ANNOTATION_LABEL, -1.0, 1.0, bytes_per_record.div_ceil(2))
    }
}

/// Packs TAL bytes into digital samples, NUL-padded to `samples` values.
pub fn tal_to_digital(tal: &[u8], samples: usize) -> Result<Vec<i16>> {
    if tal.len() > samples * 2 {
        return Err(Error::Contract(format!("{} annotation bytes exceed {} samples", tal.len(), samples)));
    }
    let mut padded = tal.to_vec();
    padded.resize(samples * 2, 0);
    Ok(padded.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect())
}
