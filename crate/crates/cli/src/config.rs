//! Run configuration files.
//!
//! A run file is TOML with `[model]`, `[loss]`, `[train]`, `[data]` and
//! `[synth]` tables. Unknown keys are rejected. `model.fs` and `data.source`
//! are required; everything else has a default. Values are resolved in the
//! order file, then `SST_SEED`, then command-line flags.

use serde::Deserialize;
use sst_core::data::SynthSpec;
use sst_core::losses::LossConfig;
use sst_core::model::ModelConfig;
use sst_core::sampling::SamplingMode;
use sst_core::train::{SelectMetric, TrainConfig};
use sst_core::{Error, Result};
use std::path::PathBuf;
use toml::{Table, Value};

pub const SEED_ENV: &str = "SST_SEED";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    model: Option<RawModel>,
    #[serde(default)]
    loss: RawLoss,
    #[serde(default)]
    train: RawTrain,
    data: Option<RawData>,
    #[serde(default)]
    synth: RawSynth,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    fs: Option<usize>,
    seq_len: Option<usize>,
    channels: Option<usize>,
    dim: Option<usize>,
    tokens: Option<usize>,
    heads: Option<usize>,
    head_dim: Option<usize>,
    depth: Option<usize>,
    ffn_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoss {
    tau: Option<f64>,
    lambda: Option<f64>,
    alpha: Option<f64>,
    cosine: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    max_steps: Option<usize>,
    validate_every: Option<usize>,
    patience: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    clip_norm: Option<f64>,
    val_fraction: Option<f64>,
    seed: Option<u64>,
    sampling: Option<String>,
    p0: Option<f64>,
    select: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    source: Option<String>,
    test: Option<String>,
    channel: Option<String>,
    lenient: Option<bool>,
    resample_to: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSynth {
    subjects: Option<usize>,
    epochs: Option<usize>,
    noise_sd: Option<f64>,
    stay_prob: Option<f64>,
    amplitude: Option<f64>,
    seed: Option<u64>,
}

/// Where epochs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// Generated in memory from the `[synth]` table.
    Synthetic { seed: u64 },
    /// A directory of EDF recordings.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: Source,
    /// Held-out data for scoring, if any.
    pub test: Option<Source>,
    pub channel: Option<String>,
    pub lenient: bool,
    pub resample_to: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthSpec,
}

/// Sets `section.key` in `table` to `value`, parsed as a TOML value when
/// possible and kept as a string otherwise.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form section.key=value")))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| Error::Config(format!("override key `{}` needs a section, e.g. train.lr", path.trim())))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let entry = table.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(section_table) = entry else {
        return Err(Error::Config(format!("`{section}` is not a table")));
    };
    section_table.insert(key.to_string(), value);
    Ok(())
}

fn missing(key: &str) -> Error {
    Error::Config(format!("missing required key `{key}`"))
}

fn source(value: &str, synth_seed: u64) -> Source {
    if value == "synthetic" {
        Source::Synthetic { seed: synth_seed }
    } else {
        Source::Dir(PathBuf::from(value))
    }
}

impl RunConfig {
    /// Parses a run file with overrides applied. `env_seed` is the value of
    /// `SST_SEED`, `seed` the `--seed` flag.
    pub fn parse(text: &str, env_seed: Option<&str>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if let Some(s) = env_seed {
            let s = s.trim();
            s.parse::<u64>().map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?;
            apply_override(&mut table, &format!("train.seed={s}"))?;
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(s) = seed {
            apply_override(&mut table, &format!("train.seed={s}"))?;
        }
        let raw: RawFile = Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawFile) -> Result<Self> {
        let m = raw.model.ok_or_else(|| missing("model.fs"))?;
        let fs = m.fs.ok_or_else(|| missing("model.fs"))?;
        let mut model = ModelConfig::default().with_fs(fs);
        let sizes = [
            ("seq_len", m.seq_len),
            ("channels", m.channels),
            ("dim", m.dim),
            ("tokens", m.tokens),
            ("heads", m.heads),
            ("head_dim", m.head_dim),
            ("depth", m.depth),
            ("ffn_dim", m.ffn_dim),
        ];
        for (key, value) in sizes {
            if let Some(v) = value {
                model.set(key, v)?;
            }
        }
        model.validate()?;

        let d = LossConfig::default();
        let loss = LossConfig {
            tau: raw.loss.tau.unwrap_or(d.tau),
            lambda: raw.loss.lambda.unwrap_or(d.lambda),
            alpha: raw.loss.alpha.unwrap_or(d.alpha),
            cosine: raw.loss.cosine.unwrap_or(d.cosine),
        };

        let t = raw.train;
        let d = TrainConfig::default();
        let train = TrainConfig {
            max_steps: t.max_steps.unwrap_or(d.max_steps),
            validate_every: t.validate_every.unwrap_or(d.validate_every),
            patience: t.patience.unwrap_or(d.patience),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            lr: t.lr.unwrap_or(d.lr),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            betas: (t.beta1.unwrap_or(d.betas.0), t.beta2.unwrap_or(d.betas.1)),
            clip_norm: t.clip_norm.unwrap_or(d.clip_norm),
            val_fraction: t.val_fraction.unwrap_or(d.val_fraction),
            seed: t.seed.unwrap_or(d.seed),
            sampling: t.sampling.as_deref().map(str::parse::<SamplingMode>).transpose()?.unwrap_or(d.sampling),
            p0: t.p0.unwrap_or(d.p0),
            select: t.select.as_deref().map(str::parse::<SelectMetric>).transpose()?.unwrap_or(d.select),
            loss,
        };
        train.validate()?;

        let s = raw.synth;
        let base = SynthSpec::for_rate(model.fs);
        let synth = SynthSpec {
            n_subjects: s.subjects.unwrap_or(base.n_subjects),
            epochs_per_subject: s.epochs.unwrap_or(base.epochs_per_subject),
            noise_sd: s.noise_sd.unwrap_or(base.noise_sd),
            stay_prob: s.stay_prob.unwrap_or(base.stay_prob),
            amplitude: s.amplitude.unwrap_or(base.amplitude),
            ..base
        };
        synth.validate()?;
        let synth_seed = s.seed.unwrap_or(0);

        let d = raw.data.ok_or_else(|| missing("data.source"))?;
        let data = DataConfig {
            source: source(&d.source.ok_or_else(|| missing("data.source"))?, synth_seed),
            test: d.test.as_deref().map(|t| source(t, synth_seed + 1)),
            channel: d.channel,
            lenient: d.lenient.unwrap_or(false),
            resample_to: d.resample_to,
        };
        Ok(Self { model, train, data, synth })
    }
}
