//! `sst`: train, evaluate and inspect the Siamese sleep transformer.

mod config;
mod report;

use clap::{Args, Parser, Subcommand};
use config::{RunConfig, Source, SEED_ENV};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use report::{confusion_table, history_table, metrics_table, to_json, variance_table, MetricsDocument};
use sst_core::data::{export_store, load_store_dir, parse_edf_with, parse_tal_annotations, synth_dataset, LoadOptions, ParseOptions, SynthSpec};
use sst_core::model::checkpoint;
use sst_core::sampling::{EpochStore, SamplingMode};
use sst_core::train::{train, transfer_evaluate, variance_experiment};
use sst_core::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "sst", version, about = "Sleep stage scoring with a Siamese sequence transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set train.lr=0.003`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Training seed; takes precedence over the file and SST_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, run summary and metrics.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long, short, default_value = "sst-run")]
        out: PathBuf,
    },
    /// Score a trained checkpoint on a directory of recordings.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of EDF recordings.
        #[arg(long)]
        data: PathBuf,
        /// Resample the test signals to this rate (Hz) before epoching.
        #[arg(long, value_name = "HZ")]
        resample_to: Option<f64>,
        /// Signal label to score; the first data signal by default.
        #[arg(long)]
        channel: Option<String>,
        #[arg(long)]
        lenient: bool,
        /// Write the metrics JSON here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print the header, signals and first annotations of an EDF file.
    InspectEdf {
        path: PathBuf,
        /// Tolerate common header irregularities, reporting each one.
        #[arg(long)]
        lenient: bool,
        /// Number of annotations to print.
        #[arg(long, default_value_t = 10)]
        annotations: usize,
    },
    /// Train repeatedly under each sampling mode and report mean and spread.
    Variance {
        #[command(flatten)]
        config: ConfigArgs,
        /// Runs per sampling mode.
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Use the same seed for every run.
        #[arg(long)]
        identical_seeds: bool,
        /// Sampling modes to compare (comma separated).
        #[arg(long, value_delimiter = ',', default_values_t = SamplingMode::ALL)]
        modes: Vec<SamplingMode>,
        /// Write the JSON report here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as EDF recordings with label sidecars.
    Synth {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        fs: usize,
        #[arg(long, default_value_t = 8)]
        subjects: usize,
        #[arg(long, default_value_t = 60)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_sd: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "EEG Fpz-Cz")]
        channel: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dimension(_) => 1,
        Error::Data(_) | Error::Parse { .. } | Error::Io(_) => 2,
        Error::Numerical(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out } => cmd_train(&load_config(&config)?, &out),
        Command::Transfer { checkpoint, data, resample_to, channel, lenient, out } => {
            cmd_transfer(&checkpoint, &data, resample_to, channel, lenient, out.as_deref())
        }
        Command::InspectEdf { path, lenient, annotations } => cmd_inspect_edf(&path, lenient, annotations),
        Command::Variance { config, runs, identical_seeds, modes, out } => {
            cmd_variance(&load_config(&config)?, runs, identical_seeds, &modes, out.as_deref())
        }
        Command::Synth { out, fs, subjects, epochs, noise_sd, seed, channel } => {
            let spec = SynthSpec { n_subjects: subjects, epochs_per_subject: epochs, noise_sd, ..SynthSpec::for_rate(fs) };
            let store = synth_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
            std::fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
            let files = export_store(&store, &out, &channel)?;
            println!("wrote {} recordings ({} epochs at {fs} Hz) to {}", files.len(), store.n_epochs(), out.display());
            Ok(())
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?;
    let env_seed = std::env::var(SEED_ENV).ok();
    RunConfig::parse(&text, env_seed.as_deref(), &args.overrides, args.seed)
        .map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", args.config.display())),
            other => other,
        })
}

fn load_source(source: &Source, cfg: &RunConfig) -> Result<EpochStore> {
    match source {
        Source::Synthetic { seed } => synth_dataset(&cfg.synth, &mut ChaCha8Rng::seed_from_u64(*seed)),
        Source::Dir(dir) => {
            let opts = LoadOptions {
                channel: cfg.data.channel.clone(),
                lenient: cfg.data.lenient,
                target_fs: cfg.data.resample_to,
                ..LoadOptions::default()
            };
            let (store, report) = load_store_dir(dir, &opts)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            Ok(store)
        }
    }
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let store = load_source(&cfg.data.source, cfg)?;
    eprintln!("training on {} subjects, {} epochs at {} Hz", store.subjects().len(), store.n_epochs(), store.fs);
    let (params, summary) = train(&store, &cfg.model, &cfg.train)?;
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    checkpoint::save(&out.join("model.ckpt"), &cfg.model, &params)?;
    write_file(&out.join("summary.json"), to_json(&summary))?;
    write_file(&out.join("metrics.json"), to_json(&MetricsDocument::new(&summary.final_report, &summary.history)))?;

    print!("{}", history_table(&summary.history));
    println!(
        "best {} {:.4} at step {} ({} steps{})",
        cfg.train.select,
        summary.best_val_metric,
        summary.best_step,
        summary.steps_trained,
        if summary.stopped_early { ", stopped early" } else { "" }
    );
    let mut rows = vec![("valid", &summary.final_report)];
    let test_report;
    if let Some(test) = &cfg.data.test {
        let test_store = load_source(test, cfg)?;
        test_report = transfer_evaluate(&cfg.model, &params, &test_store, &cfg.train.loss)?;
        write_file(&out.join("test_metrics.json"), to_json(&MetricsDocument::new(&test_report, &[])))?;
        rows.push(("test", &test_report));
    }
    print!("{}", metrics_table(&rows));
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_transfer(
    ckpt: &Path,
    data: &Path,
    resample_to: Option<f64>,
    channel: Option<String>,
    lenient: bool,
    out: Option<&Path>,
) -> Result<()> {
    let (model, params) = checkpoint::load(ckpt).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse { offset, message: format!("{}: {message}", ckpt.display()) },
        Error::Io(io) => io_error(ckpt, io),
        other => other,
    })?;
    let opts = LoadOptions { channel, lenient, target_fs: resample_to, ..LoadOptions::default() };
    let (store, load) = load_store_dir(data, &opts)?;
    for w in &load.warnings {
        eprintln!("warning: {w}");
    }
    let report = transfer_evaluate(&model, &params, &store, &sst_core::losses::LossConfig::default())?;
    print!("{}", metrics_table(&[("transfer", &report)]));
    print!("{}", confusion_table(&report));
    if let Some(path) = out {
        write_file(path, to_json(&MetricsDocument::new(&report, &[])))?;
    }
    Ok(())
}

fn cmd_inspect_edf(path: &Path, lenient: bool, n_annotations: usize) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    let file = parse_edf_with(&bytes, ParseOptions { lenient }).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse { offset, message: format!("{}: {message}", path.display()) },
        other => other,
    })?;
    let h = &file.header;
    println!("file={}", path.display());
    println!("version={}", h.version);
    println!("patient={}", h.patient);
    println!("recording={}", h.recording);
    println!("start={} {}", h.start_date, h.start_time);
    println!("header_bytes={}", h.header_bytes);
    println!("reserved={}", h.reserved);
    println!("n_records={}", h.n_records);
    println!("record_duration={}", h.record_duration);
    println!("n_signals={}", h.n_signals());
    for (i, (s, trace)) in h.signals.iter().zip(&file.signals).enumerate() {
        println!(
            "signal {i}: label={:?} fs={} samples_per_record={} physical=[{}, {}] {} digital=[{}, {}] samples={}",
            s.label,
            h.fs(i),
            s.samples_per_record,
            s.physical_min,
            s.physical_max,
            s.physical_dimension,
            s.digital_min,
            s.digital_max,
            trace.digital.len()
        );
    }
    if let Some(tal) = file.annotation_bytes() {
        match parse_tal_annotations(&tal) {
            Ok(hyp) => {
                println!("annotations={}", hyp.entries.len());
                for e in hyp.entries.iter().take(n_annotations) {
                    println!("  onset={} duration={} stage={}", e.onset, e.duration, e.stage.name());
                }
            }
            Err(e) => println!("annotations: unreadable ({e})"),
        }
    }
    for w in &file.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_variance(cfg: &RunConfig, runs: usize, identical: bool, modes: &[SamplingMode], out: Option<&Path>) -> Result<()> {
    let store = load_source(&cfg.data.source, cfg)?;
    let test = cfg.data.test.as_ref().map(|t| load_source(t, cfg)).transpose()?;
    let report = variance_experiment(&store, test.as_ref(), &cfg.model, &cfg.train, modes, runs, identical)?;
    print!("{}", variance_table(&report));
    if let Some(path) = out {
        write_file(path, to_json(&report))?;
    }
    Ok(())
}
