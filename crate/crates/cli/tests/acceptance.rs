//! Acceptance suite: one check per criterion, each printing a PASS/FAIL line.
//! Exits non-zero when any criterion fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sst_core::data::edf::{annotation_header, signal_header, tal_to_digital, EdfHeader};
use sst_core::data::resample::resample;
use sst_core::data::{
    parse_edf, parse_tal_annotations, synth_dataset, write_edf, EdfFile, Hypnogram, HypnogramEntry, SignalTrace,
    Stage, SynthSpec,
};
use sst_core::gradcheck::{check_gradients_with, GradCheckOptions};
use sst_core::losses::{total_loss, LossConfig};
use sst_core::model::{multi_head_attention, sst_forward_pair, ModelConfig, ModelParams};
use sst_core::sampling::{
    balanced_anchor_indices, draw_pair_batch, update_memory, EpochStore, Provenance, SamplingMemory, SamplingMode,
    WindowIndex,
};
use sst_core::train::{
    evaluate_metrics, predict_store, train, train_with, transfer_evaluate, Inference, MetricsReport, TrainConfig,
    Validator,
};
use sst_core::{Error, Graph, Tensor, N_CLASSES};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn toy_store(subjects: usize, epochs: usize, seed: u64) -> EpochStore {
    let spec = SynthSpec { n_subjects: subjects, epochs_per_subject: epochs, ..SynthSpec::for_rate(10) };
    synth_dataset(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn gradient_check() -> Outcome {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::init(&cfg, &mut rng);
    let x = random_tensor(&[2, cfg.seq_len, 1, cfg.samples_per_epoch], 1.0, &mut rng);
    let xp = random_tensor(&[2, cfg.seq_len, 1, cfg.samples_per_epoch], 1.0, &mut rng);
    let labels: Vec<u8> = (0..2 * cfg.seq_len).map(|_| rng.random_range(0..N_CLASSES as u8)).collect();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let inputs: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let opts = GradCheckOptions { step: 1e-5, max_entries: Some(32), seed: 2 };
    let loss = LossConfig::default();
    let report = check_gradients_with(&inputs, &opts, |g, vars| {
        let mut it = vars.iter();
        let bound = params.map(|_| *it.next().expect("one var per weight"));
        let (xv, xpv) = (g.constant(&x), g.constant(&xp));
        let (fwd, rev) = sst_forward_pair(g, &bound, &cfg, xv, xpv)?;
        Ok(total_loss(g, &fwd, &rev, &labels, &loss)?.total)
    })
    .map_err(|e| e.to_string())?;
    let (worst, name) = report
        .rel_errors
        .iter()
        .zip(&names)
        .fold((0.0f64, ""), |acc, (e, n)| if *e > acc.0 { (*e, n.as_str()) } else { acc });
    ensure(report.rel_errors.iter().all(|e| *e < 1e-4), || format!("group `{name}` has relative error {worst:.2e}"))?;
    Ok(format!(
        "{} parameter groups, {} entries, worst {worst:.2e} ({name})",
        report.rel_errors.len(),
        report.entries_checked
    ))
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ModelConfig::toy();
    let params = ModelParams::init(&cfg, &mut rng);
    let (mut softmax_err, mut attn_err, mut ln_mean) = (0.0f64, 0.0f64, 0.0f64);
    for trial in 0..1000 {
        let rows = rng.random_range(1..8);
        let cols = rng.random_range(1..12);
        let scale = [1.0, 10.0, 100.0][trial % 3];
        let z = random_tensor(&[rows, cols], scale, &mut rng);
        let mut g = Graph::new();
        let zv = g.constant(&z);
        let p = g.softmax(zv, 1).map_err(|e| e.to_string())?;
        for row in g.value(p).chunks(cols) {
            softmax_err = softmax_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }

        let gain = g.constant(&Tensor::full(&[cols], 1.0));
        let bias = g.constant(&Tensor::zeros(&[cols]));
        let ln = g.layernorm(zv, gain, bias, 1e-5).map_err(|e| e.to_string())?;
        if cols > 1 {
            for row in g.value(ln).chunks(cols) {
                ln_mean = ln_mean.max((row.iter().sum::<f64>() / cols as f64).abs());
            }
        }

        let n = rng.random_range(1..3);
        let (lq, lc) = (rng.random_range(1..4), rng.random_range(1..6));
        let q = g.constant(&random_tensor(&[n, lq, cfg.dim], scale, &mut rng));
        let c = g.constant(&random_tensor(&[n, lc, cfg.dim], scale, &mut rng));
        let bound = params.bind_frozen(&mut g);
        let (_, attn) = multi_head_attention(&mut g, &bound.ete[0], &cfg, q, c).map_err(|e| e.to_string())?;
        for row in g.value(attn).chunks(lc) {
            attn_err = attn_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(softmax_err < 1e-12, || format!("softmax row sum off by {softmax_err:.2e}"))?;
    ensure(attn_err < 1e-12, || format!("attention row sum off by {attn_err:.2e}"))?;
    ensure(ln_mean < 1e-9, || format!("layernorm row mean {ln_mean:.2e}"))?;
    Ok(format!("softmax {softmax_err:.1e}, attention {attn_err:.1e}, layernorm mean {ln_mean:.1e}"))
}

fn loss_degeneracies() -> Outcome {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = ModelParams::init(&cfg, &mut rng);
    let x = random_tensor(&[2, cfg.seq_len, 1, cfg.samples_per_epoch], 1.0, &mut rng);
    let xp = random_tensor(&[2, cfg.seq_len, 1, cfg.samples_per_epoch], 1.0, &mut rng);
    let labels: Vec<u8> = (0..2 * cfg.seq_len).map(|i| (i % N_CLASSES) as u8).collect();
    let mut worst_recompose = 0.0f64;
    for (i, companion) in [&x, &xp].into_iter().enumerate() {
        for loss in [LossConfig::default(), LossConfig { tau: 2.0, lambda: 0.3, alpha: 0.05, cosine: true }] {
            let mut g = Graph::new();
            let bound = params.bind_frozen(&mut g);
            let (xv, xpv) = (g.constant(&x), g.constant(companion));
            let (fwd, rev) = sst_forward_pair(&mut g, &bound, &cfg, xv, xpv).map_err(|e| e.to_string())?;
            let v = total_loss(&mut g, &fwd, &rev, &labels, &loss).map_err(|e| e.to_string())?.values(&g);
            if i == 0 {
                ensure(v.cos == 0.0 && v.kl == 0.0, || format!("X' == X gives cos {:e}, kl {:e}", v.cos, v.kl))?;
            } else {
                ensure(v.cos > 0.0 && v.kl > 0.0, || format!("X' != X gives cos {:e}, kl {:e}", v.cos, v.kl))?;
            }
            let recomposed = v.ls + v.cos + loss.lambda * loss.tau * loss.tau * v.kl;
            worst_recompose = worst_recompose.max((v.total - recomposed).abs());
        }
    }
    ensure(worst_recompose <= 1e-12, || format!("recomposition off by {worst_recompose:e}"))?;
    Ok(format!("cos = kl = 0 exactly for X' == X; recomposition within {worst_recompose:.1e}"))
}

fn overfit_and_transfer() -> Outcome {
    let model = ModelConfig::toy();
    let store = toy_store(6, 60, 11);
    let fresh = toy_store(6, 60, 12);
    let cfg = TrainConfig {
        max_steps: 500,
        validate_every: 50,
        patience: 3,
        batch_size: 16,
        val_fraction: 0.2,
        ..TrainConfig::default()
    };
    let (params, summary) = train(&store, &model, &cfg).map_err(|e| e.to_string())?;
    let loss = LossConfig::default();
    let pred = predict_store(&Inference { config: &model, params: &params }, &store, model.seq_len, &loss)
        .map_err(|e| e.to_string())?;
    let acc = evaluate_metrics(&pred.truth, &pred.pred).map_err(|e| e.to_string())?.accuracy;
    let transfer = transfer_evaluate(&model, &params, &fresh, &loss).map_err(|e| e.to_string())?;
    ensure(summary.steps_trained <= 500, || format!("trained {} steps", summary.steps_trained))?;
    ensure(acc >= 0.99, || format!("training accuracy {acc:.4} after {} steps", summary.steps_trained))?;
    ensure(transfer.macro_f1 >= 0.9, || format!("transfer macro-F1 {:.4}", transfer.macro_f1))?;
    Ok(format!(
        "training accuracy {acc:.4} (best step {} of {}), transfer macro-F1 {:.4}",
        summary.best_step, summary.steps_trained, transfer.macro_f1
    ))
}

fn sampling_protocol() -> Outcome {
    let store = toy_store(6, 80, 21);
    let index = WindowIndex::build(&store, 4).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut memory = SamplingMemory::new(0.25, SamplingMode::EasyDifficult).map_err(|e| e.to_string())?;

    let scripted = [1.0, 0.8, 0.9, 1.4, 1.4, 0.8, 0.3, 2.0, 0.5];
    let (mut best, mut worst) = (f64::INFINITY, f64::NEG_INFINITY);
    for loss in scripted {
        let batch = draw_pair_batch(&store, &index, &memory, 2, &mut rng).map_err(|e| e.to_string())?;
        update_memory(&mut memory, &batch, loss).map_err(|e| e.to_string())?;
        ensure(memory.best() <= best && memory.worst() >= worst, || "watermarks moved backwards".into())?;
        best = memory.best();
        worst = memory.worst();
        ensure(memory.easy.as_ref().map(|s| s.loss) == Some(best), || "easy slot does not hold the best loss".into())?;
        ensure(memory.difficult.as_ref().map(|s| s.loss) == Some(worst), || {
            "difficult slot does not hold the worst loss".into()
        })?;
    }
    ensure((best, worst) == (0.3, 2.0), || format!("watermarks ({best}, {worst})"))?;

    let draws = 100_000;
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        let b = draw_pair_batch(&store, &index, &memory, 1, &mut rng).map_err(|e| e.to_string())?;
        counts[match b.provenance {
            Provenance::Easy => 0,
            Provenance::Difficult => 1,
            Provenance::Random => 2,
        }] += 1;
    }
    let freq = counts.map(|c| c as f64 / draws as f64);
    for (f, target) in freq.iter().zip([0.25, 0.25, 0.5]) {
        ensure((f - target).abs() <= 0.01, || format!("provenance frequencies {freq:?}"))?;
    }

    let windows = balanced_anchor_indices(&index, draws, &mut rng).map_err(|e| e.to_string())?;
    let mut centers = [0usize; N_CLASSES];
    for w in &windows {
        centers[store.label(w.epochs(4)[2]) as usize] += 1;
    }
    let center_freq = centers.map(|c| c as f64 / draws as f64);
    ensure(center_freq.iter().all(|f| (f - 0.2).abs() <= 0.01), || format!("center-class frequencies {center_freq:?}"))?;
    Ok(format!(
        "provenance ({:.4}, {:.4}, {:.4}), center classes within {:.4} of 0.2",
        freq[0],
        freq[1],
        freq[2],
        center_freq.iter().map(|f| (f - 0.2).abs()).fold(0.0, f64::max)
    ))
}

/// Improves `k` times, then reports the same score forever. Keeps a copy of
/// the weights it saw at every validation.
struct PlateauValidator {
    k: usize,
    calls: usize,
    seen: Vec<(usize, ModelParams)>,
}

impl Validator for PlateauValidator {
    fn validate(&mut self, _: &ModelConfig, params: &ModelParams, step: usize) -> sst_core::Result<(f64, MetricsReport)> {
        self.calls += 1;
        self.seen.push((step, params.clone()));
        let level = self.calls.min(self.k) as u64;
        let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
        confusion[0][0] = level;
        confusion[1][0] = 20;
        Ok((1.0, MetricsReport::from_confusion(confusion)))
    }
}

fn early_stopping() -> Outcome {
    let model = ModelConfig::toy();
    let store = toy_store(2, 40, 31);
    let cfg = TrainConfig { max_steps: 1000, validate_every: 3, patience: 10, batch_size: 2, ..TrainConfig::default() };
    let k = 4;
    let mut v = PlateauValidator { k, calls: 0, seen: Vec::new() };
    let (params, summary) = train_with(&store, &model, &cfg, &mut v).map_err(|e| e.to_string())?;
    let best_step = k * cfg.validate_every;
    ensure(summary.best_step == best_step, || format!("best step {} instead of {best_step}", summary.best_step))?;
    ensure(summary.history.len() == k + 10, || format!("{} validations instead of {}", summary.history.len(), k + 10))?;
    ensure(summary.steps_trained == best_step + 10 * cfg.validate_every, || {
        format!("stopped at step {}", summary.steps_trained)
    })?;
    ensure(summary.stopped_early, || "not flagged as stopped early".into())?;
    let snapshot = &v.seen.iter().find(|(s, _)| *s == best_step).expect("validated at best step").1;
    ensure(&params == snapshot, || "returned weights are not the best-validation weights".into())?;
    ensure(&params != &v.seen.last().unwrap().1, || "returned weights equal the final weights".into())?;
    Ok(format!(
        "best at step {best_step}, halted at step {} after 10 further validations",
        summary.steps_trained
    ))
}

/// Per-class F1, accuracy and kappa by direct counting.
fn counting_oracle(t: &[u8], p: &[u8]) -> ([f64; N_CLASSES], f64, f64) {
    let n = t.len();
    let mut f1 = [0.0; N_CLASSES];
    let mut chance = 0.0;
    for c in 0..N_CLASSES as u8 {
        let tp = (0..n).filter(|&i| t[i] == c && p[i] == c).count();
        let fp = (0..n).filter(|&i| t[i] != c && p[i] == c).count();
        let fn_ = (0..n).filter(|&i| t[i] == c && p[i] != c).count();
        f1[c as usize] = if tp + fp + fn_ == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        let rows = t.iter().filter(|&&v| v == c).count() as f64;
        let cols = p.iter().filter(|&&v| v == c).count() as f64;
        chance += rows * cols;
    }
    let acc = (0..n).filter(|&i| t[i] == p[i]).count() as f64 / n as f64;
    let pe = chance / (n * n) as f64;
    let kappa = if pe == 1.0 { 0.0 } else { (acc - pe) / (1.0 - pe) };
    (f1, acc, kappa)
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for trial in 0..1000 {
        let n = rng.random_range(1..=200);
        let t: Vec<u8> = (0..n).map(|_| rng.random_range(0..N_CLASSES as u8)).collect();
        let p: Vec<u8> = (0..n).map(|_| rng.random_range(0..N_CLASSES as u8)).collect();
        let m = evaluate_metrics(&t, &p).map_err(|e| e.to_string())?;
        let (f1, acc, kappa) = counting_oracle(&t, &p);
        ensure(m.per_class_f1 == f1 && m.accuracy == acc && m.kappa == kappa, || format!("trial {trial} differs"))?;
        ensure(m.macro_f1 == f1.iter().sum::<f64>() / N_CLASSES as f64, || format!("trial {trial} macro F1"))?;
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let m = evaluate_metrics(&[0, 0, 1, 1], &[0, 1, 0, 1]).map_err(|e| e.to_string())?;
    ensure(close(m.accuracy, 0.5) && close(m.kappa, 0.0), || format!("2x2 case {m:?}"))?;
    ensure(close(m.per_class_f1[0], 0.5) && close(m.per_class_f1[1], 0.5), || format!("2x2 case {m:?}"))?;
    let m = evaluate_metrics(&[0, 0, 0, 1], &[0, 0, 0, 0]).map_err(|e| e.to_string())?;
    ensure(close(m.accuracy, 0.75) && close(m.per_class_f1[0], 6.0 / 7.0) && m.per_class_f1[1] == 0.0, || {
        format!("majority case {m:?}")
    })?;
    let m = evaluate_metrics(&[0, 1, 2, 3, 4], &[0, 1, 2, 3, 4]).map_err(|e| e.to_string())?;
    ensure(m.accuracy == 1.0 && m.kappa == 1.0 && m.per_class_f1 == [1.0; 5], || format!("identity case {m:?}"))?;
    Ok("1000 random vectors match the counting oracle exactly; hand cases match".into())
}

fn edf_round_trip() -> Outcome {
    let hyp = Hypnogram {
        entries: vec![
            HypnogramEntry { onset: 0.0, duration: 30.0, stage: Stage::Wake },
            HypnogramEntry { onset: 30.0, duration: 60.0, stage: Stage::N2 },
            HypnogramEntry { onset: 90.0, duration: 30.0, stage: Stage::Rem },
            HypnogramEntry { onset: 120.0, duration: 30.0, stage: Stage::Other },
        ],
    };
    let tal: &[u8] = b"+0\x14\x14\x00+0\x1530\x14Sleep stage W\x14\x00+30\x1560\x14Sleep stage 2\x14\x00\
+90\x1530\x14Sleep stage R\x14\x00+120\x1530\x14Sleep stage ?\x14\x00";
    let decoded = parse_tal_annotations(tal).map_err(|e| e.to_string())?;
    ensure(decoded == hyp, || format!("TAL decoded to {decoded:?}"))?;

    // Each record starts with its time-keeping TAL; stage TALs never straddle records.
    let records: [&[u8]; 3] = [
        b"+0\x14\x14\x00+0\x1530\x14Sleep stage W\x14\x00",
        b"+1\x14\x14\x00+30\x1560\x14Sleep stage 2\x14\x00",
        b"+2\x14\x14\x00+90\x1530\x14Sleep stage R\x14\x00+120\x1530\x14Sleep stage ?\x14\x00",
    ];
    let n_records = records.len();
    let eeg = signal_header("EEG Fpz-Cz", -200.0, 200.0, 100);
    let eog = signal_header("EOG horizontal", -500.0, 500.0, 50);
    let ann = annotation_header(records.iter().map(|r| r.len()).max().unwrap_or(0) + 2);
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut digital = |n: usize| -> Vec<i16> { (0..n).map(|_| rng.random::<i16>()).collect() };
    let traces = [(&eeg, digital(300)), (&eog, digital(150))];
    let mut signals: Vec<SignalTrace> = traces
        .iter()
        .map(|(h, d)| SignalTrace {
            label: h.label.clone(),
            fs: h.samples_per_record as f64,
            samples: d.iter().map(|&v| h.scale(v)).collect(),
            digital: d.clone(),
        })
        .collect();
    let mut ann_digital = Vec::new();
    for r in records {
        ann_digital.extend(tal_to_digital(r, ann.samples_per_record).map_err(|e| e.to_string())?);
    }
    signals.push(SignalTrace {
        label: ann.label.clone(),
        fs: ann.samples_per_record as f64,
        samples: ann_digital.iter().map(|&v| ann.scale(v)).collect(),
        digital: ann_digital,
    });
    let file = EdfFile {
        header: EdfHeader {
            version: "0".into(),
            patient: "X X X X".into(),
            recording: "Startdate 01-JAN-2020 X X X".into(),
            start_date: "01.01.20".into(),
            start_time: "23.00.00".into(),
            header_bytes: 256 * 4,
            reserved: "EDF+C".into(),
            n_records: n_records as i64,
            record_duration: 1.0,
            signals: vec![eeg, eog, ann],
        },
        signals,
        warnings: vec![],
    };
    let bytes = write_edf(&file).map_err(|e| e.to_string())?;
    let parsed = parse_edf(&bytes).map_err(|e| e.to_string())?;
    ensure(parsed.header == file.header, || "header differs after parsing".into())?;
    ensure(parsed.signals == file.signals, || "samples differ after parsing".into())?;
    ensure(write_edf(&parsed).map_err(|e| e.to_string())? == bytes, || "rewritten bytes differ".into())?;
    let in_file = parse_tal_annotations(&parsed.annotation_bytes().unwrap_or_default()).map_err(|e| e.to_string())?;
    ensure(in_file == hyp, || format!("embedded annotations decoded to {in_file:?}"))?;

    let record_bytes = file.header.record_bytes();
    let cut = 1024 + record_bytes + 17;
    match parse_edf(&bytes[..cut]) {
        Err(Error::Parse { offset, .. }) => {
            ensure(offset == 1024 + record_bytes, || format!("truncation reported at byte {offset}"))?;
            Ok(format!("3 signals x {n_records} records bit-exact; TAL decoded; truncation at byte {offset}"))
        }
        other => Err(format!("truncated file gave {other:?}")),
    }
}

fn resampling() -> Outcome {
    let fs_in = 125.0;
    let x: Vec<f64> = (0..3750).map(|n| (2.0 * std::f64::consts::PI * 5.0 * n as f64 / fs_in).sin()).collect();
    let y = resample(&SignalTrace::from_physical("EEG", fs_in, x), 100.0).map_err(|e| e.to_string())?;
    ensure(y.samples.len() == 3000, || format!("{} samples", y.samples.len()))?;
    let mid = &y.samples[200..2800];
    let peak = mid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rms = (mid.iter().map(|v| v * v).sum::<f64>() / mid.len() as f64).sqrt();
    let rms_ratio = rms / std::f64::consts::FRAC_1_SQRT_2;
    ensure((peak - 1.0).abs() < 0.01, || format!("peak amplitude {peak}"))?;
    ensure((rms_ratio - 1.0).abs() < 0.01, || format!("RMS ratio {rms_ratio}"))?;
    Ok(format!("3750 -> {} samples, peak {peak:.5}, RMS ratio {rms_ratio:.5}", y.samples.len()))
}

const TOY_RUN: &str = r#"
[model]
fs = 10
seq_len = 4
dim = 16
tokens = 4
heads = 4
head_dim = 4
depth = 1
ffn_dim = 32

[train]
max_steps = 150
validate_every = 30
patience = 2
batch_size = 8
seed = 7

[data]
source = "synthetic"
test = "synthetic"

[synth]
subjects = 5
epochs = 40
seed = 3
"#;

fn sst(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sst"))
        .args(args)
        .env_remove("SST_SEED")
        .output()
        .map_err(|e| format!("cannot run sst: {e}"))?;
    if !out.status.success() {
        return Err(format!("sst {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn sd_fields(report: &serde_json::Value) -> Vec<f64> {
    report["modes"]
        .as_array()
        .into_iter()
        .flatten()
        .flat_map(|m| ["macro_f1_sd", "accuracy_sd", "kappa_sd"].map(|k| m[k].as_f64().unwrap_or(f64::NAN)))
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("toy.toml");
    std::fs::write(&config, TOY_RUN).map_err(|e| e.to_string())?;
    let config = config.to_str().unwrap();
    let runs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for run in &runs {
        sst(&["train", "-c", config, "-o", run.to_str().unwrap()])?;
    }
    for file in ["model.ckpt", "summary.json", "metrics.json", "test_metrics.json"] {
        ensure(read(&runs[0].join(file))? == read(&runs[1].join(file))?, || format!("{file} differs between runs"))?;
    }
    let other = dir.path().join("c");
    sst(&["train", "-c", config, "-o", other.to_str().unwrap(), "--seed", "8"])?;
    ensure(read(&other.join("model.ckpt"))? != read(&runs[0].join("model.ckpt"))?, || {
        "a different seed gave the same checkpoint".into()
    })?;

    let json = dir.path().join("variance.json");
    let out = sst(&[
        "variance", "-c", config, "--runs", "2", "--identical-seeds", "--modes", "none,easy", "--set",
        "train.max_steps=60", "-o", json.to_str().unwrap(),
    ])?;
    let report: serde_json::Value = serde_json::from_slice(&read(&json)?).map_err(|e| e.to_string())?;
    let sds = sd_fields(&report);
    ensure(sds.len() == 6 && sds.iter().all(|s| *s == 0.0), || format!("sd fields {sds:?}"))?;
    let table = String::from_utf8_lossy(&out.stdout);
    ensure(table.lines().skip(1).all(|l| l.matches("± 0.000").count() == 3), || format!("table:\n{table}"))?;
    Ok("identical checkpoints, summaries and metrics; identical-seed variance sd == 0".into())
}

fn variance_mechanism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("toy.toml");
    std::fs::write(&config, TOY_RUN).map_err(|e| e.to_string())?;
    let json = dir.path().join("variance.json");
    let start = Instant::now();
    let out = sst(&["variance", "-c", config.to_str().unwrap(), "--runs", "5", "-o", json.to_str().unwrap()])?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(3600), || format!("took {elapsed:?}"))?;
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    ensure(rows.len() == 3, || format!("expected three rows:\n{table}"))?;
    for (row, mode) in rows.iter().zip(["none", "easy", "easy+difficult"]) {
        ensure(row.split_whitespace().next() == Some(mode) && row.matches('±').count() == 3, || {
            format!("malformed row `{row}`")
        })?;
    }
    let report: serde_json::Value = serde_json::from_slice(&read(&json)?).map_err(|e| e.to_string())?;
    ensure(report["runs"].as_array().map(Vec::len) == Some(15), || "expected 15 runs".into())?;
    let sds = sd_fields(&report);
    ensure(sds.len() == 9 && sds.iter().all(|s| *s >= 0.0), || format!("sd fields {sds:?}"))?;
    print!("{}", table.lines().map(|l| format!("    {l}\n")).collect::<String>());
    Ok(format!("5 seeds x 3 modes in {:.0} s", elapsed.as_secs_f64()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient correctness", gradient_check),
        ("normalization invariants", normalization),
        ("loss degeneracies", loss_degeneracies),
        ("overfit and transfer", overfit_and_transfer),
        ("sampling protocol", sampling_protocol),
        ("early stopping", early_stopping),
        ("metrics oracle", metrics_oracle),
        ("EDF round trip", edf_round_trip),
        ("resampling", resampling),
        ("determinism", determinism),
        ("variance experiment", variance_mechanism),
    ];
    let limits = [60, 0, 0, 600, 0, 0, 0, 0, 0, 0, 3600];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, ((name, check), limit)) in criteria.iter().zip(limits).enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let mut outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        if limit > 0 && secs > limit as f64 {
            outcome = Err(format!("took {secs:.1} s, limit {limit} s"));
        }
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {status} {name}: {detail} [{secs:.1} s]", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
