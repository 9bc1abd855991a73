//! Subcommand implementations. Each writes its artifacts under `out`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use anyhow::{bail, Context, Result};
use blinknet::checkpoint::{load_model, save_model, CheckpointInfo};
use blinknet::config::RunConfig;
use blinknet::datagen::{generate_dataset, load_split, SequenceSample};
use blinknet::gradcheck::{end_to_end, shrunk_model, END_TO_END_TOLERANCE};
use blinknet::semantics::{IntentState, LightState, ViewFace};
use blinknet::training::{
    ablate as run_ablation, ablation_variants, effective_model, evaluate, predict, train as run_training, AblationObserver,
    EpochRecord, Evaluation, MetricsReport, SequencePrediction, TrainObserver, TrainOutcome, Variant,
};
use blinknet::model::ModelConfig;
use blinknet::ParamStore;
use blinknet_tensor::gradcheck::op_suite;
use serde_json::json;

pub const SNAPSHOT_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const RUNS_FILE: &str = "ablation_runs.jsonl";

/// Records the effective configuration next to the run's outputs.
pub fn write_snapshot(out: &Path, config: &RunConfig) -> Result<()> {
    write_file(&out.join(SNAPSHOT_FILE), &config.to_toml()?)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_report(out: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    write_file(&out.join(format!("{stem}.json")), &report.to_json())?;
    write_file(&out.join(format!("{stem}.txt")), &report.to_table())
}

fn load(data: &Path, split: &str) -> Result<Vec<SequenceSample>> {
    load_split(data, split).with_context(|| format!("loading split `{split}` of {}", data.display()))
}

pub fn gen(config: &RunConfig, out: &Path) -> Result<()> {
    let manifest = generate_dataset(&config.data, config.seed, out)?;
    log::info!(
        "dataset of {} + {} + {} sequences in {}",
        manifest.train.sequences.len(),
        manifest.val.sequences.len(),
        manifest.test.sequences.len(),
        out.display()
    );
    Ok(())
}

/// Streams the epoch log, keeps wall-clock times in a sidecar, and saves the
/// checkpoint whenever validation F1 improves.
struct RunFiles<'a> {
    out: &'a Path,
    config: &'a RunConfig,
    model: ModelConfig,
    epochs: BufWriter<File>,
    timing: BufWriter<File>,
}

fn io_error(path: &Path, source: std::io::Error) -> blinknet::Error {
    blinknet::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn append(w: &mut BufWriter<File>, path: &Path, line: &str) -> blinknet::Result<()> {
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| io_error(path, e))
}

impl TrainObserver for RunFiles<'_> {
    fn epoch(&mut self, record: &EpochRecord, seconds: f64, params: &ParamStore<f32>) -> blinknet::Result<()> {
        let line = serde_json::to_string(record).map_err(|e| io_error(&self.out.join(EPOCHS_FILE), e.into()))?;
        append(&mut self.epochs, &self.out.join(EPOCHS_FILE), &line)?;
        let timing = json!({ "epoch": record.epoch, "seconds": seconds }).to_string();
        append(&mut self.timing, &self.out.join(TIMING_FILE), &timing)?;
        log::info!(
            "epoch {}: lr {:.2e} train loss {:.4} val loss {:.4} acc {:.2}% F1 {:.2}%{}",
            record.epoch,
            record.lr,
            record.train_loss,
            record.val_loss,
            100.0 * record.val_accuracy,
            100.0 * record.val_f1,
            if record.best { " (best)" } else { "" }
        );
        if record.best {
            let info = CheckpointInfo {
                seed: self.config.seed,
                epoch: record.epoch,
                val_f1: record.val_f1,
            };
            save_model(&self.out.join(CHECKPOINT_FILE), &self.model, params, &info)?;
        }
        Ok(())
    }
}

pub fn train(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let train_set = load(data, "train")?;
    let val_set = load(data, "val")?;
    let mut files = RunFiles {
        out,
        config,
        model: effective_model(&config.model, &config.train),
        epochs: create(&out.join(EPOCHS_FILE))?,
        timing: create(&out.join(TIMING_FILE))?,
    };
    let outcome: TrainOutcome = run_training(&config.model, &config.train, config.seed, &train_set, &val_set, &mut files)?;
    write_report(out, "val_metrics", &outcome.best.report)?;
    log::info!(
        "best epoch {} of {} in {:.0}s; checkpoint {}",
        outcome.best_epoch,
        outcome.log.len(),
        outcome.seconds,
        out.join(CHECKPOINT_FILE).display()
    );
    println!("{}", outcome.best.report.to_table());
    Ok(())
}

pub fn eval(config: &RunConfig, checkpoint: &Path, data: &Path, split: &str, out: &Path) -> Result<()> {
    let ckpt = load_model(checkpoint)?;
    let samples = load(data, split)?;
    let evaluation: Evaluation = evaluate(&ckpt.model, &ckpt.params, &samples, &config.train)?;
    write_report(out, "metrics", &evaluation.report)?;
    println!("{}", evaluation.report.to_table());
    Ok(())
}

fn class_name<T: ToString>(all: &[T], probs: &[f32]) -> String {
    let best = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i);
    all[best].to_string()
}

/// The frame on the left and its attention mask in gray on the right.
fn mask_image(frame: &[u8], mask: &[f32], size: usize) -> image::RgbImage {
    image::RgbImage::from_fn(2 * size as u32, size as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if x < size {
            let i = (y * size + x) * 3;
            image::Rgb([frame[i], frame[i + 1], frame[i + 2]])
        } else {
            let v = (mask[y * size + x - size].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([v, v, v])
        }
    })
}

#[allow(clippy::too_many_arguments)]
pub fn infer(
    config: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: &str,
    range: Range<usize>,
    masks: bool,
    out: &Path,
) -> Result<()> {
    let ckpt = load_model(checkpoint)?;
    let samples = load(data, split)?;
    let end = range.end.min(samples.len());
    if range.start >= end {
        bail!("--start {} is past the {} sequences of split `{split}`", range.start, samples.len());
    }
    let slice = &samples[range.start..end];
    let preds: Vec<SequencePrediction> = predict(&ckpt.model, &ckpt.params, slice, config.train.eval_batch)?;
    let mask_dir = out.join("masks");
    let write_masks = masks && ckpt.model.attention.enabled;
    if write_masks {
        std::fs::create_dir_all(&mask_dir).with_context(|| format!("creating {}", mask_dir.display()))?;
    }
    let mut lines = create(&out.join("predictions.jsonl"))?;
    let mut correct = 0usize;
    let mut frames = 0usize;
    for (k, (sample, pred)) in slice.iter().zip(&preds).enumerate() {
        let index = range.start + k;
        for (t, (f, truth)) in pred.frames.iter().zip(&sample.labels).enumerate() {
            let intent = class_name(IntentState::ALL, &f.intent);
            correct += (intent == truth.intent.to_string()) as usize;
            frames += 1;
            let line = json!({
                "sequence": index,
                "frame": t,
                "intent": intent,
                "left": class_name(LightState::ALL, &f.left),
                "right": class_name(LightState::ALL, &f.right),
                "view": class_name(ViewFace::ALL, &f.view),
                "intent_probs": f.intent,
                "truth": {
                    "intent": truth.intent.to_string(),
                    "left": truth.left.to_string(),
                    "right": truth.right.to_string(),
                    "view": truth.view.to_string(),
                },
            });
            writeln!(lines, "{line}")?;
        }
        if let (true, Some(maps)) = (write_masks, &pred.masks) {
            for (t, mask) in maps.iter().enumerate() {
                let path = mask_dir.join(format!("seq{index:04}_frame{t:03}.png"));
                mask_image(sample.frame(t), mask, sample.canvas())
                    .save(&path)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    lines.flush()?;
    log::info!(
        "{frames} frames from {} sequences, intent accuracy {:.2}%",
        slice.len(),
        100.0 * correct as f64 / frames.max(1) as f64
    );
    Ok(())
}

pub fn gradcheck(draws: u64, fraction: f64, out: &Path) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        bail!(crate::UsageError(format!("--fraction {fraction} must lie in (0, 1]")));
    }
    let mut reports = op_suite(draws)?;
    let model = shrunk_model();
    for seed in 0..draws {
        reports.push(end_to_end(&model, 2, 2, fraction, seed)?);
    }
    let mut text = String::new();
    for r in &reports {
        text.push_str(&format!("{r}\n"));
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    text.push_str(&format!(
        "{} checks, {failed} failed (end-to-end tolerance {END_TO_END_TOLERANCE:.0e})\n",
        reports.len()
    ));
    print!("{text}");
    write_file(&out.join("gradcheck.txt"), &text)?;
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

/// Appends one line per finished ablation run.
struct RunLog(BufWriter<File>);

impl AblationObserver for RunLog {
    fn run(&mut self, variant: &Variant, seed: u64, outcome: &TrainOutcome, test: &Evaluation) -> blinknet::Result<()> {
        let line = json!({
            "variant": variant.name,
            "seed": seed,
            "best_epoch": outcome.best_epoch,
            "val_f1": outcome.best.report.f1,
            "test": test.report,
        });
        append(&mut self.0, Path::new(RUNS_FILE), &line.to_string())
    }
}

pub fn ablate(config: &RunConfig, data: &Path, seeds: &[u64], names: &[String], out: &Path) -> Result<()> {
    let all = ablation_variants();
    let variants: Vec<Variant> = if names.is_empty() {
        all
    } else {
        names
            .iter()
            .map(|n| {
                all.iter().find(|v| &v.name == n).cloned().ok_or_else(|| {
                    let known: Vec<&str> = all.iter().map(|v| v.name.as_str()).collect();
                    crate::UsageError(format!("--variants: unknown variant `{n}` (known: {})", known.join(", ")))
                })
            })
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        bail!(crate::UsageError("--seeds: at least one seed is required".into()));
    }
    let train_set = load(data, "train")?;
    let val_set = load(data, "val")?;
    let test_set = load(data, "test")?;
    let mut runs = RunLog(create(&out.join(RUNS_FILE))?);
    let report = run_ablation(&config.model, &config.train, &variants, seeds, &train_set, &val_set, &test_set, &mut runs)?;
    write_file(&out.join("ablation.json"), &report.to_json())?;
    write_file(&out.join("ablation.txt"), &report.to_table())?;
    println!("{}", report.to_table());
    Ok(())
}
