//! The training loop, full-sequence evaluation and inference.

use std::collections::BTreeMap;
use std::time::Instant;

use blinknet_tensor::{RngStream, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::augment::{augment, Clip};
use super::batches::StratifiedSampler;
use super::config::TrainConfig;
use super::loss::multitask_loss;
use super::metrics::{confusion, Confusion, MetricsReport};
use super::plateau::PlateauScheduler;
use crate::datagen::SequenceSample;
use crate::error::{Error, Result};
use crate::model::{forward_sequence, init_model, is_dense_weight, FrameOutput, ForwardOptions, ModelConfig, HEAD_NAMES};
use crate::params::ParamStore;
use crate::semantics::{argmax_class, FrameLabel, IntentState};

/// Frames `[T, N, 3, S, S]` in `[0, 1]` and time-major labels (`t·N + n`).
#[derive(Clone, Debug)]
pub struct Batch {
    pub frames: Tensor<f32>,
    pub labels: Vec<FrameLabel>,
}

/// Stacks equal-length clips into one batch.
pub fn assemble_batch(clips: &[Clip]) -> Result<Batch> {
    let first = clips.first().ok_or_else(|| Error::LengthMismatch("empty batch".into()))?;
    let (steps, size) = (first.len(), first.size);
    if let Some(bad) = clips.iter().find(|c| c.len() != steps || c.size != size) {
        return Err(Error::LengthMismatch(format!(
            "clip of {} frames at {}px in a batch of {steps} frames at {size}px",
            bad.len(),
            bad.size
        )));
    }
    let n = clips.len();
    let plane = size * size;
    let mut data = vec![0f32; steps * n * 3 * plane];
    let mut labels = Vec::with_capacity(steps * n);
    for t in 0..steps {
        for (b, clip) in clips.iter().enumerate() {
            let src = &clip.frames[t * plane * 3..(t + 1) * plane * 3];
            let dst = &mut data[(t * n + b) * 3 * plane..(t * n + b + 1) * 3 * plane];
            for p in 0..plane {
                for c in 0..3 {
                    dst[c * plane + p] = src[p * 3 + c] as f32 / 255.0;
                }
            }
            labels.push(clip.labels[t]);
        }
    }
    Ok(Batch {
        frames: Tensor::new(&[steps, n, 3, size, size], data)?,
        labels,
    })
}

/// Mean loss over frames, in total and per supervised head.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    /// Unweighted per-head terms keyed by head name; unsupervised heads are absent.
    pub tasks: BTreeMap<String, f64>,
}

#[derive(Default)]
struct LossAccumulator {
    frames: f64,
    total: f64,
    tasks: BTreeMap<String, f64>,
}

impl LossAccumulator {
    fn add(&mut self, frames: usize, total: f64, heads: [Option<f64>; 4]) {
        let w = frames as f64;
        self.frames += w;
        self.total += w * total;
        for (h, v) in heads.iter().enumerate() {
            if let Some(v) = v {
                *self.tasks.entry(HEAD_NAMES[h].to_string()).or_default() += w * v;
            }
        }
    }

    fn finish(self) -> LossSummary {
        let n = self.frames.max(1.0);
        LossSummary {
            total: self.total / n,
            tasks: self.tasks.into_iter().map(|(k, v)| (k, v / n)).collect(),
        }
    }
}

/// Per-frame outputs and attention masks of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePrediction {
    pub frames: Vec<FrameOutput>,
    /// One `S·S` mask per frame when attention is enabled.
    pub masks: Option<Vec<Vec<f32>>>,
}

impl SequencePrediction {
    pub fn intents(&self) -> Result<Vec<IntentState>> {
        self.frames
            .iter()
            .map(|f| Ok(IntentState::ALL[argmax_class(&f.intent)?]))
            .collect()
    }
}

/// Groups sample indices into equal-length batches of at most `batch`,
/// preserving order within each length.
fn length_groups(samples: &[SequenceSample], batch: usize) -> Vec<Vec<usize>> {
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if !s.is_empty() {
            by_len.entry(s.len()).or_default().push(i);
        }
    }
    by_len
        .into_values()
        .flat_map(|idx| idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

fn check_compatible(model: &ModelConfig, samples: &[SequenceSample]) -> Result<()> {
    if let Some(s) = samples.iter().find(|s| s.canvas() != model.input_size) {
        return Err(Error::Incompatible(format!(
            "{}px frames for a model with {}px input",
            s.canvas(),
            model.input_size
        )));
    }
    Ok(())
}

/// Runs each whole sequence from a zero state with inference semantics.
pub fn predict(
    model: &ModelConfig,
    params: &ParamStore<f32>,
    samples: &[SequenceSample],
    batch: usize,
) -> Result<Vec<SequencePrediction>> {
    check_compatible(model, samples)?;
    let mut out: Vec<Option<SequencePrediction>> = vec![None; samples.len()];
    let opts = ForwardOptions::inference();
    for group in length_groups(samples, batch) {
        let clips: Vec<Clip> = group.iter().map(|&i| Clip::from_sample(&samples[i], 0, samples[i].len())).collect();
        let b = assemble_batch(&clips)?;
        let mut tape = Tape::inference();
        let vars = params.register(&mut tape);
        let x = tape.constant(b.frames);
        let y = forward_sequence(&mut tape, x, model, &vars, &opts, &mut RngStream::new(0))?;
        let plane = model.input_size * model.input_size;
        for (n, &i) in group.iter().enumerate() {
            let masks = y.mask.map(|m| {
                let data = tape.value(m).data();
                (0..y.steps)
                    .map(|t| {
                        let row = t * y.batch + n;
                        data[row * plane..(row + 1) * plane].to_vec()
                    })
                    .collect()
            });
            out[i] = Some(SequencePrediction {
                frames: y.frames(&tape, n),
                masks,
            });
        }
    }
    Ok(out
        .into_iter()
        .map(|p| p.unwrap_or(SequencePrediction {
            frames: Vec::new(),
            masks: None,
        }))
        .collect())
}

/// Metrics and loss of a model over whole sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: LossSummary,
    pub report: MetricsReport,
}

/// Frame-level evaluation of full sequences. The loss uses the loss mode and
/// task weights of `train`.
pub fn evaluate(
    model: &ModelConfig,
    params: &ParamStore<f32>,
    samples: &[SequenceSample],
    train: &TrainConfig,
) -> Result<Evaluation> {
    check_compatible(model, samples)?;
    let opts = ForwardOptions::inference();
    let mut loss = LossAccumulator::default();
    let mut matrix = Confusion::from_counts(Default::default());
    for group in length_groups(samples, train.eval_batch) {
        let clips: Vec<Clip> = group.iter().map(|&i| Clip::from_sample(&samples[i], 0, samples[i].len())).collect();
        let b = assemble_batch(&clips)?;
        let mut tape = Tape::inference();
        let vars = params.register(&mut tape);
        let x = tape.constant(b.frames);
        let y = forward_sequence(&mut tape, x, model, &vars, &opts, &mut RngStream::new(0))?;
        let terms = multitask_loss(&mut tape, y.heads(), &b.labels, &train.weights, train.mode)?;
        let read = |v| tape.value(v).data()[0] as f64;
        loss.add(b.labels.len(), read(terms.total), terms.heads.map(|h| h.map(read)));
        let probs = tape.value(y.intent).data();
        let preds = probs
            .chunks_exact(IntentState::COUNT)
            .map(|row| Ok(IntentState::ALL[argmax_class(row)?]))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<IntentState> = b.labels.iter().map(|l| l.intent).collect();
        matrix.merge(&confusion(&preds, &labels)?);
    }
    Ok(Evaluation {
        loss: loss.finish(),
        report: MetricsReport::from_confusion(matrix),
    })
}

/// One line of the epoch log. Contains no wall-clock data, so identical
/// runs produce identical records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_tasks: BTreeMap<String, f64>,
    pub val_loss: f64,
    pub val_tasks: BTreeMap<String, f64>,
    pub val_accuracy: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    pub val_fp: f64,
    pub val_fn: f64,
    /// Whether this epoch's weights are the best so far by validation F1.
    pub best: bool,
}

/// Events reported while training runs.
pub trait TrainObserver {
    fn epoch(&mut self, _record: &EpochRecord, _seconds: f64, _params: &ParamStore<f32>) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model configuration the weights belong to.
    pub model: ModelConfig,
    /// Weights of the epoch with the best validation F1.
    pub params: ParamStore<f32>,
    pub best_epoch: usize,
    pub best: Evaluation,
    pub log: Vec<EpochRecord>,
    pub seconds: f64,
}

/// The model configuration actually trained: the attention switch comes
/// from the training configuration.
pub fn effective_model(model: &ModelConfig, train: &TrainConfig) -> ModelConfig {
    let mut m = model.clone();
    m.attention.enabled = train.attention;
    m
}

/// Trains from a fresh initialization drawn from `seed`.
///
/// Each epoch draws class-stratified windows, applies augmentation, and
/// takes one Adam step per batch. The plateau schedule follows the
/// validation loss and the returned weights are those of the epoch with the
/// highest validation F1 (earliest on ties).
pub fn train(
    model: &ModelConfig,
    config: &TrainConfig,
    seed: u64,
    train_set: &[SequenceSample],
    val_set: &[SequenceSample],
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = effective_model(model, config);
    model.validate()?;
    check_compatible(&model, train_set)?;
    check_compatible(&model, val_set)?;
    if val_set.is_empty() {
        return Err(Error::config("data", "validation split is empty"));
    }
    let started = Instant::now();
    let root = RngStream::new(seed);
    let mut params = init_model::<f32>(&model, &root.split(0))?;
    let sampler = StratifiedSampler::new(train_set, config.window)?;
    let per_epoch = if config.windows_per_epoch == 0 {
        sampler.eligible_sequences()
    } else {
        config.windows_per_epoch
    };
    let mut adam = Adam::new(
        AdamConfig {
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            weight_decay: config.weight_decay,
        },
        &params,
        is_dense_weight,
    );
    let mut scheduler = PlateauScheduler::new(config.lr, config.plateau.clone());
    let opts = ForwardOptions {
        training: true,
        dropout: config.dropout,
        recurrent_dropout: config.recurrent_dropout,
    };
    log::info!(
        "training {} parameters on {} sequences ({per_epoch} windows of {} frames per epoch)",
        params.scalar_count(),
        train_set.len(),
        config.window
    );

    let mut best: Option<(usize, Evaluation, ParamStore<f32>)> = None;
    let mut log = Vec::new();
    for epoch in 1..=config.max_epochs {
        let epoch_started = Instant::now();
        let lr = scheduler.lr();
        let epoch_rng = root.split(1).split(epoch as u64);
        let batches = sampler.batches(per_epoch, config.batch, &mut epoch_rng.split(0));
        let mut train_loss = LossAccumulator::default();
        for (step, windows) in batches.iter().enumerate() {
            let step_rng = epoch_rng.split(1 + step as u64);
            let aug_rng = step_rng.split(0);
            let clips: Vec<Clip> = windows
                .iter()
                .enumerate()
                .map(|(n, w)| {
                    let clip = Clip::from_sample(&train_set[w.sequence], w.start, w.len);
                    augment(&clip, &config.augment, &mut aug_rng.split(n as u64))
                })
                .collect();
            let batch = assemble_batch(&clips)?;
            let mut tape = Tape::new();
            tape.set_check_finite(true);
            let vars = params.register(&mut tape);
            let x = tape.constant(batch.frames);
            let y = forward_sequence(&mut tape, x, &model, &vars, &opts, &mut step_rng.split(1))?;
            let terms = multitask_loss(&mut tape, y.heads(), &batch.labels, &config.weights, config.mode)?;
            let value = tape.value(terms.total).data()[0] as f64;
            if !value.is_finite() {
                let (var, op) = tape.first_non_finite().unwrap_or((terms.total, tape.op_name(terms.total)));
                return Err(Error::Divergence {
                    epoch,
                    step: step + 1,
                    op,
                    node: var.index(),
                });
            }
            let read = |v| tape.value(v).data()[0] as f64;
            train_loss.add(batch.labels.len(), value, terms.heads.map(|h| h.map(read)));
            tape.backward(terms.total)?;
            let grads = tape.gradients();
            drop(tape);
            adam.step(&mut params, &grads, lr)?;
        }

        let eval = evaluate(&model, &params, val_set, config)?;
        let improved = best.as_ref().is_none_or(|(_, b, _)| eval.report.f1 > b.report.f1);
        let train_loss = train_loss.finish();
        let r = &eval.report;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: train_loss.total,
            train_tasks: train_loss.tasks,
            val_loss: eval.loss.total,
            val_tasks: eval.loss.tasks.clone(),
            val_accuracy: r.accuracy,
            val_precision: r.precision,
            val_recall: r.recall,
            val_f1: r.f1,
            val_fp: r.fp_rate,
            val_fn: r.fn_rate,
            best: improved,
        };
        scheduler.observe(eval.loss.total);
        log::info!(
            "epoch {epoch}: lr {lr:.2e} train loss {:.4} val loss {:.4} acc {:.2}% F1 {:.2}%{}",
            record.train_loss,
            record.val_loss,
            100.0 * r.accuracy,
            100.0 * r.f1,
            if improved { " (best)" } else { "" }
        );
        if improved {
            best = Some((epoch, eval, params.clone()));
        }
        observer.epoch(&record, epoch_started.elapsed().as_secs_f64(), &best.as_ref().unwrap().2)?;
        log.push(record);
    }
    let (best_epoch, best_eval, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        params: best_params,
        best_epoch,
        best: best_eval,
        log,
        seconds: started.elapsed().as_secs_f64(),
    })
}
