//! Ablation harness: attention on/off and loss parameterizations, each
//! trained over several seeds and scored on the test split.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{LossMode, TrainConfig};
use super::trainer::{evaluate, train, Evaluation, TrainObserver, TrainOutcome};
use crate::datagen::SequenceSample;
use crate::error::Result;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub attention: bool,
    pub mode: LossMode,
}

impl Variant {
    pub fn new(name: &str, attention: bool, mode: LossMode) -> Self {
        Variant {
            name: name.to_string(),
            attention,
            mode,
        }
    }
}

/// No attention; single-task intent loss; intent and view loss; and the full
/// model with attention and all four losses.
pub fn ablation_variants() -> Vec<Variant> {
    vec![
        Variant::new("no_attention", false, LossMode::Full),
        Variant::new("intent_only", true, LossMode::IntentOnly),
        Variant::new("intent_view", true, LossMode::IntentView),
        Variant::new("full", true, LossMode::Full),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub accuracy: f64,
    pub recall: f64,
    pub f1: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub runs: Vec<SeedResult>,
    pub median_accuracy: f64,
    pub median_recall: f64,
    pub median_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Median; the mean of the two middle values for an even count.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per variant: which components are on, then test-split
    /// medians over seeds.
    pub fn to_table(&self) -> String {
        let mark = |on: bool| if on { "x" } else { "-" };
        let mut out = String::new();
        let _ = writeln!(out, "medians over seeds {:?}, test split", self.seeds);
        let _ = writeln!(
            out,
            "{:<14} {:>9} {:>7} {:>10} {:>5} {:>9} {:>9} {:>9}",
            "variant", "attention", "intent", "left/right", "view", "accuracy", "recall", "F1"
        );
        for r in &self.rows {
            let m = r.variant.mode;
            let _ = writeln!(
                out,
                "{:<14} {:>9} {:>7} {:>10} {:>5} {:>8.2}% {:>8.2}% {:>8.2}%",
                r.variant.name,
                mark(r.variant.attention),
                mark(m.uses(0)),
                mark(m.uses(1)),
                mark(m.uses(3)),
                100.0 * r.median_accuracy,
                100.0 * r.median_recall,
                100.0 * r.median_f1
            );
        }
        out
    }
}

/// Called after each finished run with its outcome and test evaluation.
pub trait AblationObserver {
    fn run(&mut self, variant: &Variant, seed: u64, outcome: &TrainOutcome, test: &Evaluation) -> Result<()>;
}

impl AblationObserver for () {
    fn run(&mut self, _: &Variant, _: u64, _: &TrainOutcome, _: &Evaluation) -> Result<()> {
        Ok(())
    }
}

/// Trains every variant once per seed and scores the selected checkpoint on
/// `test`.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    model: &ModelConfig,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    train_set: &[SequenceSample],
    val_set: &[SequenceSample],
    test_set: &[SequenceSample],
    observer: &mut dyn AblationObserver,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for v in variants {
        let config = TrainConfig {
            attention: v.attention,
            mode: v.mode,
            ..base.clone()
        };
        let mut runs = Vec::new();
        for &seed in seeds {
            log::info!("ablation: {} seed {seed}", v.name);
            let outcome = train(model, &config, seed, train_set, val_set, &mut () as &mut dyn TrainObserver)?;
            let test = evaluate(&outcome.model, &outcome.params, test_set, &config)?;
            observer.run(v, seed, &outcome, &test)?;
            let r = &test.report;
            runs.push(SeedResult {
                seed,
                best_epoch: outcome.best_epoch,
                accuracy: r.accuracy,
                recall: r.recall,
                f1: r.f1,
                fp_rate: r.fp_rate,
                fn_rate: r.fn_rate,
            });
        }
        let col = |f: fn(&SeedResult) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
        rows.push(AblationRow {
            variant: v.clone(),
            median_accuracy: col(|r| r.accuracy),
            median_recall: col(|r| r.recall),
            median_f1: col(|r| r.f1),
            runs,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}
