//! Acceptance run: one PASS/FAIL line per criterion. Includes the desk
//! benchmark and the ablation matrix, so a full run takes about an hour on
//! one core.

mod common;

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use blinknet::config::RunConfig;
use blinknet::datagen::load_split;
use blinknet::gradcheck::{end_to_end, shrunk_model, END_TO_END_TOLERANCE};
use blinknet::model::Preset;
use blinknet::training::{
    ablate, ablation_variants, evaluate, train, AblationObserver, EpochRecord, Evaluation, TrainObserver,
    TrainOutcome, Variant,
};
use blinknet::ParamStore;
use blinknet_tensor::gradcheck::{op_suite, OP_SUITE_TOLERANCE};
use common::checks::{
    adam_oracles, blink_frequency_error, generator_determinism, inconsistent_frames, metrics_oracles,
    plateau_exhaustive, semantics_exhaustive, Check,
};
use common::convlstm_oracle_max_error;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const GRADIENT_SECONDS: f64 = 300.0;
const GRADIENT_DRAWS: u64 = 3;
const CONVLSTM_DRAWS: u64 = 50;
const CONVLSTM_TOLERANCE: f64 = 1e-6;
const FREQUENCY_SCENES: u64 = 12;
const FREQUENCY_TOLERANCE: f64 = 0.1;
const DESK_SEED: u64 = 0;
const DESK_EPOCHS: usize = 25;
const DESK_SECONDS: f64 = 30.0 * 60.0;
const DESK_ACCURACY: f64 = 0.90;
const ABLATION_EPOCHS: usize = 8;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

type Criterion<'a> = Box<dyn FnOnce() -> Check + 'a>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Runs one criterion, converting panics into failures, and prints its line.
fn criterion(name: &str, check: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into());
        Err(msg)
    });
    let seconds = start.elapsed().as_secs_f64();
    let (tag, detail) = match &result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {name}: {detail} [{seconds:.1} s]");
    let _ = std::io::stdout().flush();
    result.is_ok()
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut reports = op_suite(GRADIENT_DRAWS).map_err(|e| e.to_string())?;
    let ops = reports.len();
    let model = shrunk_model();
    for seed in 0..GRADIENT_DRAWS {
        reports.push(end_to_end(&model, 2, 2, 1.0, seed).map_err(|e| e.to_string())?);
    }
    let worst = |rs: &[blinknet_tensor::gradcheck::GradCheckReport]| {
        rs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    };
    if let Some(bad) = reports.iter().find(|r| !r.passed()) {
        return Err(bad.to_string());
    }
    ensure(worst(&reports[..ops]) < OP_SUITE_TOLERANCE, || "op tolerance".into())?;
    ensure(worst(&reports[ops..]) < END_TO_END_TOLERANCE, || "end-to-end tolerance".into())?;
    let seconds = start.elapsed().as_secs_f64();
    ensure(seconds < GRADIENT_SECONDS, || format!("took {seconds:.0} s"))?;
    Ok(format!(
        "{ops} op checks max rel err {:.1e} (< {OP_SUITE_TOLERANCE:.0e}), end-to-end T=2 over {GRADIENT_DRAWS} draws max {:.1e} (< {END_TO_END_TOLERANCE:.0e})",
        worst(&reports[..ops]),
        worst(&reports[ops..]),
    ))
}

fn convlstm_oracle() -> Check {
    let err = convlstm_oracle_max_error(CONVLSTM_DRAWS);
    ensure(err < CONVLSTM_TOLERANCE, || format!("max abs error {err:.3e}"))?;
    Ok(format!("{CONVLSTM_DRAWS} draws, max abs error {err:.1e}"))
}

fn generator(config: &RunConfig, scratch: &Path) -> Check {
    let determinism = generator_determinism(&config.data, config.seed, scratch)?;
    let freq = blink_frequency_error(FREQUENCY_SCENES);
    ensure(freq <= FREQUENCY_TOLERANCE, || format!("blink peak off by {freq:.3} Hz"))?;
    let mut frames = 0;
    for split in ["train", "val", "test"] {
        let samples = load_split(&scratch.join("a"), split).map_err(|e| e.to_string())?;
        let bad = inconsistent_frames(&samples);
        ensure(bad == 0, || format!("{bad} inconsistent frames in {split}"))?;
        frames += samples.iter().map(|s| s.len()).sum::<usize>();
    }
    Ok(format!(
        "{determinism}; blink peak within {freq:.3} Hz; {frames} frames label-consistent"
    ))
}

/// Echoes training progress to stderr.
struct Progress(&'static str);

impl TrainObserver for Progress {
    fn epoch(&mut self, r: &EpochRecord, seconds: f64, _: &ParamStore<f32>) -> blinknet::Result<()> {
        eprintln!(
            "  {} epoch {:>2} ({seconds:.0} s): lr {:.0e} train {:.4} val {:.4} acc {:.2}%",
            self.0,
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_loss,
            100.0 * r.val_accuracy
        );
        Ok(())
    }
}

impl AblationObserver for Progress {
    fn run(&mut self, v: &Variant, seed: u64, out: &TrainOutcome, test: &Evaluation) -> blinknet::Result<()> {
        eprintln!(
            "  {} {} seed {seed}: best epoch {}, test acc {:.2}% F1 {:.2}% ({:.0} s)",
            self.0,
            v.name,
            out.best_epoch,
            100.0 * test.report.accuracy,
            100.0 * test.report.f1,
            out.seconds
        );
        Ok(())
    }
}

fn desk_benchmark(config: &RunConfig, data: &Path) -> Check {
    let load = |split| load_split(data, split).map_err(|e| e.to_string());
    let (tr, va, te) = (load("train")?, load("val")?, load("test")?);
    let mut train_cfg = config.train.clone();
    train_cfg.max_epochs = DESK_EPOCHS;
    let start = Instant::now();
    let out = train(&config.model, &train_cfg, DESK_SEED, &tr, &va, &mut Progress("desk"))
        .map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    let test = evaluate(&out.model, &out.params, &te, &train_cfg).map_err(|e| e.to_string())?;
    eprintln!("{}", test.report.to_table());
    let acc = test.report.accuracy;
    let summary = format!(
        "test accuracy {:.2}% (>= {:.0}%), F1 {:.2}%, best epoch {} of {}, {:.1} min (< {:.0})",
        100.0 * acc,
        100.0 * DESK_ACCURACY,
        100.0 * test.report.f1,
        out.best_epoch,
        out.log.len(),
        seconds / 60.0,
        DESK_SECONDS / 60.0
    );
    ensure(acc >= DESK_ACCURACY && seconds < DESK_SECONDS && out.log.len() <= DESK_EPOCHS, || summary.clone())?;
    Ok(summary)
}

fn ablation(config: &RunConfig, data: &Path) -> Check {
    let load = |split| load_split(data, split).map_err(|e| e.to_string());
    let (tr, va, te) = (load("train")?, load("val")?, load("test")?);
    let mut base = config.train.clone();
    base.max_epochs = ABLATION_EPOCHS;
    let variants = ablation_variants();
    let report = ablate(&config.model, &base, &variants, &ABLATION_SEEDS, &tr, &va, &te, &mut Progress("ablation"))
        .map_err(|e| e.to_string())?;
    eprintln!("{}", report.to_table());
    ensure(report.rows.len() == variants.len(), || format!("{} rows", report.rows.len()))?;
    for (row, v) in report.rows.iter().zip(&variants) {
        ensure(&row.variant == v && row.runs.len() == ABLATION_SEEDS.len(), || {
            format!("row {} has {} runs", row.variant.name, row.runs.len())
        })?;
    }
    let f1 = |name| report.row(name).map(|r| r.median_f1).unwrap_or(f64::NAN);
    let (full, single) = (f1("full"), f1("intent_only"));
    let summary = format!(
        "median F1 full {:.2}% vs intent_only {:.2}% (no_attention {:.2}%, intent_view {:.2}%), {} seeds x {ABLATION_EPOCHS} epochs",
        100.0 * full,
        100.0 * single,
        100.0 * f1("no_attention"),
        100.0 * f1("intent_view"),
        ABLATION_SEEDS.len()
    );
    ensure(full >= single, || summary.clone())?;
    Ok(summary)
}

fn main() {
    // Optional name filters, e.g. `cargo test --test acceptance -- gradient`.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let config = RunConfig::preset(Preset::Desk);
    let scratch = tempfile::tempdir().expect("temporary directory");
    let data = scratch.path().join("a");
    let criteria: Vec<(&str, Criterion<'_>)> = vec![
        ("gradient suite", Box::new(gradient_suite)),
        ("ConvLSTM scalar oracle", Box::new(convlstm_oracle)),
        ("semantics tables", Box::new(semantics_exhaustive)),
        ("generator", Box::new(|| generator(&config, scratch.path()))),
        ("desk benchmark", Box::new(|| desk_benchmark(&config, &data))),
        ("ablation harness", Box::new(|| ablation(&config, &data))),
        (
            "scheduler and optimizer",
            Box::new(|| Ok(format!("plateau {}; Adam {}", plateau_exhaustive()?, adam_oracles()?))),
        ),
        ("metrics", Box::new(metrics_oracles)),
    ];
    let (mut run, mut failed) = (0, 0);
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        run += 1;
        if !criterion(name, check) {
            failed += 1;
        }
    }
    println!("{} of {run} criteria passed", run - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
