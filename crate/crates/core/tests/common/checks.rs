//! Independent oracles shared by the unit tests and the acceptance run.
//! Each check returns a short summary on success and a description of the
//! first violation on failure.

use std::path::Path;

use blinknet::datagen::{
    generate_dataset, generate_sequence, random_scene, DatasetConfig, Rect, SceneOptions, SequenceSample,
};
use blinknet::params::ParamStore;
use blinknet::semantics::{lights_to_intent, mirror_labels, IntentState, LightState, ViewFace};
use blinknet::training::{confusion, metrics, Adam, AdamConfig, PlateauConfig, PlateauScheduler};
use blinknet_tensor::{RngStream, Tensor};
use indexmap::IndexMap;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Independent statement of the plateau schedule: epoch `i` improves when
/// its loss beats the minimum of all earlier losses by more than the
/// threshold; the rate drops whenever the run of non-improving epochs since
/// the last improvement or drop reaches the patience.
pub fn reference_lr(config: &PlateauConfig, losses: &[f64]) -> f64 {
    let mut lr = 1.0;
    let mut run_start = 1;
    for i in 1..losses.len() {
        let earlier = losses[..i].iter().cloned().fold(f64::INFINITY, f64::min);
        if losses[i] < earlier - config.threshold {
            run_start = i + 1;
        } else if i + 1 - run_start == config.patience {
            lr *= config.factor;
            run_start = i + 1;
        }
    }
    lr
}

/// Every trace of length 1 to 8 over a three-loss alphabet that mixes
/// improvements above and below the threshold, for several patiences.
pub fn plateau_exhaustive() -> Check {
    let alphabet = [1.0, 0.9995, 0.998];
    let mut traces = 0;
    for patience in [1, 2, 5] {
        let config = PlateauConfig {
            factor: 0.1,
            patience,
            threshold: 1e-3,
        };
        for len in 1..=8u32 {
            for code in 0..3usize.pow(len) {
                let losses: Vec<f64> = (0..len).map(|i| alphabet[code / 3usize.pow(i) % 3]).collect();
                let got = PlateauScheduler::replay(1.0, config.clone(), &losses);
                let want = reference_lr(&config, &losses);
                ensure((got - want).abs() < 1e-15, || format!("patience {patience}, {losses:?}: {got} vs {want}"))?;
                traces += 1;
            }
        }
    }
    Ok(format!("{traces} traces"))
}

fn one_param(values: Vec<f32>) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    let n = values.len();
    s.insert("w", Tensor::new(&[n], values).unwrap());
    s
}

fn grad(values: Vec<f32>) -> IndexMap<String, Tensor<f32>> {
    let n = values.len();
    IndexMap::from([("w".to_string(), Tensor::new(&[n], values).unwrap())])
}

/// First step with unit gradients moves every coordinate by `lr`; zero
/// gradients leave parameters alone; 100 steps on `w²` from 1 at lr 0.1 end
/// within 0.1 of the minimum.
pub fn adam_oracles() -> Check {
    let start = vec![0.5f32, -2.0, 3.0];
    let mut p = one_param(start.clone());
    let mut adam = Adam::new(AdamConfig::default(), &p, |_| false);
    adam.step(&mut p, &grad(vec![1.0; 3]), 1e-2).map_err(|e| e.to_string())?;
    for (a, b) in p.get("w").unwrap().data().iter().zip(&start) {
        ensure((a - (b - 1e-2)).abs() < 1e-6, || format!("first step moved {b} to {a}"))?;
    }

    let mut p = one_param(start.clone());
    let mut adam = Adam::new(AdamConfig::default(), &p, |_| false);
    for _ in 0..5 {
        adam.step(&mut p, &grad(vec![0.0; 3]), 0.1).map_err(|e| e.to_string())?;
    }
    ensure(p.get("w").unwrap().data() == start.as_slice(), || "zero gradient moved the parameters".into())?;

    let mut p = one_param(vec![1.0]);
    let mut adam = Adam::new(AdamConfig::default(), &p, |_| false);
    for _ in 0..100 {
        let w = p.get("w").unwrap().data()[0];
        adam.step(&mut p, &grad(vec![2.0 * w]), 0.1).map_err(|e| e.to_string())?;
    }
    let w = p.get("w").unwrap().data()[0];
    ensure(w.abs() < 0.1, || format!("w = {w} after 100 steps on w^2"))?;
    Ok(format!("first step exact, |w| = {:.3e} after 100 steps", w.abs()))
}

/// Hand-enumerated ten-frame case, the FP/FN definitions on single frames,
/// and row sums of a large random confusion matrix.
pub fn metrics_oracles() -> Check {
    use IntentState::{Flashers as F, LeftTurn as L, Off as O, RightTurn as R, Unknown as U};
    let labels = [L, L, L, R, R, F, O, O, O, U];
    let preds = [L, L, O, R, L, F, O, O, U, U];
    let m = metrics(&preds, &labels).map_err(|e| e.to_string())?;
    let mut counts = [[0u64; 5]; 5];
    for (i, j, n) in [(0, 0, 2), (0, 3, 1), (1, 1, 1), (1, 0, 1), (2, 2, 1), (3, 3, 2), (3, 4, 1), (4, 4, 1)] {
        counts[i][j] = n;
    }
    ensure(m.confusion.counts == counts, || format!("confusion {:?}", m.confusion.counts))?;
    ensure((m.accuracy - 0.7).abs() < 1e-12, || format!("accuracy {}", m.accuracy))?;
    ensure((m.fp_rate - 0.25).abs() < 1e-12, || format!("FP {}", m.fp_rate))?;
    ensure((m.fn_rate - 2.0 / 6.0).abs() < 1e-12, || format!("FN {}", m.fn_rate))?;

    for (p, l, fp, fnr) in [(L, O, 1.0, 0.0), (O, L, 0.0, 1.0), (U, O, 1.0, 0.0), (R, L, 0.0, 1.0)] {
        let m = metrics(&[p], &[l]).map_err(|e| e.to_string())?;
        ensure((m.fp_rate, m.fn_rate) == (fp, fnr), || {
            format!("pred {p} label {l}: FP {} FN {}", m.fp_rate, m.fn_rate)
        })?;
    }

    let mut rng = RngStream::new(17);
    let mut draw = || IntentState::ALL[rng.below(5) as usize];
    let preds: Vec<IntentState> = (0..997).map(|_| draw()).collect();
    let labels: Vec<IntentState> = (0..997).map(|_| draw()).collect();
    let c = confusion(&preds, &labels).map_err(|e| e.to_string())?;
    for row in c.normalized.iter().chain(&m.confusion.normalized) {
        let sum: f64 = row.iter().sum();
        ensure((sum - 1.0).abs() < 1e-6, || format!("row sums to {sum}"))?;
    }
    Ok("10-frame case, FP/FN cases and row sums".into())
}

/// The nine light pairs for both confidence flags, and the mirror
/// involution and its commutation with the intent rule on every label.
pub fn semantics_exhaustive() -> Check {
    use IntentState as I;
    use LightState as L;
    let table = [
        (L::On, L::On, I::Flashers, I::Flashers),
        (L::On, L::Off, I::LeftTurn, I::LeftTurn),
        (L::On, L::Unknown, I::LeftTurn, I::Unknown),
        (L::Off, L::On, I::RightTurn, I::RightTurn),
        (L::Off, L::Off, I::Off, I::Off),
        (L::Off, L::Unknown, I::Off, I::Unknown),
        (L::Unknown, L::On, I::RightTurn, I::Unknown),
        (L::Unknown, L::Off, I::Off, I::Unknown),
        (L::Unknown, L::Unknown, I::Unknown, I::Unknown),
    ];
    for (l, r, confident, cautious) in table {
        ensure(lights_to_intent(l, r, true) == confident, || format!("({l}, {r}) confident"))?;
        ensure(lights_to_intent(l, r, false) == cautious, || format!("({l}, {r}) cautious"))?;
    }
    let mut combos = 0;
    for &l in L::ALL {
        for &r in L::ALL {
            for &i in I::ALL {
                for &v in ViewFace::ALL {
                    let once = mirror_labels(l, r, i, v);
                    let twice = mirror_labels(once.0, once.1, once.2, once.3);
                    ensure(twice == (l, r, i, v), || format!("mirror twice of {:?}", (l, r, i, v)))?;
                    combos += 1;
                }
            }
            for confident in [true, false] {
                let (ml, mr, _, _) = mirror_labels(l, r, I::Off, ViewFace::Behind);
                let via = lights_to_intent(ml, mr, confident);
                let direct = mirror_labels(l, r, lights_to_intent(l, r, confident), ViewFace::Behind).2;
                ensure(via == direct, || format!("mirror does not commute with ({l}, {r})"))?;
            }
        }
    }
    ensure(
        mirror_labels(L::On, L::Off, I::LeftTurn, ViewFace::Behind) == (L::Off, L::On, I::RightTurn, ViewFace::Behind),
        || "mirrored left turn".into(),
    )?;
    Ok(format!("18 table entries, {combos} mirror combinations"))
}

pub fn region_mean(frame: &[u8], canvas: usize, r: &Rect) -> [f64; 3] {
    let mut sum = [0.0; 3];
    for y in r.y..r.bottom() {
        for x in r.x..r.right() {
            let i = (y as usize * canvas + x as usize) * 3;
            for c in 0..3 {
                sum[c] += frame[i + c] as f64;
            }
        }
    }
    sum.map(|s| s / r.area() as f64)
}

/// Frequency of the largest non-DC bin of a zero-padded FFT.
pub fn peak_frequency(signal: &[f64], fps: f64) -> f64 {
    let padded = 16384;
    let mean = signal.iter().sum::<f64>() / signal.len() as f64;
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(padded, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(padded).process(&mut buf);
    let (bin, _) = buf[1..padded / 2]
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
        .unwrap();
    (bin + 1) as f64 * fps / padded as f64
}

/// Largest deviation of the spectral peak of the active light's mean
/// intensity from the scene's blink frequency, over `scenes` 600-frame
/// sequences.
pub fn blink_frequency_error(scenes: u64) -> f64 {
    let options = SceneOptions {
        length: 600,
        partial_occlusion: 0.0,
        ..SceneOptions::default()
    };
    let classes = [IntentState::LeftTurn, IntentState::RightTurn, IntentState::Flashers];
    let mut worst: f64 = 0.0;
    for seed in 0..scenes {
        let class = classes[seed as usize % 3];
        let view = ViewFace::ALL[seed as usize % 4];
        let spec = random_scene(&options, class, view, &mut RngStream::new(100 + seed)).unwrap();
        let sample = generate_sequence(&spec, seed).unwrap();
        let light = if class == IntentState::RightTurn {
            spec.geometry.right_light
        } else {
            spec.geometry.left_light
        };
        let signal: Vec<f64> = (0..sample.len())
            .map(|t| region_mean(sample.frame(t), sample.canvas(), &light).iter().sum::<f64>())
            .collect();
        worst = worst.max((peak_frequency(&signal, spec.fps) - spec.blink_freq).abs());
    }
    worst
}

/// Frames whose intent label disagrees with the confident intent rule.
pub fn inconsistent_frames(samples: &[SequenceSample]) -> usize {
    samples
        .iter()
        .flat_map(|s| &s.labels)
        .filter(|l| l.intent != lights_to_intent(l.left, l.right, true))
        .count()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Byte-exact determinism of single sequences and of whole dataset
/// directories.
pub fn generator_determinism(config: &DatasetConfig, seed: u64, scratch: &Path) -> Check {
    let options = SceneOptions {
        partial_occlusion: 0.5,
        ..SceneOptions::default()
    };
    for s in 0..20u64 {
        let class = IntentState::ALL[s as usize % 5];
        let view = ViewFace::ALL[s as usize % 4];
        let spec = random_scene(&options, class, view, &mut RngStream::new(s)).unwrap();
        let a = generate_sequence(&spec, s).map_err(|e| e.to_string())?;
        let b = generate_sequence(&spec, s).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("sequence {s} differs between runs"))?;
    }
    let (a, b) = (scratch.join("a"), scratch.join("b"));
    generate_dataset(config, seed, &a).map_err(|e| e.to_string())?;
    generate_dataset(config, seed, &b).map_err(|e| e.to_string())?;
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    ensure(fa == fb, || "dataset directories differ".into())?;
    let bytes: usize = fa.iter().map(|f| f.1.len()).sum();
    Ok(format!("20 sequences and a {bytes}-byte dataset reproduced"))
}
