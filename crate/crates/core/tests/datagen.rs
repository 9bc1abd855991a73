mod common;

use std::path::Path;

use blinknet::datagen::{
    blink_waveform, generate_dataset, generate_sequence, largest_remainder, load_split, random_scene, read_dataset,
    render_frame, write_dataset, ClassMix, DatasetConfig, Manifest, Occlusion, Rect, SceneOptions, SceneSpec,
    SequenceSample, SplitRatios, MAGIC,
};
use blinknet::semantics::{lights_to_intent, IntentState, LightState, ViewFace};
use blinknet::Error;
use blinknet_tensor::RngStream;
use common::checks::{blink_frequency_error, region_mean};

fn scene(class: IntentState, view: ViewFace, seed: u64, length: u32) -> SceneSpec {
    let options = SceneOptions {
        length,
        partial_occlusion: 0.0,
        ..SceneOptions::default()
    };
    random_scene(&options, class, view, &mut RngStream::new(seed)).unwrap()
}

#[test]
fn waveform_matches_worked_examples() {
    let lit: Vec<bool> = (0..7).map(|t| blink_waveform(1.5, 0.0, 10.0, t)).collect();
    assert_eq!(lit, [true, true, true, true, false, false, false]);
    assert!(blink_waveform(1.5, 0.0, 10.0, 0));
    assert!(!blink_waveform(1.5, 0.5, 10.0, 0));
}

#[test]
fn transitions_over_600_frames_at_1_5_hz() {
    // 1.5 Hz at 10 fps is 3 cycles per 20 frames: lit iff 3t mod 20 < 10.
    let oracle = |t: u32| (3 * t) % 20 < 10;
    let mut transitions = 0;
    for t in 1..600 {
        assert_eq!(blink_waveform(1.5, 0.0, 10.0, t), oracle(t), "frame {t}");
        if oracle(t) != oracle(t - 1) {
            transitions += 1;
        }
    }
    assert!((178..=182).contains(&transitions), "{transitions} transitions");
}

#[test]
fn off_intent_keeps_both_lights_at_the_off_color() {
    let spec = scene(IntentState::Off, ViewFace::Behind, 3, 20);
    let sample = generate_sequence(&spec, 9).unwrap();
    let c = &spec.colors;
    let tolerance = (c.noise as f64) + (c.exposure as f64) + 1.0;
    for t in 0..sample.len() {
        for r in [&spec.geometry.left_light, &spec.geometry.right_light] {
            let m = region_mean(sample.frame(t), 64, r);
            for ch in 0..3 {
                assert!((m[ch] - c.light_off[ch] as f64).abs() <= tolerance, "frame {t}: {m:?}");
            }
        }
    }
}

#[test]
fn flashers_blink_both_lights_together() {
    let spec = scene(IntentState::Flashers, ViewFace::Front, 4, 40);
    let sample = generate_sequence(&spec, 1).unwrap();
    let g = &spec.geometry;
    let mut lit_frames = 0;
    for t in 0..sample.len() {
        let l = region_mean(sample.frame(t), 64, &g.left_light)[1];
        let r = region_mean(sample.frame(t), 64, &g.right_light)[1];
        // Green separates lit amber (155+) from the dim off color (below 95).
        let lit = blink_waveform(spec.blink_freq, spec.blink_phase, spec.fps, t as u32);
        assert_eq!(l > 125.0, lit, "left light at frame {t}");
        assert_eq!(r > 125.0, lit, "right light at frame {t}");
        lit_frames += lit as usize;
    }
    assert!(lit_frames > 0 && lit_frames < sample.len());
}

fn overlap_area(a: &Rect, b: &Rect) -> i64 {
    let w = (a.right().min(b.right()) - a.x.max(b.x)).max(0) as i64;
    let h = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0) as i64;
    w * h
}

#[test]
fn occluding_the_left_light_marks_exactly_those_frames_unknown() {
    let mut spec = scene(IntentState::LeftTurn, ViewFace::Behind, 5, 30);
    let light = spec.geometry.left_light;
    let cover = Rect::new(light.x - 1, light.y - 1, light.w + 2, light.h + 2);
    spec.occlusions = vec![Occlusion {
        start: 10,
        end: 21,
        rect: cover,
        color: [90, 90, 90],
    }];
    let sample = generate_sequence(&spec, 2).unwrap();
    for (t, label) in sample.labels.iter().enumerate() {
        let hidden = (10..21).contains(&t) && 2 * overlap_area(&cover, &light) >= light.area();
        let expected = if hidden { LightState::Unknown } else { LightState::On };
        assert_eq!(label.left, expected, "frame {t}");
        assert_eq!(label.right, LightState::Off);
        // One light unknown, the other off: confidently OFF.
        let intent = if hidden { IntentState::Off } else { IntentState::LeftTurn };
        assert_eq!(label.intent, intent, "frame {t}");
    }
}

#[test]
fn a_thin_occluder_does_not_hide_a_light() {
    let mut spec = scene(IntentState::RightTurn, ViewFace::Behind, 6, 10);
    let light = spec.geometry.right_light;
    let sliver = Rect::new(light.x, light.y, 1, light.h);
    assert!(2 * overlap_area(&sliver, &light) < light.area());
    spec.occlusions = vec![Occlusion {
        start: 0,
        end: 10,
        rect: sliver,
        color: [0, 0, 0],
    }];
    let sample = generate_sequence(&spec, 2).unwrap();
    assert!(sample.labels.iter().all(|l| l.right == LightState::On));
}

#[test]
fn generation_is_deterministic_in_spec_and_seed() {
    let spec = scene(IntentState::RightTurn, ViewFace::Left, 7, 12);
    let a = generate_sequence(&spec, 42).unwrap();
    let b = generate_sequence(&spec, 42).unwrap();
    assert_eq!(a, b);
    let c = generate_sequence(&spec, 43).unwrap();
    assert_ne!(a.frames, c.frames);
    assert_eq!(a.labels, c.labels);
    let mut rng = RngStream::new(42).split(3);
    assert_eq!(render_frame(&spec, 3, &mut rng).unwrap().image, a.frame(3));
}

#[test]
fn twenty_frames_cover_two_cycles_at_the_slowest_rate() {
    let frames = 20.0;
    let fps = 10.0;
    assert!(frames / fps * 1.0 >= 2.0);
}

#[test]
fn spectral_peak_recovers_the_blink_frequency() {
    let worst = blink_frequency_error(12);
    assert!(worst <= 0.1, "peak off by {worst} Hz");
}

#[test]
fn every_frame_label_is_consistent_and_on_lights_blink_at_half_duty() {
    let options = SceneOptions {
        partial_occlusion: 0.5,
        ..SceneOptions::default()
    };
    let classes = [
        IntentState::LeftTurn,
        IntentState::RightTurn,
        IntentState::Flashers,
        IntentState::Off,
        IntentState::Unknown,
    ];
    for seed in 0..60u64 {
        let class = classes[seed as usize % 5];
        let view = ViewFace::ALL[(seed / 5) as usize % 4];
        let spec = random_scene(&options, class, view, &mut RngStream::new(seed)).unwrap();
        let sample = generate_sequence(&spec, seed).unwrap();
        for l in &sample.labels {
            assert_eq!(l.intent, lights_to_intent(l.left, l.right, true));
            assert_eq!(l.view, view);
        }
        let period = (spec.fps / spec.blink_freq).ceil() as usize;
        for (side, on) in [(0, spec.intent.lights().unwrap().0), (1, spec.intent.lights().unwrap().1)] {
            if on != LightState::On {
                continue;
            }
            let dark: Vec<bool> = (0..spec.length)
                .map(|t| !blink_waveform(spec.blink_freq, spec.blink_phase, spec.fps, t))
                .collect();
            for start in 0..dark.len().saturating_sub(period) {
                let labelled_on = sample.labels[start..start + period]
                    .iter()
                    .all(|l| if side == 0 { l.left } else { l.right } == LightState::On);
                if labelled_on {
                    let n = dark[start..start + period].iter().filter(|&&d| d).count();
                    assert!(n <= period / 2 + 1, "seed {seed}: {n} dark frames in a {period}-frame cycle");
                }
            }
        }
        if class == IntentState::Unknown {
            assert!(sample.labels.iter().any(|l| l.intent == IntentState::Unknown));
        }
    }
}

#[test]
fn view_faces_place_the_lights_on_consistent_image_sides() {
    for seed in 0..40u64 {
        let view = ViewFace::ALL[seed as usize % 4];
        let spec = scene(IntentState::LeftTurn, view, seed, 5);
        let g = &spec.geometry;
        let (l, r) = (g.left_light.center_x2(), g.right_light.center_x2());
        match view {
            ViewFace::Front => assert!(l > r, "front view, seed {seed}"),
            _ => assert!(l < r, "{view} view, seed {seed}"),
        }
    }
}

#[test]
fn spec_validation_rejects_bad_scenes() {
    let good = scene(IntentState::LeftTurn, ViewFace::Behind, 1, 10);
    good.validate().unwrap();

    let mut s = good.clone();
    s.intent = IntentState::Unknown;
    assert!(matches!(s.validate(), Err(Error::InvalidScene(_))));

    let mut s = good.clone();
    s.blink_freq = 2.5;
    assert!(s.validate().is_err());

    let mut s = good.clone();
    s.geometry.body.w = 200;
    assert!(s.validate().is_err());

    let mut s = good.clone();
    std::mem::swap(&mut s.geometry.left_light, &mut s.geometry.right_light);
    assert!(s.validate().is_err(), "swapped lights in a rear view");

    let mut s = good.clone();
    s.occlusions.push(Occlusion {
        start: 5,
        end: 11,
        rect: Rect::new(0, 0, 4, 4),
        color: [0, 0, 0],
    });
    assert!(s.validate().is_err(), "occlusion past the end");

    let mut rng = RngStream::new(0);
    assert!(render_frame(&good, 10, &mut rng).is_err());
}

#[test]
fn spec_text_round_trips() {
    let spec = scene(IntentState::Unknown, ViewFace::Right, 8, 30);
    let text = spec.to_text().unwrap();
    assert_eq!(SceneSpec::from_text(&text).unwrap(), spec);
}

#[test]
fn default_mix_is_skewed_towards_off_and_balanced_mix_is_flat() {
    let config = DatasetConfig::default();
    let c = config.class_counts().unwrap();
    let (left, right, flashers, off, unknown) = (c[0], c[1], c[2], c[3], c[4]);
    assert!(off > left && off > right);
    assert!(left.abs_diff(right) <= 1);
    assert!(left.min(right) > unknown);
    assert!(unknown > flashers);
    assert_eq!(c.iter().sum::<usize>(), 900);

    let balanced = DatasetConfig {
        balanced: true,
        sequences: 500,
        ..DatasetConfig::default()
    };
    assert_eq!(balanced.class_counts().unwrap(), [100; 5]);
}

#[test]
fn splits_are_apportioned_exactly() {
    let config = DatasetConfig {
        sequences: 100,
        splits: SplitRatios {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        },
        ..DatasetConfig::default()
    };
    assert_eq!(config.split_counts(), [70, 15, 15]);
    assert_eq!(DatasetConfig::default().split_counts(), [600, 100, 200]);
    assert_eq!(largest_remainder(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
}

#[test]
fn too_few_sequences_for_a_class_is_a_config_error() {
    let config = DatasetConfig {
        sequences: 3,
        ..DatasetConfig::default()
    };
    assert!(matches!(config.class_counts(), Err(Error::Config { .. })));
    let zero_flashers = DatasetConfig {
        sequences: 3,
        mix: ClassMix {
            flashers: 0.0,
            unknown: 0.0,
            ..ClassMix::default()
        },
        ..DatasetConfig::default()
    };
    assert_eq!(zero_flashers.class_counts().unwrap()[2], 0);
}

fn small_config() -> DatasetConfig {
    DatasetConfig {
        sequences: 20,
        splits: SplitRatios {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        },
        scene: SceneOptions {
            canvas: 32,
            length: 6,
            ..SceneOptions::default()
        },
        ..DatasetConfig::default()
    }
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn dataset_generation_writes_splits_and_is_reproducible() {
    let config = small_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&config, 7, a.path()).unwrap();
    generate_dataset(&config, 7, b.path()).unwrap();
    let files = read_all(a.path());
    assert_eq!(files, read_all(b.path()));
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(names, ["manifest.toml", "test.blkd", "train.blkd", "val.blkd"]);

    assert_eq!(
        [manifest.train.sequences.len(), manifest.val.sequences.len(), manifest.test.sequences.len()],
        [14, 3, 3]
    );
    let mut all: Vec<usize> = [&manifest.train, &manifest.val, &manifest.test]
        .iter()
        .flat_map(|s| s.sequences.clone())
        .collect();
    all.sort();
    assert_eq!(all, (0..20).collect::<Vec<_>>(), "every sequence in exactly one split");

    assert_eq!(Manifest::load(a.path()).unwrap(), manifest);
    let train = load_split(a.path(), "train").unwrap();
    assert_eq!(train.len(), 14);
    assert!(train.iter().all(|s| s.len() == 6 && s.canvas() == 32));
    assert!(load_split(a.path(), "bogus").is_err());

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&config, 8, c.path()).unwrap();
    assert_ne!(read_all(a.path())[2], read_all(c.path())[2], "seed changes the data");
}

fn samples() -> Vec<SequenceSample> {
    (0..3)
        .map(|i| generate_sequence(&scene(IntentState::ALL[i], ViewFace::ALL[i], i as u64, 4), i as u64).unwrap())
        .collect()
}

#[test]
fn dataset_files_round_trip_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.blkd");
    let original = samples();
    write_dataset(&path, &original).unwrap();
    let (header, back) = read_dataset(&path).unwrap();
    assert_eq!(header.records, 3);
    assert_eq!(header.canvas, 64);
    assert_eq!(back, original);

    let bytes = std::fs::read(&path).unwrap();
    let again = dir.path().join("e.blkd");
    write_dataset(&again, &back).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
    assert!(!dir.path().join("d.blkd.partial").exists());
}

#[test]
fn corrupt_files_are_rejected_with_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.blkd");
    write_dataset(&path, &samples()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], MAGIC);

    let bad = dir.path().join("bad.blkd");
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    std::fs::write(&bad, &wrong_magic).unwrap();
    assert!(matches!(read_dataset(&bad), Err(Error::DatasetParse { offset: 0, .. })));

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&2u32.to_le_bytes());
    std::fs::write(&bad, &newer).unwrap();
    assert!(matches!(read_dataset(&bad), Err(Error::UnsupportedVersion { found: 2, supported: 1, .. })));

    let cut = bytes.len() - 10;
    std::fs::write(&bad, &bytes[..cut]).unwrap();
    match read_dataset(&bad) {
        Err(Error::DatasetParse { offset, detail, .. }) => {
            assert!(offset > 0 && offset <= cut as u64, "offset {offset}");
            assert!(detail.contains("truncated"), "{detail}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }

    let mut trailing = bytes.clone();
    trailing.push(0);
    std::fs::write(&bad, &trailing).unwrap();
    assert!(matches!(read_dataset(&bad), Err(Error::DatasetParse { .. })));

    let mut label = bytes.clone();
    let last = label.len() - 1;
    label[last] = 9;
    std::fs::write(&bad, &label).unwrap();
    match read_dataset(&bad) {
        Err(Error::DatasetParse { offset, .. }) => assert_eq!(offset, (last - 3) as u64),
        other => panic!("expected a parse error, got {other:?}"),
    }
}
