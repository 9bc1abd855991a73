use blinknet::checkpoint::{load_model, save_model, CheckpointInfo};
use blinknet::gradcheck::{end_to_end, shrunk_model};
use blinknet::model::{backbone_features, forward_sequence, init_model, ForwardOptions, ModelConfig};
use blinknet::Error;
use blinknet_tensor::{RngStream, Tape, Tensor};

#[test]
fn paper_backbone_yields_7x7x512() {
    let config = ModelConfig::paper();
    assert_eq!((config.grid(), config.feature_channels()), (7, 512));
    let params = init_model::<f32>(&config, &RngStream::new(0)).unwrap();
    let mut tape = Tape::inference();
    let vars = params.register(&mut tape);
    let x = tape.constant(Tensor::from_fn(&[1, 3, 224, 224], |i| (i % 13) as f32 / 13.0));
    let f = backbone_features(&mut tape, x, &config, &vars).unwrap();
    assert_eq!(tape.shape(f), &[1, 512, 7, 7]);
}

#[test]
fn desk_preset_shapes_and_size() {
    let config = ModelConfig::desk();
    let params = init_model::<f32>(&config, &RngStream::new(0)).unwrap();
    assert_eq!(params.scalar_count(), config.parameter_count());
    assert!(config.parameter_count() < 2_000_000);

    let mut tape = Tape::inference();
    let vars = params.register(&mut tape);
    let images = tape.constant(Tensor::from_fn(&[3, 3, 64, 64], |i| (i % 7) as f32 / 7.0));
    let f = backbone_features(&mut tape, images, &config, &vars).unwrap();
    assert_eq!(tape.shape(f), &[3, 64, 4, 4]);

    let mut tape = Tape::inference();
    let vars = params.register(&mut tape);
    let frames = tape.constant(Tensor::from_fn(&[5, 2, 3, 64, 64], |i| (i % 11) as f32 / 11.0));
    let y = forward_sequence(&mut tape, frames, &config, &vars, &ForwardOptions::inference(), &mut RngStream::new(1)).unwrap();
    assert_eq!(tape.shape(y.intent), &[10, 5]);
    assert_eq!(tape.shape(y.left), &[10, 3]);
    assert_eq!(tape.shape(y.view), &[10, 4]);
    assert_eq!(tape.shape(y.mask.unwrap()), &[10, 1, 64, 64]);
    for row in tape.value(y.intent).data().chunks(5) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let report = end_to_end(&shrunk_model(), 2, 2, 0.01, seed).unwrap();
        assert!(report.checked > 0);
        assert!(report.passed(), "seed {seed}: {report}");
    }
}

#[test]
fn checkpoints_round_trip_and_reject_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let config = shrunk_model();
    let params = init_model::<f32>(&config, &RngStream::new(3)).unwrap();
    let info = CheckpointInfo {
        seed: 3,
        epoch: 7,
        val_f1: 0.5,
    };
    save_model(&path, &config, &params, &info).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!((back.model, back.params, back.info), (config.clone(), params.clone(), info.clone()));

    let mut wider = config.clone();
    wider.heads.trunk_width += 1;
    let other = init_model::<f32>(&wider, &RngStream::new(3)).unwrap();
    save_model(&path, &config, &other, &info).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Incompatible(_))));
}

