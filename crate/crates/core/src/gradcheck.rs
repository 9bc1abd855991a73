//! End-to-end finite-difference check of the multi-task loss with respect
//! to the model parameters.

use blinknet_tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Selection};
use blinknet_tensor::{RngStream, Tensor};

use crate::error::Result;
use crate::model::{forward_sequence, init_model, ForwardOptions, ModelConfig};
use crate::params::ParamVars;
use crate::semantics::{FrameLabel, IntentState, LightState, ViewFace};
use crate::training::{multitask_loss, LossMode, TaskWeights};

pub const END_TO_END_TOLERANCE: f64 = 1e-3;

/// The desk topology narrowed and shrunk to 16×16 input.
pub fn shrunk_model() -> ModelConfig {
    let mut m = ModelConfig::desk();
    m.input_size = 16;
    m.attention.channels = vec![2, 2, 2, 1];
    m.backbone.channels = vec![3, 4, 4, 6];
    m.convlstm.hidden = vec![3, 3];
    m.heads.trunk_width = 6;
    m
}

/// Compares analytic and central-difference gradients of the full
/// multi-task loss over a `T`-frame, `N`-sequence batch, for a random
/// `fraction` of all parameters. Dropout is active with fixed masks.
pub fn end_to_end(model: &ModelConfig, steps: usize, batch: usize, fraction: f64, seed: u64) -> Result<GradCheckReport> {
    let root = RngStream::new(seed);
    let params = init_model::<f64>(model, &root.split(0))?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    // Zero-initialized biases and peepholes put pre-activations of dead
    // channels exactly on the ReLU kink; a generic point avoids that.
    let mut r = root.split(5);
    let inputs: Vec<Tensor<f64>> = params
        .iter()
        .map(|(_, t)| {
            if t.data().iter().all(|&v| v == 0.0) {
                Tensor::from_fn(t.shape(), |_| r.uniform_range(-0.1, 0.1))
            } else {
                t.clone()
            }
        })
        .collect();
    let s = model.input_size;
    let mut r = root.split(1);
    let frames = Tensor::from_fn(&[steps, batch, 3, s, s], |_| r.uniform());
    let mut r = root.split(2);
    let labels: Vec<FrameLabel> = (0..steps * batch)
        .map(|_| {
            let light = |r: &mut RngStream| LightState::ALL[r.below(3) as usize];
            let (left, right) = (light(&mut r), light(&mut r));
            FrameLabel::from_lights(left, right, ViewFace::ALL[r.below(4) as usize])
        })
        .collect();
    debug_assert!(labels.iter().all(|l| l.intent.index() < IntentState::COUNT));
    let opts = ForwardOptions {
        training: true,
        dropout: 0.3,
        recurrent_dropout: 0.3,
    };
    let check = GradCheckOptions {
        tolerance: END_TO_END_TOLERANCE,
        step: 1e-5,
        retry_step: Some(1e-6),
        selection: Selection::Fraction {
            fraction,
            seed: root.split(3).key(),
        },
        ..GradCheckOptions::default()
    };
    grad_check(
        "end-to-end multi-task loss",
        &inputs,
        |tape, vars| {
            let pv = ParamVars::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let x = tape.constant(frames.clone());
            let y = forward_sequence(tape, x, model, &pv, &opts, &mut root.split(4))?;
            let terms = multitask_loss(tape, y.heads(), &labels, &TaskWeights::default(), LossMode::Full)?;
            Ok(terms.total)
        },
        check,
    )
}
