//! Weighted multi-task negative log-likelihood.

use blinknet_tensor::{Scalar, Tape, Var};

use super::config::{LossMode, TaskWeights};
use crate::error::{Error, Result};
use crate::model::{HEAD_NAMES, HEAD_SIZES};
use crate::semantics::FrameLabel;

/// Probabilities below this are clamped before the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// The total loss and each supervised head's unweighted term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Per head in intent, left, right, view order; `None` when the mode
    /// leaves the head unsupervised.
    pub heads: [Option<Var>; 4],
}

/// Class index of each head for one frame.
pub fn head_targets(label: &FrameLabel) -> [usize; 4] {
    [label.intent.index(), label.left.index(), label.right.index(), label.view.index()]
}

/// `mean over frames of -Σ γ_k ln p_k[target]`, restricted to the heads
/// selected by `mode`. Row `r` of every distribution pairs with `labels[r]`.
pub fn multitask_loss<F: Scalar>(
    tape: &mut Tape<F>,
    heads: [Var; 4],
    labels: &[FrameLabel],
    weights: &TaskWeights,
    mode: LossMode,
) -> Result<LossTerms> {
    let gammas = weights.as_array();
    let clamp = F::from_f64_lossy(LOG_CLAMP);
    let mut parts = [None; 4];
    let mut total: Option<Var> = None;
    for (h, &dist) in heads.iter().enumerate() {
        if !mode.uses(h) {
            continue;
        }
        let shape = tape.shape(dist);
        if shape.len() != 2 || shape[1] != HEAD_SIZES[h] {
            return Err(Error::LengthMismatch(format!(
                "{} head has shape {shape:?}, expected [{}, {}]",
                HEAD_NAMES[h],
                labels.len(),
                HEAD_SIZES[h]
            )));
        }
        let targets: Vec<usize> = labels.iter().map(|l| head_targets(l)[h]).collect();
        let term = tape.cross_entropy(dist, &targets, F::one(), clamp)?;
        parts[h] = Some(term);
        let weighted = tape.scale(term, F::from_f64_lossy(gammas[h]));
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("every loss mode supervises the intent head");
    Ok(LossTerms { total, heads: parts })
}
