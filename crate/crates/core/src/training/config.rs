//! Optimization and supervision settings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which heads contribute to the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Full,
    IntentOnly,
    IntentView,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Full, LossMode::IntentOnly, LossMode::IntentView];

    /// Whether head `h` (in intent, left, right, view order) is supervised.
    pub fn uses(self, head: usize) -> bool {
        match self {
            LossMode::Full => true,
            LossMode::IntentOnly => head == 0,
            LossMode::IntentView => head == 0 || head == 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Full => "full",
            LossMode::IntentOnly => "intent_only",
            LossMode::IntentView => "intent_view",
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("train.mode", format!("unknown loss mode `{s}`")))
    }
}

/// Per-task loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskWeights {
    pub intent: f64,
    pub left: f64,
    pub right: f64,
    pub view: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights {
            intent: 1.0,
            left: 1.0,
            right: 1.0,
            view: 1.0,
        }
    }
}

impl TaskWeights {
    pub fn as_array(&self) -> [f64; 4] {
        [self.intent, self.left, self.right, self.view]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    /// Consecutive non-improving epochs before a reduction.
    pub patience: usize,
    /// Minimum decrease of the loss that counts as an improvement.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.1,
            patience: 5,
            threshold: 1e-3,
        }
    }
}

/// Training-time augmentation. Jitter factors are drawn once per window and
/// applied to every frame of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability of a horizontal flip with mirrored labels.
    pub mirror: f64,
    /// Relative brightness range, `±brightness`.
    pub brightness: f64,
    /// Relative contrast range, `±contrast`.
    pub contrast: f64,
    /// Hue rotation range as a fraction of a full turn, `±hue`.
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            hue: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            mirror: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            hue: 0.0,
        }
    }

    pub fn jitters(&self) -> bool {
        self.brightness > 0.0 || self.contrast > 0.0 || self.hue > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub plateau: PlateauConfig,
    /// L2 coefficient, applied to dense-layer weights only.
    pub weight_decay: f64,
    /// Dropout on the dense trunk.
    pub dropout: f64,
    /// Dropout on the ConvLSTM candidate term.
    pub recurrent_dropout: f64,
    pub max_epochs: usize,
    /// Truncated-BPTT window length in frames.
    pub window: usize,
    pub batch: usize,
    /// Windows drawn per epoch; 0 means one per eligible training sequence.
    pub windows_per_epoch: usize,
    pub weights: TaskWeights,
    pub mode: LossMode,
    /// Overrides `model.attention.enabled` for the trained model.
    pub attention: bool,
    pub augment: AugmentConfig,
    /// Sequences per forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            plateau: PlateauConfig::default(),
            weight_decay: 1e-4,
            dropout: 0.5,
            recurrent_dropout: 0.0,
            max_epochs: 50,
            window: 20,
            batch: 4,
            windows_per_epoch: 0,
            weights: TaskWeights::default(),
            mode: LossMode::Full,
            attention: true,
            augment: AugmentConfig::default(),
            eval_batch: 8,
        }
    }
}

fn check(ok: bool, field: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, reason))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.lr > 0.0 && self.lr.is_finite(), "train.lr", "must be positive")?;
        check((0.0..1.0).contains(&self.beta1), "train.beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "train.beta2", "must lie in [0, 1)")?;
        check(self.epsilon > 0.0, "train.epsilon", "must be positive")?;
        let p = &self.plateau;
        check(p.factor > 0.0 && p.factor < 1.0, "train.plateau.factor", "must lie in (0, 1)")?;
        check(p.patience > 0, "train.plateau.patience", "must be positive")?;
        check(p.threshold >= 0.0, "train.plateau.threshold", "must be nonnegative")?;
        check(self.weight_decay >= 0.0, "train.weight_decay", "must be nonnegative")?;
        check((0.0..1.0).contains(&self.dropout), "train.dropout", "must lie in [0, 1)")?;
        check(
            (0.0..1.0).contains(&self.recurrent_dropout),
            "train.recurrent_dropout",
            "must lie in [0, 1)",
        )?;
        check(self.max_epochs > 0, "train.max_epochs", "must be positive")?;
        check(self.window > 0, "train.window", "must be positive")?;
        check(self.batch > 0, "train.batch", "must be positive")?;
        check(self.eval_batch > 0, "train.eval_batch", "must be positive")?;
        let w = self.weights.as_array();
        check(w.iter().all(|&g| g >= 0.0 && g.is_finite()), "train.weights", "must be nonnegative")?;
        check(w[0] > 0.0, "train.weights.intent", "must be positive")?;
        let a = &self.augment;
        check((0.0..=1.0).contains(&a.mirror), "train.augment.mirror", "must lie in [0, 1]")?;
        check((0.0..1.0).contains(&a.brightness), "train.augment.brightness", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&a.contrast), "train.augment.contrast", "must lie in [0, 1)")?;
        check((0.0..=0.5).contains(&a.hue), "train.augment.hue", "must lie in [0, 0.5]")?;
        Ok(())
    }
}
