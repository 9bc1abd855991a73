//! Multi-task loss, Adam, plateau scheduling, stratified batching,
//! augmentation, metrics, the training loop and the ablation harness.

mod ablate;
mod adam;
mod augment;
mod batches;
mod config;
mod loss;
mod metrics;
mod plateau;
mod trainer;

pub use ablate::{ablate, ablation_variants, median, AblationObserver, AblationReport, AblationRow, SeedResult, Variant};
pub use adam::{Adam, AdamConfig};
pub use augment::{augment, mirror, Clip, Jitter};
pub use batches::{majority_intent, StratifiedSampler, Window};
pub use config::{AugmentConfig, LossMode, PlateauConfig, TaskWeights, TrainConfig};
pub use loss::{head_targets, multitask_loss, LossTerms, LOG_CLAMP};
pub use metrics::{confusion, harmonic_mean, metrics, ClassMetrics, Confusion, MetricsReport};
pub use plateau::PlateauScheduler;
pub use trainer::{
    assemble_batch, effective_model, evaluate, predict, train, Batch, EpochRecord, Evaluation, LossSummary,
    SequencePrediction, TrainObserver, TrainOutcome,
};
