//! Straight-through training: data, augmentation, loss, Adam and the epoch loop.

pub mod adam;
pub mod augment;
pub mod data;
pub mod loss;
pub mod schedule;
pub mod trainer;

pub use adam::{adam_step, AdamState};
pub use augment::{augment, flip_horizontal};
pub use data::{load_dataset, Dataset, DatasetId, Split};
pub use loss::{softmax_cross_entropy, LossOutput};
pub use schedule::LrSchedule;
pub use trainer::{
    evaluate, lr_schedule, run_training, train_epoch, train_step, EpochMetrics, EpochSummary,
    EvalResult, RunSummary, StepRecord, TrainConfig, TrainState, METRICS_HEADER,
};
