//! Losses, optimization, training loops and evaluation.

mod adam;
mod loss;
mod metrics;
mod train;

pub use adam::{Adam, AdamConfig};
pub use loss::{
    cross_entropy, kl_div, soft_probs, student_loss, teacher_loss, KdConfig, KlOrientation,
    PROB_FLOOR,
};
pub use metrics::{evaluate, write_confusion_csv, ConfusionMatrix, EvalMetrics, StreamAccuracy};
pub use train::{train, Timing, TrainConfig, TrainReport};
