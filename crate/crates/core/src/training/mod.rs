//! Loss, optimizer, schedule, fold planning, the training loop and ensemble
//! inference.

pub mod adam;
pub mod config;
pub mod ensemble;
pub mod folds;
pub mod loss;
pub mod sampler;
pub mod trainer;

pub use adam::{adam_step, AdamConfig};
pub use config::{learning_rate, TrainConfig};
pub use ensemble::{ensemble_predict, predict_labels};
pub use folds::{make_folds, split_train_val, Fold, FoldPlan};
pub use loss::{soft_dice_loss, soft_dice_terms};
pub use sampler::{sample_batch, Case};
pub use trainer::{train_model, validation_dice, LogEntry, TrainOptions, TrainOutcome};
