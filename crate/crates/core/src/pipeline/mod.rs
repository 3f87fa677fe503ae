//! Source training, class-set adaptation, direct prediction and the
//! per-image entropy baseline.

mod baseline;
mod config;
mod cost;
mod stages;

pub use baseline::{baseline_tpt_predict, TptConfig};
pub use config::{LrSchedule, TrainConfig};
pub use cost::{CostMeter, PhaseCost};
pub use stages::{
    accuracy, class_distance_matrix, class_text_features, diagnose_grad_alignment, init_model, mean_off_diagonal,
    stage1_train, stage2_adapt, stage3_predict, Stage1Output, Stage2Output, StepLog,
};
