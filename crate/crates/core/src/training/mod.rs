//! Optimization loops for the shared-basis model, the distillation
//! pathway, and the reference strategies.

mod config;
mod distill;
mod eval;
mod loops;
mod optim;
mod report;

pub use self::config::{OptimizerKind, PretrainSource, TrainConfig};
pub use self::distill::{distill_to_shared, fit_core, train_distilled, DistillReport, LayerDistill};
pub use self::eval::{accuracy, evaluate};
pub use self::loops::{
    pretrain_backbone, time_scale, train, train_baseline, train_matlora, Method, Strategy,
    TrainedModel,
};
pub use self::optim::Optimizer;
pub use self::report::{monotonicity_warnings, LossRecord, TrainReport, MONOTONE_WINDOW};
