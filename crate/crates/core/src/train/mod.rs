//! Target assignment, the composite detection loss and the training loop.

mod config;
mod fit;
mod loss;
mod targets;

pub use config::{LossWeights, LrSchedule, OptimizerKind, TrainConfig};
pub use fit::{batch_loss, batch_tensor, clip_grad_norm, fit, fit_manifests, Divergence, EpochRecord, FitResult, History};
pub use loss::{ciou_vars, total_loss, BoxVars, Loss, LossComponents};
pub use targets::{anchor_matches, assign_targets, AssignedTargets, ScaleTargets, TargetEntry};
