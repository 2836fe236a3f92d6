//! Contrastive training of the attention projections and fusion heads.

pub mod backward;
pub mod gradcheck;
pub mod gradients;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use backward::{backward, compute_logits, forward_loss, BackwardOutput, Batch};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, GradFixture, Objective};
pub use gradients::{GradientSet, TensorSet};
pub use loss::{loss_t2v, loss_v2t, total_loss, LogitMatrix, LossBreakdown};
pub use optim::{adamw_step, AdamWConfig, LrSchedule, OptimState};
pub use trainer::{train, write_history_csv, EpochRecord, TrainConfig, TrainOutput};
