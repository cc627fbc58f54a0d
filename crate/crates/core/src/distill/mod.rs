//! Student distillation: losses, self-paced plans and the training loops.

pub mod loss;
pub mod plan;
pub mod train;

pub use loss::{joint_loss, kd_loss, sup_loss, InstanceTerms, KdTarget};
pub use plan::{plan_epoch, plan_size, score_confidences, ConfidenceRecord, EpochPlan};
pub use train::{
    train_student, train_teacher, DistillConfig, NegativesMode, StepLog, StudentOptions, StudentRun, TeacherConfig,
    TeacherRun, Toggles,
};
