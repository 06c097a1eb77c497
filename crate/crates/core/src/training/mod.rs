//! Losses, intra-domain mixup and the training loop.

mod losses;
mod mixup;
mod trainer;

pub use losses::{
    adversarial_loss, domain_loss, erm_loss, task_loss_rows, total_loss, Batch, LossComponents,
    LossMode, StepLoss, TaskKind,
};
pub use mixup::{
    intra_domain_mixup_loss, mixed_inputs, mixup_loss_with_plan, plan_mixup, MixPart, MixupPlan,
};
pub use trainer::{
    evaluate_mix, generate_dataset, prepare_data, run_training, run_training_from, MetricRow,
    RngStreams, TrainOutcome,
};
