//! Training orchestration: run configuration, optimizer, per-step losses,
//! the epoch loop with evaluation, export and ablation grids.

mod ablate;
mod config;
mod optim;
mod run;
mod step;

pub use ablate::{ablate, format_table, variant_name, AblationGrid, AblationRow};
pub use config::{AssignmentConfig, AuxLossWeights, Branches, OptimizerConfig, RunConfig};
pub use optim::{clip_grad_norm, learning_rate, AdamW};
pub use run::{
    evaluate_model, export_curves, load_inference_model, load_run, save_checkpoint, save_run, train, EpochRecord,
    TrainingRun, AP_FILE, CHECKPOINT_FILE, CONFIG_FILE, HISTORY_FILE, LOSSES_FILE, SUMMARY_FILE,
};
pub use step::{aux_assignment, batch_loss, forward_options, image_losses, ImageLosses, LOSS_SCOPE};
