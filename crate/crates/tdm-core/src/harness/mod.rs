//! Training, evaluation, ablation, persistence and export.

mod ablate;
mod checkpoint;
mod config;
mod eval;
mod export;
mod gradcheck;
mod train;

pub use ablate::{ablate, cell_config, write_ablation_csv, AblationCell, AblationPlan, AblationRow, MODULE_GRID};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, OptimizerInfo, TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use config::{DatasetSource, RunConfig};
pub use eval::{compute_ci, evaluate, evaluate_model, EvalOptions, EvalReport, EvalSummary};
pub use export::{channel_weights, export_channel_weights, ChannelExport, MapRow, WeightRow, MAPS_FILE, WEIGHTS_FILE};
pub use gradcheck::{
    grad_check_command, grad_check_report, grad_check_setup, GradCheckConfig, GradCheckReport, GroupReport, ABS_TOL,
    REL_TOL, SMALL_GRAD,
};
pub use train::{
    held_out_loss, stream_rng, train, train_steps, TrainOutcome, EPISODE_STREAM, HOLDOUT_STREAM, LABEL_STREAM,
    NOISE_STREAM,
};
