//! Experiment configuration, training, evaluation, checkpoints and reports.

mod ablation;
mod checkpoint;
mod config;
mod optim;
mod report;
mod train;

pub use ablation::{ablation_variants, run_ablation, AblationOutcome};
pub use checkpoint::{load_checkpoint, save_checkpoint, tensor_names, Checkpoint};
pub use config::{Ablation, DataConfig, EvalConfig, ExperimentConfig, OptimConfig};
pub use optim::{cosine_lr, AdamW};
pub use report::{
    ablation_table_csv, dump_attention, plot_loss_curves, plot_weight_histogram, write_metrics_csv,
    write_run_outputs, AblationRow,
};
pub use train::{evaluate, predict, prepare_data, train, EpochRecord, PreparedData, RunRecord, Snapshot};
