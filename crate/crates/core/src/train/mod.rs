//! Two-stage training, optimizer, checkpoints and the toy dataset.

mod ablation;
mod adam;
mod checkpoint;
mod config;
mod data;
mod eval;
mod plateau;
mod trainer;

pub use ablation::{median, median_psnr, run_ablation, summary_table, AblationRow, Variant};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, ResumeState};
pub use config::TrainConfig;
pub use data::{
    crop_patch, make_toy_dataset, sample_offset, toy_pair, toy_splits, Dataset, Pair, Split, ToyDatasetSpec,
};
pub use plateau::Plateau;
pub use trainer::{LossRecord, RunSummary, Trainer, DIAGNOSTIC_DIR, FINAL_DIR, LATEST_DIR, LOSS_FILE, STAGE1_DIR};
pub use eval::{evaluate, predict_padded, EvalReport};
