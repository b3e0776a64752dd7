//! Datasets, the staged training schedule, evaluation metrics and the ablation harness.

mod ablation;
mod dataset;
mod metrics;
pub mod synth;
mod trainer;

pub use ablation::{ablation_csv, evaluate, run_ablation, run_all_ablations, architecture_variants, loss_variants, AblationRow, AblationSpec};
pub use dataset::{
    load_dataset, split_dataset, valid_id, write_sample, AnnotationRecord, DatasetIndex, DatasetPaths, SamplePair,
};
pub use metrics::{count_flops, count_params, flop_split, layer_table, psnr, psnr_from_mse};
pub use trainer::{prepare, train_all, train_all_with, EpochLoss, LossSpec, Prepared, RunLog, StageLog, TrainConfig, Trainer};
