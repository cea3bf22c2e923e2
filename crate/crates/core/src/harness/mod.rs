//! Desk-scale experimental pipeline: synthetic task, frozen backbone,
//! CB-only training, SMd evaluation and the experiment grids.

mod backbone;
mod experiments;
mod task;
mod train;
mod wer;

pub use backbone::FrozenBackbone;
pub use experiments::{relative_reduction, retention_sweep, run_matrix, MatrixRow, SweepRow, MATRIX_CELLS};
pub use task::{Sample, Split, Subset, SyntheticTask, TaskConfig};
pub use train::{
    attribution_factors, embedding_dump, evaluate, infer, probe_hash, train_cb, EpochMetrics, Inference, TrainConfig,
    TrainRun, Trained, WerReport, Workbench,
};
pub use wer::{edit_distance, wer, WerCounter};
