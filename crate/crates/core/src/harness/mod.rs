//! Training loop, checkpoints and experiment orchestration.

mod checkpoint;
mod config;
mod experiments;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, ParamMeta};
pub use config::{DataConfig, DetectorKind, TrainConfig};
pub use experiments::{
    clutter_report, clutter_report_from, compare_detectors, density_spectrum_set, mean_std_cell, sweep_window,
    ClutterReport, Comparison, ComparisonRow, SeedRun, WindowRow, WindowSweep, DEFAULT_WINDOW_SIZES,
};
pub use train::{
    evaluate_model, loss_curve_csv, lr_schedule, metrics_of, predict, run_table, train, write_run_artifacts,
    LossRecord, Metrics, Model, RunOptions, RunRecord,
};
