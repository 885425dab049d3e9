//! End-to-end orchestration: tasks and stratified splits, the experiment
//! runner, evaluation reports and the synthetic dataset generator.

mod config;
mod experiment;
mod report;
mod synth;
mod task;

pub use config::{AlignmentConfig, ExperimentConfig, FeatureConfig, FilterConfig};
pub use experiment::{
    breaths_in_recording, class_counts, derive_seed, extract_magnitudes, filter_recording,
    prepare_instances, run_experiment, segments_csv, task_data, train_network, ExperimentResult,
    PreparedData, SegmentRow, TaskData,
};
pub use report::{predict_models, EvalReport, SummaryGrid, ENSEMBLE};
pub use synth::{generate_synthetic, synthesize_instance, SynthConfig};
pub use task::{build_task, stratified_split, LabeledDataset, SplitIds, TaskSpec};
