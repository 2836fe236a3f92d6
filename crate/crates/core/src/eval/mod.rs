//! Metrics, planted data and evaluation protocols.

pub mod metrics;
pub mod protocols;
pub mod synth;

pub use metrics::{
    evaluate, mean_average_precision, topk_accuracy, write_profiles_csv, EvalReport,
};
pub use protocols::{
    ablation_suite, class_subset, few_shot_split, run_ablation, stratified_split,
    tpp_correlation_study, zero_shot_eval, AblationTable, TppStudy, TrainedModel,
};
pub use synth::{generate_synthetic, SyntheticConfig};
