//! Cross-validation, AUC and the experiment runners.

mod auc;
mod experiment;
mod folds;

pub use auc::{auc, auc_from_scores, roc_curve};
pub use experiment::{
    ablation_label, cohort_fingerprint, run_ablation, run_experiment, train_artifacts, AblationConfig,
    ExperimentConfig, ExperimentResult, PatientScore, ResultMetadata, StrategyResult,
};
pub use folds::{stratified_kfold, FoldAssignment, FoldSplit};
