//! Cross-validated evaluation: the metric suite, exact paired statistics,
//! the CV harness, and report files.

mod cv;
mod metrics;
mod report;
mod wilcoxon;

pub use cv::{
    benchmark_suite, derive_seed, run_cv, seed_level_mean_std, softmax_probs, summarize_model,
    train_single_fold, BenchmarkReport, CvSettings, FoldResult, MeanStd, ModelSummary, WilcoxonRow,
};
pub use metrics::{compute_metrics, Metrics};
pub use report::{
    read_folds_csv, write_benchmark, write_folds_csv, write_histories, write_loss_curve_csv,
    write_report_csv, write_wilcoxon_csv, FoldCsvRow,
};
pub use wilcoxon::{wilcoxon_exact, WilcoxonResult};
