//! Detection matching, average precision, F1, count agreement, stratified
//! reports and latency measurement.

mod bench;
mod counts;
pub mod infer;
mod matching;
mod report;

pub use bench::{benchmark, Latency};
pub use counts::{count_metrics, CountMetrics, R2Mode};
pub use infer::{detect_canvas, detect_images, evaluate_samples, InferenceOptions};
pub use matching::{
    average_precision, best_f1_threshold, f1, match_detections, pr_curve, precision_recall_at, MatchResult,
    OperatingPoint, PrPoint,
};
pub use report::{
    per_vine_counts, stratified_report, vine_count, write_counts_csv, write_strata_csv, CountRegression, EvalOptions,
    MetricReport, Metrics, StratumReport, VineCount,
};
