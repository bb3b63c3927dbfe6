//! Accuracy, the harmonic task score ω, forgetting Δ and reports.

mod metrics;
mod report;
mod scoring;

pub use metrics::{exact, forgetting_delta, is_backward_transfer, mean, percent, render4, task_score, to_f64, Exact};
pub use report::{
    read_report_csv, report_csv, report_rows, serialize_report, split_report, summary_json, ForgettingMatrix,
    MatrixRow, ReportFiles, ReportRow, RunManifest, SplitReport, TaskScore, REPORT_COLUMNS,
};
pub use scoring::{
    accuracy_generative, accuracy_multichoice, evaluate_dataset, generative_correct, EvalResult, ModelPredictor,
    Predictor,
};
