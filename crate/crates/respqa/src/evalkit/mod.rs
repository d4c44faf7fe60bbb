//! Evaluation protocol: normalization, label and number extraction,
//! discriminative and regression metrics, tolerance-accuracy curves,
//! stratified reports, and routing-distribution analysis.

pub mod metrics;
pub mod report;
pub mod text;

pub use metrics::{
    default_taus, discriminative_metrics, regression_metrics, token_f1, DiscMetrics, MetricError,
    Prediction, RegMetrics,
};
pub use report::{
    build_report, forced_grid, read_predictions_jsonl, utilization_table, write_forced_grid_csv,
    write_metrics_csv, write_predictions_jsonl, write_tolerance_csv, write_utilization_csv,
    ForcedGrid, MetricReport, PredictionMeta, UtilizationTable,
};
pub use text::{extract_label, extract_number, normalize};
