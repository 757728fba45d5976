//! Threshold-based precision / recall / F1 and ablation reporting.

mod eval;
mod report;

pub use eval::{
    evaluate, predict_probabilities, ratios, score_predictions, Aggregate, ClassMetrics, EvalReport, DEFAULT_THRESHOLD,
    ZERO_DENOMINATOR_NOTE,
};
pub use report::{
    emit_report, parse_json_lines, render_report, AblationReport, AblationRow, ReportFormat, SeedResult, ABLATION_ROWS,
};
