//! The three training stages, the record handoff between them, the full
//! pipeline and the ablation harness.

mod ablation;
mod pipeline;
mod records;
mod stages;
mod train;

pub use ablation::{ablation_seed, run_ablation};
pub use pipeline::{
    prepare_data, run_pipeline, PipelineMetrics, PipelineOutcome, PreparedData, StageStatus, Workspace,
    ASSISTANT_CHECKPOINT, ASSISTANT_REPORT, METRICS_JSON, METRICS_TEXT, PIPELINE_ARTIFACTS, SNAPSHOT_FILE,
    STUDENT_CHECKPOINT, STUDENT_RECORDS, STUDENT_REPORT, TEACHER_CHECKPOINT, TEACHER_RECORDS, TEACHER_REPORT,
};
pub use records::{DistillRecord, RecordStore, TapLayout, RECORD_STORE_VERSION};
pub use stages::{
    alignment, backbone_specs, check_store, export_distill_records, init_seed, learner_objective, learner_tap_channels,
    soften_member_logits, stage_fingerprint, train_assistant, train_student, train_student_alone, train_teacher,
    MemberHistory, StageOutput, StageReport,
};
pub use train::{
    evaluate_objective, fit, reference_features, EpochLoss, FeatureSource, FitSettings, Guidance, TrainingSet,
};
