//! Artifact directory layout, resumable stage runner and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::records::RecordStore;
use super::stages::{
    alignment, backbone_specs, check_store, export_distill_records, learner_tap_channels, stage_fingerprint,
    train_assistant, train_student, train_teacher, StageOutput, StageReport,
};
use super::train::TrainingSet;
use crate::config::{FeatureReference, MissingImage, RunConfig};
use crate::data::{parse_manifest, resample, resolve_samples, DatasetSplit, SamplingPolicy};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::models::{file_checksum, BackboneRegistry, Checkpoint};
use crate::nn::{with_threads, Execution};
use crate::types::Role;

pub const SNAPSHOT_FILE: &str = "config.snapshot.cfg";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const TEACHER_REPORT: &str = "teacher.report.json";
pub const TEACHER_RECORDS: &str = "teacher.records";
pub const ASSISTANT_CHECKPOINT: &str = "assistant.ckpt";
pub const ASSISTANT_REPORT: &str = "assistant.report.json";
pub const STUDENT_RECORDS: &str = "student.records";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const STUDENT_REPORT: &str = "student.report.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TEXT: &str = "metrics.txt";

/// Every file a full pipeline run leaves in its output directory.
pub const PIPELINE_ARTIFACTS: [&str; 11] = [
    SNAPSHOT_FILE,
    TEACHER_CHECKPOINT,
    TEACHER_REPORT,
    TEACHER_RECORDS,
    ASSISTANT_CHECKPOINT,
    ASSISTANT_REPORT,
    STUDENT_RECORDS,
    STUDENT_CHECKPOINT,
    STUDENT_REPORT,
    METRICS_JSON,
    METRICS_TEXT,
];

/// Loaded, resampled data for one run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub train: TrainingSet,
    pub validation: TrainingSet,
}

/// Reads the configured manifests, applies the label policy, splits,
/// resamples the training list and decodes all images.
pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    if config.train_manifest.is_empty() {
        return Err(Error::Config("train_manifest is not set".into()));
    }
    let names = config.class_names();
    let rows = parse_manifest(Path::new(&config.train_manifest), &names)?;
    let samples = resolve_samples(&rows, config.label_policy)?;
    let split = if config.validation_manifest.is_empty() {
        DatasetSplit::shuffled(samples, names, config.validation_fraction, config.seed)?
    } else {
        let val_rows = parse_manifest(Path::new(&config.validation_manifest), &names)?;
        DatasetSplit::new(samples, resolve_samples(&val_rows, config.label_policy)?, names)?
    };
    let policy = SamplingPolicy {
        mode: config.sampling_policy,
        target_ratio: config.sampling_ratio,
        seed: config.seed,
    };
    let split = resample(&split, &policy)?;
    let skip = config.missing_image == MissingImage::Skip;
    let train = TrainingSet::load(split.train(), config.image_size, skip)?;
    let validation = TrainingSet::load(split.validation(), config.image_size, skip)?;
    Ok(PreparedData {
        split,
        train,
        validation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Trained,
    Reused,
}

/// Validation metrics of the three cascade stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub teacher: EvalReport,
    pub assistant: EvalReport,
    pub student: EvalReport,
}

impl PipelineMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, r) in [
            ("teacher", &self.teacher),
            ("assistant", &self.assistant),
            ("student", &self.student),
        ] {
            out += &format!("== {name} ==\n{}\n", r.to_table());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub stages: Vec<(&'static str, StageStatus)>,
    pub metrics: PipelineMetrics,
}

/// One run's output directory plus the data and config it works from.
pub struct Workspace {
    root: PathBuf,
    config: RunConfig,
    registry: BackboneRegistry,
    data: PreparedData,
    exec: Execution,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Workspace {
    /// Validates the config, creates `root` and loads the data.
    pub fn open(config: &RunConfig, root: &Path) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let data = prepare_data(config)?;
        Ok(Workspace {
            root: root.to_path_buf(),
            config: config.clone(),
            registry: BackboneRegistry::desk_scale(),
            data,
            exec: Execution::preferred(),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.root.join(file)
    }

    pub fn data(&self) -> &PreparedData {
        &self.data
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn write_snapshot(&self) -> Result<()> {
        write(&self.path(SNAPSHOT_FILE), &self.config.serialize())
    }

    fn require(&self, file: &str) -> Result<PathBuf> {
        let p = self.path(file);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    fn save_stage(&self, out: &StageOutput, ckpt: &str, report: &str) -> Result<()> {
        out.checkpoint.save(&self.path(ckpt))?;
        write(&self.path(report), &out.report.to_json())
    }

    fn reusable_checkpoint(&self, file: &str, role: Role, input: Option<&str>) -> Option<Checkpoint> {
        let specs = backbone_specs(&self.config, &self.registry, role).ok()?;
        let ckpt = Checkpoint::load_expecting(&self.path(file), &specs, self.config.class_count).ok()?;
        (ckpt.fingerprint == stage_fingerprint(&self.config, input)).then_some(ckpt)
    }

    /// Loads `file` and checks it can drive `learner`; `None` if not.
    fn reusable_store(&self, file: &str, producer_checksum: &str, learner: Role) -> Option<RecordStore> {
        let store = RecordStore::load(&self.path(file)).ok()?;
        let channels = learner_tap_channels(&self.config, &self.registry, learner).ok()?;
        check_store(&self.config, &store, producer_checksum, &channels).ok()?;
        let index = store.index();
        self.data
            .train
            .sample_ids
            .iter()
            .all(|id| index.contains_key(id.as_str()))
            .then_some(store)
    }

    pub fn train_teacher(&self, resume: bool) -> Result<StageStatus> {
        if resume
            && self
                .reusable_checkpoint(TEACHER_CHECKPOINT, Role::Teacher, None)
                .is_some()
        {
            return Ok(StageStatus::Reused);
        }
        let out = train_teacher(&self.config, &self.registry, &self.data.train, self.exec)?;
        self.save_stage(&out, TEACHER_CHECKPOINT, TEACHER_REPORT)?;
        Ok(StageStatus::Trained)
    }

    /// Producer of the records consumed by `learner`.
    fn producer_for(&self, learner: Role) -> (&'static str, Role) {
        match (learner, self.config.feature_reference) {
            (Role::Student, FeatureReference::Assistant) => (ASSISTANT_CHECKPOINT, Role::Assistant),
            _ => (TEACHER_CHECKPOINT, Role::Teacher),
        }
    }

    fn records_file(learner: Role) -> &'static str {
        match learner {
            Role::Student => STUDENT_RECORDS,
            _ => TEACHER_RECORDS,
        }
    }

    /// Exports the records that `learner` (assistant or student) trains on.
    pub fn export_records(&self, learner: Role, resume: bool) -> Result<StageStatus> {
        if learner == Role::Teacher {
            return Err(Error::Parameter("the teacher does not learn from records".into()));
        }
        let (ckpt_file, producer_role) = self.producer_for(learner);
        let ckpt_path = self.require(ckpt_file)?;
        let checksum = file_checksum(&ckpt_path)?;
        let out_file = Self::records_file(learner);
        if resume && self.reusable_store(out_file, &checksum, learner).is_some() {
            return Ok(StageStatus::Reused);
        }
        let specs = backbone_specs(&self.config, &self.registry, producer_role)?;
        let ckpt = Checkpoint::load_expecting(&ckpt_path, &specs, self.config.class_count)?;
        let channels = learner_tap_channels(&self.config, &self.registry, learner)?;
        let store = export_distill_records(
            &ckpt,
            &checksum,
            &self.data.train,
            self.config.temperature,
            self.config.soft_label_mode,
            &channels,
            &alignment(&self.config),
            self.exec,
        )?;
        store.save(&self.path(out_file))?;
        Ok(StageStatus::Trained)
    }

    /// Trains the assistant or the student from its records.
    pub fn train_learner(&self, learner: Role, resume: bool) -> Result<StageStatus> {
        let (ckpt_out, report_out) = match learner {
            Role::Assistant => (ASSISTANT_CHECKPOINT, ASSISTANT_REPORT),
            Role::Student => (STUDENT_CHECKPOINT, STUDENT_REPORT),
            Role::Teacher => return self.train_teacher(resume),
        };
        let records_path = self.require(Self::records_file(learner))?;
        let records_checksum = file_checksum(&records_path)?;
        if resume
            && self
                .reusable_checkpoint(ckpt_out, learner, Some(&records_checksum))
                .is_some()
        {
            return Ok(StageStatus::Reused);
        }
        let (producer_file, producer_role) = self.producer_for(learner);
        let producer_path = self.require(producer_file)?;
        let producer_checksum = file_checksum(&producer_path)?;
        let store = RecordStore::load(&records_path)?;
        let producer = Checkpoint::load_expecting(
            &producer_path,
            &backbone_specs(&self.config, &self.registry, producer_role)?,
            self.config.class_count,
        )?;
        let train = match learner {
            Role::Assistant => train_assistant,
            _ => train_student,
        };
        let out = train(
            &self.config,
            &self.registry,
            &self.data.train,
            &store,
            &producer_checksum,
            Some(&producer),
            self.exec,
        )?;
        self.save_stage(&out, ckpt_out, report_out)?;
        Ok(StageStatus::Trained)
    }

    /// Scores a checkpoint file on the validation split.
    pub fn evaluate_checkpoint(&self, path: &Path) -> Result<EvalReport> {
        let ckpt = Checkpoint::load(path)?;
        let (labels, masks) = self.data.validation.labels()?;
        evaluate(
            &ckpt,
            &self.data.validation.images,
            &labels,
            &masks,
            self.config.threshold,
            self.data.split.class_names(),
        )
    }

    /// Evaluates all three stage checkpoints and writes the metric files.
    pub fn write_metrics(&self) -> Result<PipelineMetrics> {
        let metrics = PipelineMetrics {
            teacher: self.evaluate_checkpoint(&self.require(TEACHER_CHECKPOINT)?)?,
            assistant: self.evaluate_checkpoint(&self.require(ASSISTANT_CHECKPOINT)?)?,
            student: self.evaluate_checkpoint(&self.require(STUDENT_CHECKPOINT)?)?,
        };
        write(&self.path(METRICS_JSON), &metrics.to_json())?;
        write(&self.path(METRICS_TEXT), &metrics.to_table())?;
        Ok(metrics)
    }

    /// Runs every stage in order. With `resume`, stages whose artifacts are
    /// still valid for this config and their inputs are kept.
    pub fn run(&self, resume: bool) -> Result<PipelineOutcome> {
        self.write_snapshot()?;
        let stages = vec![
            ("teacher", self.train_teacher(resume)?),
            ("teacher-records", self.export_records(Role::Assistant, resume)?),
            ("assistant", self.train_learner(Role::Assistant, resume)?),
            ("student-records", self.export_records(Role::Student, resume)?),
            ("student", self.train_learner(Role::Student, resume)?),
        ];
        let metrics = self.write_metrics()?;
        Ok(PipelineOutcome { stages, metrics })
    }

    pub fn stage_report(&self, role: Role) -> Result<StageReport> {
        let file = match role {
            Role::Teacher => TEACHER_REPORT,
            Role::Assistant => ASSISTANT_REPORT,
            Role::Student => STUDENT_REPORT,
        };
        let p = self.require(file)?;
        StageReport::from_json(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)
    }
}

/// Opens a workspace in `root` and runs the full cascade on `config.threads`
/// workers.
pub fn run_pipeline(config: &RunConfig, root: &Path, resume: bool) -> Result<PipelineOutcome> {
    with_threads(config.threads, || Workspace::open(config, root)?.run(resume))
}
