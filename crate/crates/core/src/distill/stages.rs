use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::records::{DistillRecord, RecordStore, TapLayout};
use super::train::{
    evaluate_objective, fit, reference_features, EpochLoss, FeatureSource, FitSettings, Guidance, TrainingSet,
};
use crate::config::{FeatureMatching, RunConfig, SoftScaling, StageHparams};
use crate::error::{Error, Result};
use crate::losses::{temperature_soften, Alignment, DistillObjective, FeatureTerm, LossValue};
use crate::models::{ensemble_probabilities, BackboneRegistry, BackboneSpec, Checkpoint, Network};
use crate::nn::{map_indexed, Execution};
use crate::rng::derive_seed;
use crate::types::{PredictionVector, Role, SoftLabelMode, SoftLabelVector};

const TEACHER_TAG: u64 = 0x10;
const ASSISTANT_TAG: u64 = 0x20;
const STUDENT_TAG: u64 = 0x30;
const SHUFFLE_TAG: u64 = 0x100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberHistory {
    pub backbone: String,
    pub init_seed: u64,
    pub epochs: Vec<EpochLoss>,
}

/// Summary of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Role,
    pub epochs_run: usize,
    pub members: Vec<MemberHistory>,
    /// Mean over members of the last epoch's loss (the initial loss when no
    /// epoch ran).
    pub final_loss: LossValue,
    pub wall_clock_secs: f64,
    pub seed: u64,
    /// Checksum of the record store the stage learned from, if any.
    pub input_checksum: Option<String>,
    pub config_snapshot: String,
}

impl StageReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("stage report: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub report: StageReport,
}

/// Checkpoint fingerprint: the config hash, plus the checksum of the
/// record store the stage consumed.
pub fn stage_fingerprint(config: &RunConfig, input_checksum: Option<&str>) -> String {
    format!("{}:{}", config.fingerprint(), input_checksum.unwrap_or("-"))
}

pub fn alignment(config: &RunConfig) -> Alignment {
    Alignment {
        size: config.align_size,
        seed: config.seed,
    }
}

fn hparams(config: &RunConfig, role: Role) -> &StageHparams {
    match role {
        Role::Teacher => &config.teacher,
        Role::Assistant => &config.assistant,
        Role::Student => &config.student,
    }
}

fn role_tag(role: Role) -> u64 {
    match role {
        Role::Teacher => TEACHER_TAG,
        Role::Assistant => ASSISTANT_TAG,
        Role::Student => STUDENT_TAG,
    }
}

/// Initialization seed of member `member` of `role`. Every student variant
/// of one run starts from the same weights.
pub fn init_seed(config: &RunConfig, role: Role, member: usize) -> u64 {
    derive_seed(config.seed, role_tag(role) + member as u64)
}

fn fit_settings(config: &RunConfig, role: Role, member: usize, exec: Execution) -> FitSettings {
    let h = hparams(config, role);
    FitSettings {
        stage: role,
        epochs: h.epochs,
        batch_size: h.batch_size,
        learning_rate: h.learning_rate,
        weight_decay: h.weight_decay,
        shuffle_seed: derive_seed(config.seed, SHUFFLE_TAG + role_tag(role) + member as u64),
        exec,
    }
}

/// Objective of a distilled stage: KL feature term for the assistant,
/// Wasserstein for the student.
pub fn learner_objective(config: &RunConfig, role: Role) -> DistillObjective {
    let (feature, lambda) = match role {
        Role::Student => (config.student_feature_term(), config.lambda2),
        _ => (FeatureTerm::Kl, config.lambda1),
    };
    DistillObjective {
        feature,
        lambda,
        mode: config.soft_label_mode,
        learner_temperature: config.learner_temperature.then_some(config.temperature),
        soft_weight: match config.soft_scaling {
            SoftScaling::One => 1.0,
            SoftScaling::TemperatureSquared => config.temperature * config.temperature,
        },
        align_size: config.align_size,
    }
}

pub fn backbone_specs(config: &RunConfig, registry: &BackboneRegistry, role: Role) -> Result<Vec<BackboneSpec>> {
    let names: Vec<&str> = match role {
        Role::Teacher => config.teacher_backbones.iter().map(String::as_str).collect(),
        Role::Assistant => vec![config.assistant_backbone.as_str()],
        Role::Student => vec![config.student_backbone.as_str()],
    };
    names.into_iter().map(|n| registry.get(n).cloned()).collect()
}

#[allow(clippy::too_many_arguments)]
fn train_members(
    config: &RunConfig,
    registry: &BackboneRegistry,
    role: Role,
    data: &TrainingSet,
    objective: &DistillObjective,
    guidance: Option<&Guidance>,
    input_checksum: Option<&str>,
    exec: Execution,
) -> Result<StageOutput> {
    let started = Instant::now();
    let specs = backbone_specs(config, registry, role)?;
    let mut members = Vec::with_capacity(specs.len());
    let mut histories = Vec::with_capacity(specs.len());
    let mut final_loss = LossValue::default();
    for (m, spec) in specs.iter().enumerate() {
        let seed = init_seed(config, role, m);
        let mut net = Network::build(spec, config.class_count, seed)?;
        let settings = fit_settings(config, role, m, exec);
        let epochs = fit(&mut net, objective, data, guidance, &settings)?;
        let last = match epochs.last() {
            Some(e) => e.loss,
            None => evaluate_objective(&net, objective, data, guidance, exec)?,
        };
        final_loss.add_scaled(&last, 1.0 / specs.len() as f64);
        histories.push(MemberHistory {
            backbone: spec.name.clone(),
            init_seed: seed,
            epochs,
        });
        members.push(net);
    }
    let report = StageReport {
        stage: role,
        epochs_run: hparams(config, role).epochs,
        members: histories,
        final_loss,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        seed: config.seed,
        input_checksum: input_checksum.map(str::to_string),
        config_snapshot: config.serialize(),
    };
    Ok(StageOutput {
        checkpoint: Checkpoint::new(role, stage_fingerprint(config, input_checksum), members),
        report,
    })
}

/// Trains every teacher ensemble member on hard-label BCE.
pub fn train_teacher(
    config: &RunConfig,
    registry: &BackboneRegistry,
    data: &TrainingSet,
    exec: Execution,
) -> Result<StageOutput> {
    train_members(
        config,
        registry,
        Role::Teacher,
        data,
        &DistillObjective::hard_only(),
        None,
        None,
        exec,
    )
}

/// Trains the student on hard labels only (the no-distillation baseline).
pub fn train_student_alone(
    config: &RunConfig,
    registry: &BackboneRegistry,
    data: &TrainingSet,
    exec: Execution,
) -> Result<StageOutput> {
    train_members(
        config,
        registry,
        Role::Student,
        data,
        &DistillObjective::hard_only(),
        None,
        None,
        exec,
    )
}

/// Soft labels at `temperature` for one sample's member logits. A single
/// member's logits are used as-is; ensembles go through their averaged
/// probabilities.
pub fn soften_member_logits(
    member_logits: &[Vec<f64>],
    temperature: f64,
    mode: SoftLabelMode,
) -> Result<SoftLabelVector> {
    let logits = if member_logits.len() == 1 {
        member_logits[0].clone()
    } else {
        PredictionVector::from_probabilities(ensemble_probabilities(member_logits)?)?
            .logits()
            .to_vec()
    };
    temperature_soften(&logits, temperature, mode)
}

/// Runs `checkpoint` over the distinct samples of `data` and stores soft
/// labels plus references aligned to `learner_tap_channels`.
#[allow(clippy::too_many_arguments)]
pub fn export_distill_records(
    checkpoint: &Checkpoint,
    checkpoint_checksum: &str,
    data: &TrainingSet,
    temperature: f64,
    mode: SoftLabelMode,
    learner_tap_channels: &[usize],
    alignment: &Alignment,
    exec: Execution,
) -> Result<RecordStore> {
    let first = checkpoint
        .members
        .first()
        .ok_or_else(|| Error::Parameter("checkpoint has no members".into()))?;
    let class_count = first.class_count();
    let mut seen = HashSet::new();
    let unique: Vec<usize> = (0..data.len())
        .filter(|&i| seen.insert(data.sample_ids[i].as_str()))
        .collect();
    let shape = data.images.shape();
    let records = map_indexed(unique.len(), exec, |k| -> Result<DistillRecord> {
        let i = unique[k];
        let input = data.images.sample(i);
        let logits = checkpoint
            .members
            .iter()
            .map(|m| Ok(m.forward(input, shape)?.logits_f64()))
            .collect::<Result<Vec<_>>>()?;
        let soft_labels = soften_member_logits(&logits, temperature, mode)?;
        let feats = reference_features(&checkpoint.members, input, shape, learner_tap_channels, alignment)?;
        Ok(DistillRecord {
            sample_id: data.sample_ids[i].clone(),
            soft_labels,
            feature_refs: feats
                .into_iter()
                .map(|f| f.into_iter().map(|v| v as f32).collect())
                .collect(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let taps = first
        .spec()
        .tap_names()
        .iter()
        .zip(learner_tap_channels)
        .map(|(name, &channels)| TapLayout {
            name: name.to_string(),
            channels,
            height: alignment.size,
            width: alignment.size,
        })
        .collect();
    Ok(RecordStore {
        class_count,
        temperature,
        mode,
        producer_role: checkpoint.role,
        producer_checksum: checkpoint_checksum.to_string(),
        taps,
        records,
    })
}

/// Tap channel counts of the first `role` backbone at the configured size.
pub fn learner_tap_channels(config: &RunConfig, registry: &BackboneRegistry, role: Role) -> Result<Vec<usize>> {
    let spec = backbone_specs(config, registry, role)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config(format!("no {role} backbone configured")))?;
    Ok(spec.tap_channels())
}

/// Checks a store against the checkpoint it claims to come from, the
/// current config and the learner's taps.
pub fn check_store(
    config: &RunConfig,
    store: &RecordStore,
    producer_checksum: &str,
    learner_tap_channels: &[usize],
) -> Result<()> {
    store.verify_producer(producer_checksum)?;
    if store.class_count != config.class_count {
        return Err(Error::CheckpointMismatch(format!(
            "record store has {} classes, config has {}",
            store.class_count, config.class_count
        )));
    }
    if store.temperature != config.temperature || store.mode != config.soft_label_mode {
        return Err(Error::CheckpointMismatch(format!(
            "record store was exported at T={} ({}), config asks for T={} ({})",
            store.temperature, store.mode, config.temperature, config.soft_label_mode
        )));
    }
    let expected: Vec<(usize, usize)> = learner_tap_channels.iter().map(|&c| (c, config.align_size)).collect();
    let found: Vec<(usize, usize)> = store.taps.iter().map(|t| (t.channels, t.height)).collect();
    if expected != found {
        return Err(Error::CheckpointMismatch(format!(
            "record store taps {found:?} do not match learner taps {expected:?}"
        )));
    }
    Ok(())
}

fn stored_guidance(
    config: &RunConfig,
    store: &RecordStore,
    producer_checksum: &str,
    data: &TrainingSet,
    learner_tap_channels: &[usize],
    online: Option<&Checkpoint>,
) -> Result<Guidance> {
    check_store(config, store, producer_checksum, learner_tap_channels)?;
    let index = store.index();
    let mut soft = Vec::with_capacity(data.len());
    let mut feats = Vec::with_capacity(data.len());
    for id in &data.sample_ids {
        let r = index.get(id.as_str()).ok_or_else(|| Error::MissingRecord(id.clone()))?;
        soft.push(r.soft_labels.values().to_vec());
        feats.push(
            r.feature_refs
                .iter()
                .map(|f| f.iter().map(|&v| f64::from(v)).collect())
                .collect(),
        );
    }
    let features = match (config.feature_matching, online) {
        (FeatureMatching::Online, Some(ckpt)) => FeatureSource::Online {
            members: ckpt.members.clone(),
            alignment: alignment(config),
        },
        (FeatureMatching::Online, None) => {
            return Err(Error::Config(
                "online feature matching needs the reference checkpoint".into(),
            ))
        }
        (FeatureMatching::Offline, _) => FeatureSource::Stored(feats),
    };
    Ok(Guidance { soft, features })
}

/// Distills the assistant from teacher records. `teacher_checksum` is the
/// digest of the teacher checkpoint file actually on disk; `teacher` is
/// required for online feature matching.
pub fn train_assistant(
    config: &RunConfig,
    registry: &BackboneRegistry,
    data: &TrainingSet,
    teacher_records: &RecordStore,
    teacher_checksum: &str,
    teacher: Option<&Checkpoint>,
    exec: Execution,
) -> Result<StageOutput> {
    train_distilled(
        config,
        registry,
        Role::Assistant,
        data,
        teacher_records,
        teacher_checksum,
        teacher,
        exec,
    )
}

/// Distills the student from assistant (or teacher) records.
pub fn train_student(
    config: &RunConfig,
    registry: &BackboneRegistry,
    data: &TrainingSet,
    records: &RecordStore,
    producer_checksum: &str,
    producer: Option<&Checkpoint>,
    exec: Execution,
) -> Result<StageOutput> {
    train_distilled(
        config,
        registry,
        Role::Student,
        data,
        records,
        producer_checksum,
        producer,
        exec,
    )
}

#[allow(clippy::too_many_arguments)]
fn train_distilled(
    config: &RunConfig,
    registry: &BackboneRegistry,
    role: Role,
    data: &TrainingSet,
    records: &RecordStore,
    producer_checksum: &str,
    producer: Option<&Checkpoint>,
    exec: Execution,
) -> Result<StageOutput> {
    let channels = learner_tap_channels(config, registry, role)?;
    let guidance = stored_guidance(config, records, producer_checksum, data, &channels, producer)?;
    let store_checksum = crate::models::sha256_hex(&records.to_bytes()?);
    train_members(
        config,
        registry,
        role,
        data,
        &learner_objective(config, role),
        Some(&guidance),
        Some(&store_checksum),
        exec,
    )
}
