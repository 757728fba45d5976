//! The four-row comparison: teacher alone, student alone, student distilled
//! straight from the teacher, and the full cascade.

use std::fs;
use std::path::Path;

use super::pipeline::{prepare_data, PreparedData, SNAPSHOT_FILE};
use super::stages::{
    alignment, export_distill_records, learner_tap_channels, train_assistant, train_student, train_student_alone,
    train_teacher, StageOutput,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    emit_report, evaluate, AblationReport, AblationRow, EvalReport, ReportFormat, SeedResult, ABLATION_ROWS,
};
use crate::models::{sha256_hex, BackboneRegistry, Checkpoint};
use crate::nn::{with_threads, Execution};
use crate::types::Role;

fn score(data: &PreparedData, config: &RunConfig, ckpt: &Checkpoint) -> Result<EvalReport> {
    let (labels, masks) = data.validation.labels()?;
    evaluate(
        ckpt,
        &data.validation.images,
        &labels,
        &masks,
        config.threshold,
        data.split.class_names(),
    )
}

fn records_from(
    config: &RunConfig,
    registry: &BackboneRegistry,
    data: &PreparedData,
    producer: &Checkpoint,
    learner: Role,
    exec: Execution,
) -> Result<(crate::distill::RecordStore, String)> {
    let checksum = sha256_hex(&producer.to_bytes());
    let store = export_distill_records(
        producer,
        &checksum,
        &data.train,
        config.temperature,
        config.soft_label_mode,
        &learner_tap_channels(config, registry, learner)?,
        &alignment(config),
        exec,
    )?;
    Ok((store, checksum))
}

/// Outcomes of the four rows for one seed, in [`ABLATION_ROWS`] order.
pub fn ablation_seed(
    config: &RunConfig,
    data: &PreparedData,
    exec: Execution,
    report_dir: Option<&Path>,
) -> [Result<EvalReport>; 4] {
    let registry = BackboneRegistry::desk_scale();
    let save = |name: &str, out: &StageOutput| -> Result<()> {
        if let Some(dir) = report_dir {
            let p = dir.join(format!("{name}.report.json"));
            fs::write(&p, out.report.to_json()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };
    let teacher = train_teacher(config, &registry, &data.train, exec).and_then(|t| {
        save("teacher_alone", &t)?;
        Ok(t.checkpoint)
    });
    let teacher_row = teacher
        .as_ref()
        .map_err(|e| e.to_string())
        .and_then(|t| score(data, config, t).map_err(|e| e.to_string()));

    let alone = train_student_alone(config, &registry, &data.train, exec).and_then(|s| {
        save("student_alone", &s)?;
        score(data, config, &s.checkpoint)
    });

    let upstream = |e: &Error| Error::Parameter(format!("teacher stage failed: {e}"));
    let from_teacher = match &teacher {
        Ok(t) => records_from(config, &registry, data, t, Role::Student, exec).and_then(|(store, sum)| {
            let s = train_student(config, &registry, &data.train, &store, &sum, Some(t), exec)?;
            save("student_from_teacher", &s)?;
            score(data, config, &s.checkpoint)
        }),
        Err(e) => Err(upstream(e)),
    };
    let from_assistant = match &teacher {
        Ok(t) => records_from(config, &registry, data, t, Role::Assistant, exec).and_then(|(store, sum)| {
            let a = train_assistant(config, &registry, &data.train, &store, &sum, Some(t), exec)?;
            save("assistant", &a)?;
            let (store, sum) = records_from(config, &registry, data, &a.checkpoint, Role::Student, exec)?;
            let s = train_student(config, &registry, &data.train, &store, &sum, Some(&a.checkpoint), exec)?;
            save("student_from_assistant", &s)?;
            score(data, config, &s.checkpoint)
        }),
        Err(e) => Err(upstream(e)),
    };
    [
        teacher_row.map_err(Error::Parameter),
        alone,
        from_teacher,
        from_assistant,
    ]
}

/// Trains and scores all four rows for every seed in
/// `config.ablation_seeds`. The data split comes from `config.seed` and is
/// shared by every seed. Failed rows are kept in the report with their
/// error. When `out_dir` is given, the report is written there in all three
/// formats together with the config snapshot.
pub fn run_ablation(config: &RunConfig, out_dir: Option<&Path>) -> Result<AblationReport> {
    config.validate()?;
    with_threads(config.threads, || {
        let data = prepare_data(config)?;
        let exec = Execution::preferred();
        let mut rows: Vec<AblationRow> = ABLATION_ROWS
            .iter()
            .map(|n| AblationRow {
                name: n.to_string(),
                runs: Vec::new(),
            })
            .collect();
        for &seed in &config.ablation_seeds {
            let mut cfg = config.clone();
            cfg.seed = seed;
            let seed_dir = match out_dir {
                Some(dir) => {
                    let d = dir.join(format!("seed_{seed}"));
                    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                    Some(d)
                }
                None => None,
            };
            log::info!("ablation seed {seed}");
            for (row, result) in rows
                .iter_mut()
                .zip(ablation_seed(&cfg, &data, exec, seed_dir.as_deref()))
            {
                let run = match result {
                    Ok(report) => SeedResult {
                        seed,
                        report: Some(report),
                        error: None,
                    },
                    Err(e) => {
                        log::error!("{} seed {seed} failed: {e}", row.name);
                        SeedResult {
                            seed,
                            report: None,
                            error: Some(e.to_string()),
                        }
                    }
                };
                row.runs.push(run);
            }
        }
        let report = AblationReport {
            threshold: config.threshold,
            seeds: config.ablation_seeds.clone(),
            config_snapshot: config.serialize(),
            rows,
        };
        if let Some(dir) = out_dir {
            let snap = dir.join(SNAPSHOT_FILE);
            fs::write(&snap, &report.config_snapshot).map_err(|e| Error::io(&snap, e))?;
            for format in [ReportFormat::TextTable, ReportFormat::Csv, ReportFormat::JsonLines] {
                emit_report(&report, format, &dir.join(format!("ablation.{}", format.extension())))?;
            }
        }
        Ok(report)
    })
}
