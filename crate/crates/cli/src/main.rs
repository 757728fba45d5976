//! `kdcascade` command-line interface.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use kdcascade::config::KEY_DOCS;
use kdcascade::data::{synthesize_named, SynthSpec};
use kdcascade::distill::{
    run_ablation, Workspace, ASSISTANT_CHECKPOINT, ASSISTANT_REPORT, PIPELINE_ARTIFACTS, SNAPSHOT_FILE,
    STUDENT_CHECKPOINT, STUDENT_RECORDS, STUDENT_REPORT, TEACHER_CHECKPOINT, TEACHER_RECORDS, TEACHER_REPORT,
};
use kdcascade::nn::with_threads;
use kdcascade::types::Role;
use kdcascade::{Error, RunConfig};

const OUTPUT_ROOT_ENV: &str = "KDCASCADE_OUTPUT_ROOT";
const LOCK_FILE: &str = ".kdcascade.lock";

#[derive(Parser)]
#[command(
    name = "kdcascade",
    version,
    about = "Teacher, assistant and student distillation for multi-label images"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (`key = value` lines). `chexpert-style.cfg` and
    /// `covid-style.cfg` fall back to the shipped profiles.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,

    /// Start from a shipped profile (chexpert-style or covid-style) instead of the defaults.
    #[arg(long, conflicts_with = "config")]
    profile: Option<String>,

    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory. Defaults to a subdirectory of $KDCASCADE_OUTPUT_ROOT (or ./runs).
    #[arg(long, short = 'o')]
    output_dir: Option<PathBuf>,

    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Learner {
    Assistant,
    Student,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic motif dataset (PNG images plus manifests).
    SynthData(Common),
    /// Train the teacher ensemble on hard labels.
    TrainTeacher(Common),
    /// Export soft labels and feature references for the next stage.
    ExportRecords {
        #[command(flatten)]
        common: Common,
        /// Stage that will consume the records.
        #[arg(long = "for", value_enum, default_value = "assistant")]
        learner: Learner,
    },
    /// Distill the assistant from the teacher records.
    DistillAssistant(Common),
    /// Distill the student from the assistant (or teacher) records.
    DistillStudent(Common),
    /// Run every stage and evaluate.
    RunPipeline {
        #[command(flatten)]
        common: Common,
        /// Keep stage artifacts that are still valid for this config.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the validation split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score; defaults to the student in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and compare the four ablation configurations.
    Ablate(Common),
}

/// Exit codes: 2 configuration, 3 stage failure, 4 I/O.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Category {
    Config,
    Stage,
    Io,
}

impl Category {
    fn of(err: &Error) -> Self {
        match err {
            Error::Config(_) | Error::Parameter(_) | Error::Registry(_) => Category::Config,
            Error::Io { .. } | Error::Format { .. } | Error::Manifest { .. } | Error::Image { .. } => Category::Io,
            _ => Category::Stage,
        }
    }

    fn code(self) -> u8 {
        match self {
            Category::Config => 2,
            Category::Stage => 3,
            Category::Io => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Stage => "stage",
            Category::Io => "io",
        }
    }
}

struct Failure {
    category: Category,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            category: Category::of(&e),
            message: e.to_string(),
        }
    }
}

fn io_failure(message: String) -> Failure {
    Failure {
        category: Category::Io,
        message,
    }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Removes the lock file when dropped.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_failure(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(io_failure(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io_failure(format!("cannot lock {}: {e}", dir.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn keys_help() -> String {
    let defaults = RunConfig::default().entries();
    let mut out = String::from("Config keys (default in brackets):\n");
    for ((key, doc), (_, value)) in KEY_DOCS.iter().zip(defaults) {
        out += &format!("  {key:<26} {doc} [{value}]\n");
    }
    out
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let base = match (&common.config, &common.profile) {
        (Some(path), _) => match shipped_profile(path) {
            Some(name) => RunConfig::profile(name)?,
            None => RunConfig::load(path)?,
        },
        (None, Some(name)) => RunConfig::profile(name)?,
        (None, None) => RunConfig::default(),
    };
    let cfg = base.with_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// A bare `chexpert-style.cfg` or `covid-style.cfg` that does not exist on
/// disk names the shipped profile.
fn shipped_profile(path: &Path) -> Option<&'static str> {
    if path.exists() || path.parent().is_some_and(|p| !p.as_os_str().is_empty()) {
        return None;
    }
    match path.to_str()? {
        "chexpert-style.cfg" => Some("chexpert-style"),
        "covid-style.cfg" => Some("covid-style"),
        _ => None,
    }
}

/// Like [`load_config`], but with no training manifest configured the
/// dataset written by `synth-data` under the output root is used.
fn load_data_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = load_config(common)?;
    if cfg.train_manifest.is_empty() {
        let data = output_root().join("data");
        let train = data.join("train.csv");
        if train.exists() {
            cfg.train_manifest = train.display().to_string();
            let validation = data.join("validation.csv");
            if cfg.validation_manifest.is_empty() && validation.exists() {
                cfg.validation_manifest = validation.display().to_string();
            }
        }
    }
    Ok(cfg)
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn output_dir(common: &Common, default_sub: &str) -> PathBuf {
    common
        .output_dir
        .clone()
        .unwrap_or_else(|| output_root().join(default_sub))
}

/// Refuses to continue if any of `files` already exists, unless forced.
fn guard_outputs(dir: &Path, files: &[&str], force: bool) -> CliResult {
    if force {
        return Ok(());
    }
    let existing: Vec<&str> = files.iter().copied().filter(|f| dir.join(f).exists()).collect();
    if existing.is_empty() {
        Ok(())
    } else {
        Err(io_failure(format!(
            "{} already holds {}; pass --force to overwrite",
            dir.display(),
            existing.join(", ")
        )))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| io_failure(format!("cannot write {}: {e}", path.display())))
}

fn snapshot(dir: &Path, name: &str, cfg: &RunConfig) -> CliResult {
    write_text(&dir.join(name), &cfg.serialize())
}

fn synth_data(common: &Common) -> CliResult {
    let cfg = load_config(common)?;
    let dir = output_dir(common, "data");
    let _lock = DirLock::acquire(&dir)?;
    guard_outputs(&dir, &["manifest.csv", "train.csv", "validation.csv"], common.force)?;
    let spec = SynthSpec {
        n_samples: cfg.synth_samples,
        class_count: cfg.class_count,
        image_size: cfg.image_size,
        rule_seed: cfg.synth_rule_seed,
        noise: cfg.synth_noise,
    };
    let split = synthesize_named(&spec, &cfg.class_names(), &dir)?;
    let mut snap = cfg.clone();
    snap.train_manifest = dir.join("train.csv").display().to_string();
    snap.validation_manifest = dir.join("validation.csv").display().to_string();
    snapshot(&dir, SNAPSHOT_FILE, &snap)?;
    println!(
        "wrote {} training and {} validation samples to {}",
        split.train().len(),
        split.validation().len(),
        dir.display()
    );
    Ok(())
}

fn stage_command(
    common: &Common,
    name: &str,
    outputs: &[&str],
    run: impl FnOnce(&Workspace) -> kdcascade::Result<()> + Send,
) -> CliResult {
    let cfg = load_data_config(common)?;
    let dir = output_dir(common, "pipeline");
    let _lock = DirLock::acquire(&dir)?;
    guard_outputs(&dir, outputs, common.force)?;
    snapshot(&dir, &format!("{name}.snapshot.cfg"), &cfg)?;
    with_threads(cfg.threads, || {
        let ws = Workspace::open(&cfg, &dir)?;
        run(&ws)
    })?;
    println!("{name}: done ({})", dir.display());
    Ok(())
}

fn run_pipeline(common: &Common, resume: bool) -> CliResult {
    let cfg = load_data_config(common)?;
    let dir = output_dir(common, "pipeline");
    let _lock = DirLock::acquire(&dir)?;
    if !resume {
        guard_outputs(&dir, &PIPELINE_ARTIFACTS, common.force)?;
    }
    let outcome = with_threads(cfg.threads, || Workspace::open(&cfg, &dir)?.run(resume))?;
    for (stage, status) in &outcome.stages {
        println!("{stage:<16} {status:?}");
    }
    let m = &outcome.metrics;
    println!(
        "micro-F1 teacher {:.4}  assistant {:.4}  student {:.4}",
        m.teacher.micro.f1, m.assistant.micro.f1, m.student.micro.f1
    );
    Ok(())
}

fn evaluate(common: &Common, checkpoint: Option<&Path>) -> CliResult {
    let cfg = load_data_config(common)?;
    let dir = output_dir(common, "pipeline");
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(STUDENT_CHECKPOINT));
    let stem = ckpt
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    let json_name = format!("eval.{stem}.json");
    let text_name = format!("eval.{stem}.txt");
    let _lock = DirLock::acquire(&dir)?;
    guard_outputs(&dir, &[&json_name, &text_name], common.force)?;
    snapshot(&dir, "evaluate.snapshot.cfg", &cfg)?;
    let report = with_threads(cfg.threads, || Workspace::open(&cfg, &dir)?.evaluate_checkpoint(&ckpt))?;
    write_text(&dir.join(&json_name), &report.to_json())?;
    write_text(&dir.join(&text_name), &report.to_table())?;
    print!("{}", report.to_table());
    Ok(())
}

fn ablate(common: &Common) -> CliResult {
    let cfg = load_data_config(common)?;
    let dir = output_dir(common, "ablation");
    let _lock = DirLock::acquire(&dir)?;
    guard_outputs(
        &dir,
        &[SNAPSHOT_FILE, "ablation.txt", "ablation.csv", "ablation.jsonl"],
        common.force,
    )?;
    let report = run_ablation(&cfg, Some(&dir))?;
    print!(
        "{}",
        kdcascade::metrics::render_report(&report, kdcascade::metrics::ReportFormat::TextTable)
    );
    Ok(())
}

fn dispatch(command: &Command) -> CliResult {
    match command {
        Command::SynthData(c) => synth_data(c),
        Command::TrainTeacher(c) => stage_command(c, "train-teacher", &[TEACHER_CHECKPOINT, TEACHER_REPORT], |ws| {
            ws.train_teacher(false).map(drop)
        }),
        Command::ExportRecords { common, learner } => {
            let (role, file) = match learner {
                Learner::Assistant => (Role::Assistant, TEACHER_RECORDS),
                Learner::Student => (Role::Student, STUDENT_RECORDS),
            };
            stage_command(common, "export-records", &[file], |ws| {
                ws.export_records(role, false).map(drop)
            })
        }
        Command::DistillAssistant(c) => stage_command(
            c,
            "distill-assistant",
            &[ASSISTANT_CHECKPOINT, ASSISTANT_REPORT],
            |ws| ws.train_learner(Role::Assistant, false).map(drop),
        ),
        Command::DistillStudent(c) => {
            stage_command(c, "distill-student", &[STUDENT_CHECKPOINT, STUDENT_REPORT], |ws| {
                ws.train_learner(Role::Student, false).map(drop)
            })
        }
        Command::RunPipeline { common, resume } => run_pipeline(common, *resume),
        Command::Evaluate { common, checkpoint } => evaluate(common, checkpoint.as_deref()),
        Command::Ablate(c) => ablate(c),
    }
}

fn main() -> ExitCode {
    let keys = keys_help();
    let cmd = Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|s| s.after_help(keys.clone()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let first_line = f.message.lines().next().unwrap_or_default().to_string();
            eprintln!("error[{}]: {first_line}", f.category.name());
            ExitCode::from(f.category.code())
        }
    }
}
