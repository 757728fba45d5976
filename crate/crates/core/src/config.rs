//! Run configuration and its flat `key = value` text format.
//!
//! One `key = value` pair per line. Blank lines and lines whose first
//! non-blank character is `#` are ignored. Keys are case-sensitive; an
//! unknown or repeated key is an error. Lists are comma-separated.
//! Serialising and re-parsing a config yields an identical value.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::FeatureTerm;
use crate::models::sha256_hex;
use crate::types::SoftLabelMode;

/// Optimiser and schedule settings for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHparams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "`{other}` is not one of: {}",
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

string_enum!(
    /// Treatment of uncertain (`-1`) manifest labels.
    LabelPolicy { UZeros => "u_zeros", UOnes => "u_ones", UIgnore => "u_ignore" }
);

string_enum!(
    /// Class-imbalance resampling applied to the training split.
    SamplingMode {
        None => "none",
        UndersampleMajority => "undersample_majority",
        OversampleMinority => "oversample_minority",
        Both => "both",
    }
);

string_enum!(
    /// Which network's feature maps the student is matched against.
    FeatureReference { Assistant => "assistant", Teacher => "teacher" }
);

string_enum!(
    /// Offline uses pooled references stored at export time; online
    /// recomputes the reference network's taps for every batch.
    FeatureMatching { Offline => "offline", Online => "online" }
);

string_enum!(
    /// Multiplier on the soft-label term: 1, or T squared so that its
    /// gradient keeps the same scale as the temperature grows.
    SoftScaling { One => "one", TemperatureSquared => "t_squared" }
);

string_enum!(
    /// What to do when a sample's image cannot be read during export.
    MissingImage { Abort => "abort", Skip => "skip" }
);

/// Full description of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub class_count: usize,
    /// Manifest column names, in class-index order. Empty means
    /// `class_0 .. class_{C-1}`.
    pub class_names: Vec<String>,
    pub temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub wasserstein_p: u32,
    pub soft_label_mode: SoftLabelMode,
    /// Apply the temperature to the learner's logits inside the soft term.
    pub learner_temperature: bool,
    pub soft_scaling: SoftScaling,
    pub feature_reference: FeatureReference,
    pub feature_matching: FeatureMatching,
    pub align_size: usize,
    pub teacher: StageHparams,
    pub assistant: StageHparams,
    pub student: StageHparams,
    pub teacher_backbones: Vec<String>,
    pub assistant_backbone: String,
    pub student_backbone: String,
    pub seed: u64,
    pub ablation_seeds: Vec<u64>,
    pub threshold: f64,
    pub label_policy: LabelPolicy,
    pub sampling_policy: SamplingMode,
    pub sampling_ratio: f64,
    pub image_size: usize,
    pub validation_fraction: f64,
    /// Training manifest; empty when no dataset is configured.
    pub train_manifest: String,
    /// Separate validation manifest; empty means split the training
    /// manifest by seeded shuffle.
    pub validation_manifest: String,
    pub missing_image: MissingImage,
    /// Worker threads for batch computation (0 = all cores).
    pub threads: usize,
    pub synth_samples: usize,
    pub synth_rule_seed: u64,
    pub synth_noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stage = |epochs: usize, batch_size: usize| StageHparams {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            epochs,
            batch_size,
        };
        RunConfig {
            class_count: 3,
            class_names: Vec::new(),
            temperature: 20.0,
            lambda1: 1.0,
            lambda2: 1.0,
            wasserstein_p: 2,
            soft_label_mode: SoftLabelMode::PerClassSigmoid,
            learner_temperature: true,
            soft_scaling: SoftScaling::One,
            feature_reference: FeatureReference::Assistant,
            feature_matching: FeatureMatching::Offline,
            align_size: 4,
            teacher: stage(6, 8),
            assistant: stage(10, 8),
            student: stage(5, 4),
            teacher_backbones: vec!["tiny-b6".into(), "tiny-b7".into()],
            assistant_backbone: "tiny-densenet".into(),
            student_backbone: "student".into(),
            seed: 0,
            ablation_seeds: vec![0, 1, 2],
            threshold: 0.5,
            label_policy: LabelPolicy::UZeros,
            sampling_policy: SamplingMode::None,
            sampling_ratio: 1.0,
            image_size: 32,
            validation_fraction: 0.2,
            train_manifest: String::new(),
            validation_manifest: String::new(),
            missing_image: MissingImage::Abort,
            threads: 0,
            synth_samples: 300,
            synth_rule_seed: 7,
            synth_noise: 0.25,
        }
    }
}

/// Every recognised key with a one-line description, in file order.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("class_count", "number of classes C"),
    (
        "class_names",
        "comma-separated manifest label columns (empty: class_0..)",
    ),
    ("temperature", "softening temperature T (> 0)"),
    ("lambda1", "weight of the assistant's KL feature term (>= 0)"),
    ("lambda2", "weight of the student's Wasserstein feature term (>= 0)"),
    ("wasserstein_p", "order p of the Wasserstein distance (>= 1)"),
    ("soft_label_mode", "per-class-sigmoid | softmax"),
    (
        "learner_temperature",
        "apply T to learner logits in the soft term (true | false)",
    ),
    ("soft_scaling", "soft-term multiplier: one | t_squared"),
    ("feature_reference", "student feature reference: assistant | teacher"),
    ("feature_matching", "offline (stored pooled refs) | online (recompute)"),
    ("align_size", "pooled grid size used to align feature maps"),
    ("teacher.learning_rate", "teacher Adam learning rate"),
    ("teacher.weight_decay", "teacher weight decay"),
    (
        "teacher.epochs",
        "teacher epochs (not stated by the method; desk default)",
    ),
    (
        "teacher.batch_size",
        "teacher batch size (not stated by the method; desk default)",
    ),
    ("assistant.learning_rate", "assistant Adam learning rate"),
    ("assistant.weight_decay", "assistant weight decay"),
    (
        "assistant.epochs",
        "assistant epochs (not stated by the method; desk default)",
    ),
    (
        "assistant.batch_size",
        "assistant batch size (not stated by the method; desk default)",
    ),
    ("student.learning_rate", "student Adam learning rate"),
    ("student.weight_decay", "student weight decay"),
    (
        "student.epochs",
        "student epochs (not stated by the method; desk default)",
    ),
    (
        "student.batch_size",
        "student batch size (not stated by the method; desk default)",
    ),
    ("teacher_backbones", "comma-separated teacher ensemble members"),
    ("assistant_backbone", "assistant backbone name"),
    ("student_backbone", "student backbone name"),
    ("seed", "master seed"),
    ("ablation_seeds", "comma-separated seeds for the ablation table"),
    ("threshold", "probability threshold for precision/recall/F1, in (0, 1)"),
    ("label_policy", "uncertain label handling: u_zeros | u_ones | u_ignore"),
    (
        "sampling_policy",
        "none | undersample_majority | oversample_minority | both",
    ),
    (
        "sampling_ratio",
        "target minority/majority ratio after resampling (> 0)",
    ),
    ("image_size", "square input size in pixels"),
    (
        "validation_fraction",
        "held-out fraction when no validation manifest is given",
    ),
    ("train_manifest", "training manifest CSV path"),
    ("validation_manifest", "optional validation manifest CSV path"),
    ("missing_image", "record export on unreadable image: abort | skip"),
    ("threads", "worker threads for batch computation (0 = all cores)"),
    ("synth.samples", "synthetic dataset size"),
    ("synth.rule_seed", "synthetic dataset generator seed"),
    (
        "synth.noise",
        "synthetic pixel noise sd, as a fraction of the motif contrast",
    ),
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    if value.is_empty() {
        return Vec::new();
    }
    value.split(',').map(|s| s.trim().to_string()).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn with_key<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) if !m.starts_with(key) => Error::Config(format!("{key}: {m}")),
        Error::Parameter(m) => Error::Config(format!("{key}: {m}")),
        other => other,
    })
}

impl RunConfig {
    fn stage_mut(&mut self, name: &str) -> Option<&mut StageHparams> {
        match name {
            "teacher" => Some(&mut self.teacher),
            "assistant" => Some(&mut self.assistant),
            "student" => Some(&mut self.student),
            _ => None,
        }
    }

    /// Sets one key from its textual value (no cross-field validation).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if let Some((stage, field)) = key.split_once('.') {
            if let Some(h) = self.stage_mut(stage) {
                match field {
                    "learning_rate" => h.learning_rate = parse_num(key, v)?,
                    "weight_decay" => h.weight_decay = parse_num(key, v)?,
                    "epochs" => h.epochs = parse_num(key, v)?,
                    "batch_size" => h.batch_size = parse_num(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
                return Ok(());
            }
        }
        match key {
            "class_count" => self.class_count = parse_num(key, v)?,
            "class_names" => self.class_names = parse_list(v),
            "temperature" => self.temperature = parse_num(key, v)?,
            "lambda1" => self.lambda1 = parse_num(key, v)?,
            "lambda2" => self.lambda2 = parse_num(key, v)?,
            "wasserstein_p" => self.wasserstein_p = parse_num(key, v)?,
            "soft_label_mode" => self.soft_label_mode = with_key(key, v.parse())?,
            "learner_temperature" => self.learner_temperature = parse_bool(key, v)?,
            "soft_scaling" => self.soft_scaling = with_key(key, v.parse())?,
            "feature_reference" => self.feature_reference = with_key(key, v.parse())?,
            "feature_matching" => self.feature_matching = with_key(key, v.parse())?,
            "align_size" => self.align_size = parse_num(key, v)?,
            "teacher_backbones" => self.teacher_backbones = parse_list(v),
            "assistant_backbone" => self.assistant_backbone = v.to_string(),
            "student_backbone" => self.student_backbone = v.to_string(),
            "seed" => self.seed = parse_num(key, v)?,
            "ablation_seeds" => {
                self.ablation_seeds = parse_list(v).iter().map(|s| parse_num(key, s)).collect::<Result<_>>()?
            }
            "threshold" => self.threshold = parse_num(key, v)?,
            "label_policy" => self.label_policy = with_key(key, v.parse())?,
            "sampling_policy" => self.sampling_policy = with_key(key, v.parse())?,
            "sampling_ratio" => self.sampling_ratio = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "validation_fraction" => self.validation_fraction = parse_num(key, v)?,
            "train_manifest" => self.train_manifest = v.to_string(),
            "validation_manifest" => self.validation_manifest = v.to_string(),
            "missing_image" => self.missing_image = with_key(key, v.parse())?,
            "threads" => self.threads = parse_num(key, v)?,
            "synth.samples" => self.synth_samples = parse_num(key, v)?,
            "synth.rule_seed" => self.synth_rule_seed = parse_num(key, v)?,
            "synth.noise" => self.synth_noise = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current textual value, in [`KEY_DOCS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let stage = |h: &StageHparams| {
            [
                h.learning_rate.to_string(),
                h.weight_decay.to_string(),
                h.epochs.to_string(),
                h.batch_size.to_string(),
            ]
        };
        let [tl, tw, te, tb] = stage(&self.teacher);
        let [al, aw, ae, ab] = stage(&self.assistant);
        let [sl, sw, se, sb] = stage(&self.student);
        let values = vec![
            self.class_count.to_string(),
            self.class_names.join(","),
            self.temperature.to_string(),
            self.lambda1.to_string(),
            self.lambda2.to_string(),
            self.wasserstein_p.to_string(),
            self.soft_label_mode.to_string(),
            self.learner_temperature.to_string(),
            self.soft_scaling.to_string(),
            self.feature_reference.to_string(),
            self.feature_matching.to_string(),
            self.align_size.to_string(),
            tl,
            tw,
            te,
            tb,
            al,
            aw,
            ae,
            ab,
            sl,
            sw,
            se,
            sb,
            self.teacher_backbones.join(","),
            self.assistant_backbone.clone(),
            self.student_backbone.clone(),
            self.seed.to_string(),
            join(&self.ablation_seeds),
            self.threshold.to_string(),
            self.label_policy.to_string(),
            self.sampling_policy.to_string(),
            self.sampling_ratio.to_string(),
            self.image_size.to_string(),
            self.validation_fraction.to_string(),
            self.train_manifest.clone(),
            self.validation_manifest.clone(),
            self.missing_image.to_string(),
            self.threads.to_string(),
            self.synth_samples.to_string(),
            self.synth_rule_seed.to_string(),
            self.synth_noise.to_string(),
        ];
        debug_assert_eq!(values.len(), KEY_DOCS.len());
        KEY_DOCS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parses a config file body on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key = value` lines onto `self` without validating.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides, then validates.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.class_count == 0 {
            return fail("class_count must be >= 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return fail(format!("temperature must be > 0, got {}", self.temperature));
        }
        for (k, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{k} must be >= 0, got {v}"));
            }
        }
        if self.wasserstein_p < 1 {
            return fail("wasserstein_p must be >= 1".into());
        }
        if self.align_size == 0 {
            return fail("align_size must be >= 1".into());
        }
        for (name, h) in [
            ("teacher", &self.teacher),
            ("assistant", &self.assistant),
            ("student", &self.student),
        ] {
            if !(h.learning_rate.is_finite() && h.learning_rate > 0.0) {
                return fail(format!("{name}.learning_rate must be > 0"));
            }
            if !(h.weight_decay.is_finite() && h.weight_decay >= 0.0) {
                return fail(format!("{name}.weight_decay must be >= 0"));
            }
            if h.batch_size == 0 {
                return fail(format!("{name}.batch_size must be >= 1"));
            }
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.class_count {
            return fail(format!(
                "class_names lists {} names but class_count is {}",
                self.class_names.len(),
                self.class_count
            ));
        }
        let bad_name = |s: &String| s.is_empty() || s.contains(',') || s.trim() != s;
        if self.class_names.iter().any(bad_name) {
            return fail("class names must be non-empty, without commas or surrounding spaces".into());
        }
        if self.teacher_backbones.is_empty() || self.teacher_backbones.iter().any(bad_name) {
            return fail("teacher_backbones must list at least one backbone".into());
        }
        if self.ablation_seeds.is_empty() {
            return fail("ablation_seeds must not be empty".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail(format!("threshold must be in (0, 1), got {}", self.threshold));
        }
        if !(self.sampling_ratio.is_finite() && self.sampling_ratio > 0.0) {
            return fail("sampling_ratio must be > 0".into());
        }
        if self.image_size == 0 {
            return fail("image_size must be >= 1".into());
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return fail("validation_fraction must be in [0, 1)".into());
        }
        if !(self.synth_noise.is_finite() && self.synth_noise >= 0.0) {
            return fail("synth.noise must be >= 0".into());
        }
        for (k, v) in [
            ("assistant_backbone", &self.assistant_backbone),
            ("student_backbone", &self.student_backbone),
            ("train_manifest", &self.train_manifest),
            ("validation_manifest", &self.validation_manifest),
        ] {
            if v.trim() != v {
                return fail(format!("{k} must not have surrounding spaces"));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        if self.class_names.is_empty() {
            (0..self.class_count).map(|i| format!("class_{i}")).collect()
        } else {
            self.class_names.clone()
        }
    }

    pub fn student_feature_term(&self) -> FeatureTerm {
        FeatureTerm::Wasserstein { p: self.wasserstein_p }
    }

    /// Hash of every setting that influences trained weights. Thread count
    /// and ablation/evaluation settings are excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.threads = 0;
        c.ablation_seeds = vec![0];
        c.threshold = 0.5;
        sha256_hex(c.serialize().as_bytes())
    }

    /// The two shipped profiles.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "chexpert-style" => Self::parse(CHEXPERT_STYLE),
            "covid-style" => Self::parse(COVID_STYLE),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

pub const CHEXPERT_STYLE: &str = include_str!("../profiles/chexpert-style.cfg");
pub const COVID_STYLE: &str = include_str!("../profiles/covid-style.cfg");
