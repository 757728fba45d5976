//! Value types shared across the crate.
//!
//! Every constructor validates its invariants, so a value that exists is
//! well-formed: finite, correctly sized, and inside its declared range.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Which network of the cascade produced a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Teacher,
    Assistant,
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Assistant => "assistant",
            Role::Student => "student",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Role::Teacher => 0,
            Role::Assistant => 1,
            Role::Student => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Role::Teacher),
            1 => Some(Role::Assistant),
            2 => Some(Role::Student),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "assistant" => Ok(Role::Assistant),
            "student" => Ok(Role::Student),
            other => Err(Error::Parameter(format!("unknown role `{other}`"))),
        }
    }
}

/// How logits become per-class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SoftLabelMode {
    /// One distribution over all classes.
    Softmax,
    /// Independent `sigmoid(z / T)` per class.
    PerClassSigmoid,
}

impl SoftLabelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SoftLabelMode::Softmax => "softmax",
            SoftLabelMode::PerClassSigmoid => "per-class-sigmoid",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            SoftLabelMode::Softmax => 0,
            SoftLabelMode::PerClassSigmoid => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SoftLabelMode::Softmax),
            1 => Some(SoftLabelMode::PerClassSigmoid),
            _ => None,
        }
    }
}

impl fmt::Display for SoftLabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SoftLabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(SoftLabelMode::Softmax),
            "per-class-sigmoid" | "sigmoid" => Ok(SoftLabelMode::PerClassSigmoid),
            other => Err(Error::Parameter(format!("unknown soft label mode `{other}`"))),
        }
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Hard per-class ground truth, every entry exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("label vector must not be empty".into()));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Parameter(format!("hard label {v} is not 0 or 1")));
        }
        Ok(LabelVector(values))
    }

    pub fn with_class_count(values: Vec<u8>, class_count: usize) -> Result<Self> {
        if values.len() != class_count {
            return Err(Error::dim("label vector", class_count, values.len()));
        }
        Self::new(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn is_positive(&self, class: usize) -> bool {
        self.0[class] == 1
    }

    pub fn as_targets(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Softened per-class targets produced at a temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelVector {
    values: Vec<f64>,
    temperature: f64,
    mode: SoftLabelMode,
}

impl SoftLabelVector {
    pub fn new(values: Vec<f64>, temperature: f64, mode: SoftLabelMode) -> Result<Self> {
        check_finite(&values, "soft label vector")?;
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if values.is_empty() {
            return Err(Error::Parameter("soft label vector must not be empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("soft label {v} outside [0, 1]")));
        }
        if mode == SoftLabelMode::Softmax {
            let sum: f64 = values.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Parameter(format!("softmax soft labels sum to {sum}, not 1")));
            }
        }
        Ok(SoftLabelVector {
            values,
            temperature,
            mode,
        })
    }

    /// Hard labels reinterpreted as (degenerate) soft labels at T = 1.
    pub fn from_hard(labels: &LabelVector, mode: SoftLabelMode) -> Result<Self> {
        Self::new(labels.as_targets(), 1.0, mode)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn mode(&self) -> SoftLabelMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// An activation tensor of shape (channels, height, width) tapped from a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    data: Vec<f32>,
    channels: usize,
    height: usize,
    width: usize,
    tap_name: String,
    producer: Role,
}

impl FeatureMap {
    pub fn new(
        data: Vec<f32>,
        shape: (usize, usize, usize),
        tap_name: impl Into<String>,
        producer: Role,
    ) -> Result<Self> {
        let (channels, height, width) = shape;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Parameter(format!(
                "feature map dimensions must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::dim("feature map", channels * height * width, data.len()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(FeatureMap {
            data,
            channels,
            height,
            width,
            tap_name: tap_name.into(),
            producer,
        })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tap_name(&self) -> &str {
        &self.tap_name
    }

    pub fn producer(&self) -> Role {
        self.producer
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Network outputs for one sample: raw logits plus the probabilities
/// derived from them, already clamped to `[PROB_EPS, 1 - PROB_EPS]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionVector {
    logits: Vec<f64>,
    probabilities: Vec<f64>,
    mode: SoftLabelMode,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl PredictionVector {
    /// Per-class sigmoid predictions, the multi-label default.
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        Self::with_mode(logits, SoftLabelMode::PerClassSigmoid)
    }

    pub fn with_mode(logits: Vec<f64>, mode: SoftLabelMode) -> Result<Self> {
        check_finite(&logits, "logits")?;
        if logits.is_empty() {
            return Err(Error::Parameter("prediction must have at least one class".into()));
        }
        let probabilities = match mode {
            SoftLabelMode::PerClassSigmoid => logits.iter().map(|&z| sigmoid(z)).collect(),
            SoftLabelMode::Softmax => softmax(&logits),
        };
        let probabilities = clamp_slice(&probabilities)?;
        Ok(PredictionVector {
            logits,
            probabilities,
            mode,
        })
    }

    /// Builds a prediction from probabilities directly; logits are the
    /// inverse sigmoid of the clamped probabilities.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Result<Self> {
        let probabilities = clamp_slice(&probabilities)?;
        let logits = probabilities.iter().map(|&p| (p / (1.0 - p)).ln()).collect();
        Ok(PredictionVector {
            logits,
            probabilities,
            mode: SoftLabelMode::PerClassSigmoid,
        })
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn mode(&self) -> SoftLabelMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

fn clamp_slice(p: &[f64]) -> Result<Vec<f64>> {
    if p.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("probabilities (NaN from upstream computation)".into()));
    }
    Ok(p.iter().map(|&v| v.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect())
}

/// Returns a copy with every probability clamped to `[1e-7, 1 - 1e-7]`.
/// Probabilities already inside the interval are returned untouched.
pub fn clamp_probabilities(p: &PredictionVector) -> Result<PredictionVector> {
    Ok(PredictionVector {
        logits: p.logits.clone(),
        probabilities: clamp_slice(&p.probabilities)?,
        mode: p.mode,
    })
}

/// Clamps a raw probability slice; NaN is rejected.
pub fn clamp_raw_probabilities(p: &[f64]) -> Result<Vec<f64>> {
    clamp_slice(p)
}


/// A batch of images stored sample-major as `(n, channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Vec<f32>,
    len: usize,
    channels: usize,
    height: usize,
    width: usize,
}

impl ImageBatch {
    pub fn new(data: Vec<f32>, len: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != len * channels * height * width {
            return Err(Error::dim("image batch", len * channels * height * width, data.len()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image batch".into()));
        }
        Ok(ImageBatch {
            data,
            len,
            channels,
            height,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.channels * self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Copies the listed samples into a new batch.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.height * self.width);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        ImageBatch {
            data,
            len: indices.len(),
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }
}
