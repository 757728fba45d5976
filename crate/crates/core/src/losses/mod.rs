//! Training objectives: multi-label BCE, temperature softening, feature-map
//! divergences and the composite assistant/student losses.
//!
//! Scalar losses are accumulated in `f64`. Every loss that the trainer
//! differentiates has an analytic gradient alongside it; reference
//! (teacher/assistant) inputs are treated as constants.

mod align;

pub use align::{
    adaptive_avg_pool, adaptive_avg_pool_backward, align_feature_maps, Alignment, ChannelProjection, DEFAULT_ALIGN_SIZE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    sigmoid, softmax, FeatureMap, LabelVector, PredictionVector, SoftLabelMode, SoftLabelVector, PROB_EPS,
};

/// Breakdown of a composite loss. `total` is the sum of the components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub hard_bce: f64,
    pub soft_bce: f64,
    pub kl_term: f64,
    pub wasserstein_term: f64,
}

impl LossValue {
    fn from_parts(hard_bce: f64, soft_bce: f64, kl_term: f64, wasserstein_term: f64) -> Self {
        LossValue {
            total: hard_bce + soft_bce + kl_term + wasserstein_term,
            hard_bce,
            soft_bce,
            kl_term,
            wasserstein_term,
        }
    }

    pub fn component_sum(&self) -> f64 {
        self.hard_bce + self.soft_bce + self.kl_term + self.wasserstein_term
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.hard_bce,
            self.soft_bce,
            self.kl_term,
            self.wasserstein_term,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &LossValue, scale: f64) {
        self.total += other.total * scale;
        self.hard_bce += other.hard_bce * scale;
        self.soft_bce += other.soft_bce * scale;
        self.kl_term += other.kl_term * scale;
        self.wasserstein_term += other.wasserstein_term * scale;
    }
}

fn bce_term(y: f64, p: f64) -> f64 {
    -(y * p.ln()) - (1.0 - y) * (1.0 - p).ln()
}

/// Sum over classes of binary cross-entropy between `targets` (hard or soft)
/// and the prediction's clamped probabilities.
pub fn bce_multilabel(targets: &[f64], predictions: &PredictionVector) -> Result<f64> {
    if targets.len() != predictions.len() {
        return Err(Error::dim("bce targets", predictions.len(), targets.len()));
    }
    Ok(targets
        .iter()
        .zip(predictions.probabilities())
        .map(|(&y, &p)| bce_term(y, p))
        .sum())
}

/// Temperature-regulated softening of logits.
///
/// Softmax mode computes `exp(z_i / T) / sum_j exp(z_j / T)` after
/// subtracting the maximum; sigmoid mode computes `sigmoid(z_i / T)` per class.
pub fn temperature_soften(logits: &[f64], temperature: f64, mode: SoftLabelMode) -> Result<SoftLabelVector> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {temperature}")));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let values = soften_raw(logits, temperature, mode);
    SoftLabelVector::new(values, temperature, mode)
}

fn soften_raw(logits: &[f64], temperature: f64, mode: SoftLabelMode) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    match mode {
        SoftLabelMode::Softmax => softmax(&scaled),
        SoftLabelMode::PerClassSigmoid => scaled.into_iter().map(sigmoid).collect(),
    }
}

/// `D_KL(P || Q)` for two probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("kl divergence", p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|&v| v - lse).collect()
}

/// KL between the softmax distributions of two aligned, flattened maps,
/// with the gradient with respect to the learner values.
pub fn kl_softmax_with_grad(reference: &[f64], learner: &[f64]) -> (f64, Vec<f64>) {
    let log_p = log_softmax(reference);
    let log_q = log_softmax(learner);
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(learner.len());
    for (lp, lq) in log_p.iter().zip(&log_q) {
        let p = lp.exp();
        value += p * (lp - lq);
        grad.push(lq.exp() - p);
    }
    (value.max(0.0), grad)
}

fn check_maps(reference: &FeatureMap, learner: &FeatureMap) -> Result<()> {
    if reference.data().iter().chain(learner.data()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature map".into()));
    }
    Ok(())
}

/// KL divergence between softmax-normalised, aligned feature maps.
pub fn kl_feature_divergence(reference: &FeatureMap, learner: &FeatureMap, alignment: &Alignment) -> Result<f64> {
    check_maps(reference, learner)?;
    let (r, l) = align_feature_maps(reference, learner, alignment)?;
    Ok(kl_softmax_with_grad(&r, &l).0)
}

/// Per-channel 1D Wasserstein-p distance on aligned `(channels, n)` data,
/// averaged over channels, with the gradient with respect to the learner.
///
/// Sorting both samples gives the optimal coupling for equal-size 1D
/// empirical distributions.
pub fn wasserstein_channels_with_grad(reference: &[f64], learner: &[f64], channels: usize, p: u32) -> (f64, Vec<f64>) {
    let n = learner.len() / channels;
    let pf = f64::from(p);
    let mut grad = vec![0.0; learner.len()];
    let mut total = 0.0;
    let mut ref_idx: Vec<usize> = Vec::with_capacity(n);
    let mut learn_idx: Vec<usize> = Vec::with_capacity(n);
    for c in 0..channels {
        let a = &reference[c * n..(c + 1) * n];
        let b = &learner[c * n..(c + 1) * n];
        ref_idx.clear();
        ref_idx.extend(0..n);
        ref_idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]));
        learn_idx.clear();
        learn_idx.extend(0..n);
        learn_idx.sort_by(|&i, &j| b[i].total_cmp(&b[j]));

        let diffs: Vec<f64> = ref_idx.iter().zip(&learn_idx).map(|(&i, &j)| b[j] - a[i]).collect();
        let mean_pow = diffs.iter().map(|d| d.abs().powf(pf)).sum::<f64>() / n as f64;
        if mean_pow <= 0.0 {
            continue;
        }
        let w = mean_pow.powf(1.0 / pf);
        total += w;
        // d W_c / d b_(k) = M^(1/p - 1) |d_k|^(p - 1) sign(d_k) / n
        let outer = mean_pow.powf(1.0 / pf - 1.0) / n as f64;
        for (k, &j) in learn_idx.iter().enumerate() {
            let d = diffs[k];
            let mag = if p == 1 { 1.0 } else { d.abs().powf(pf - 1.0) };
            grad[c * n + j] = outer * mag * d.signum() / channels as f64;
        }
    }
    (total / channels as f64, grad)
}

/// Wasserstein-p distance between aligned feature maps.
pub fn wasserstein_feature_distance(
    reference: &FeatureMap,
    learner: &FeatureMap,
    p: u32,
    alignment: &Alignment,
) -> Result<f64> {
    if p < 1 {
        return Err(Error::Parameter("wasserstein p must be >= 1".into()));
    }
    check_maps(reference, learner)?;
    let (r, l) = align_feature_maps(reference, learner, alignment)?;
    Ok(wasserstein_channels_with_grad(&r, &l, learner.channels(), p).0)
}

/// Hard BCE + `lambda1` KL(f_T, f_A) + soft BCE against the teacher's labels.
pub fn assistant_loss(
    hard: &LabelVector,
    teacher_soft: &SoftLabelVector,
    pred: &PredictionVector,
    f_teacher: &FeatureMap,
    f_assistant: &FeatureMap,
    lambda1: f64,
    alignment: &Alignment,
) -> Result<LossValue> {
    check_lambda(lambda1)?;
    let hard_bce = bce_multilabel(&hard.as_targets(), pred)?;
    let soft_bce = bce_multilabel(teacher_soft.values(), pred)?;
    let kl = kl_feature_divergence(f_teacher, f_assistant, alignment)?;
    Ok(LossValue::from_parts(hard_bce, soft_bce, lambda1 * kl, 0.0))
}

/// Hard BCE + `lambda2` W_p(f_A, f_S) + soft BCE against the assistant's labels.
#[allow(clippy::too_many_arguments)]
pub fn student_loss(
    hard: &LabelVector,
    assistant_soft: &SoftLabelVector,
    pred: &PredictionVector,
    f_assistant: &FeatureMap,
    f_student: &FeatureMap,
    lambda2: f64,
    p: u32,
    alignment: &Alignment,
) -> Result<LossValue> {
    check_lambda(lambda2)?;
    let hard_bce = bce_multilabel(&hard.as_targets(), pred)?;
    let soft_bce = bce_multilabel(assistant_soft.values(), pred)?;
    let w = wasserstein_feature_distance(f_assistant, f_student, p, alignment)?;
    Ok(LossValue::from_parts(hard_bce, soft_bce, 0.0, lambda2 * w))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("lambda must be >= 0, got {lambda}")))
    }
}

/// Which divergence compares learner feature maps with the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureTerm {
    Kl,
    Wasserstein { p: u32 },
}

impl FeatureTerm {
    /// Value and gradient for one tap. `reference` is already aligned;
    /// `learner` is the raw tap with shape `shape`, pooled here.
    pub fn value_and_grad(
        &self,
        reference: &[f64],
        learner: &[f64],
        shape: (usize, usize, usize),
        align_size: usize,
    ) -> (f64, Vec<f64>) {
        let pooled = adaptive_avg_pool(learner, shape, align_size);
        let (value, grad_pooled) = match *self {
            FeatureTerm::Kl => kl_softmax_with_grad(reference, &pooled),
            FeatureTerm::Wasserstein { p } => wasserstein_channels_with_grad(reference, &pooled, shape.0, p),
        };
        (value, adaptive_avg_pool_backward(&grad_pooled, shape, align_size))
    }
}

/// Full per-sample objective used by the trainers.
///
/// Evaluates `hard BCE (masked) + soft BCE + lambda * mean_over_taps(feature term)`
/// and its gradient with respect to the logits and every learner tap.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillObjective {
    pub feature: FeatureTerm,
    pub lambda: f64,
    pub mode: SoftLabelMode,
    /// Temperature applied to the learner's logits inside the soft term.
    /// `None` compares soft targets with the plain sigmoid/softmax output.
    pub learner_temperature: Option<f64>,
    /// Multiplier on the soft term.
    pub soft_weight: f64,
    pub align_size: usize,
}

/// Targets for one sample.
pub struct SampleTargets<'a> {
    pub hard: &'a [f64],
    pub mask: Option<&'a [f32]>,
    pub soft: Option<&'a [f64]>,
    /// Aligned reference features, one per learner tap.
    pub references: &'a [Vec<f64>],
}

/// A learner tap for one sample: raw values plus shape.
pub struct TapInput<'a> {
    pub data: &'a [f32],
    pub shape: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub logits: Vec<f64>,
    pub taps: Vec<Vec<f64>>,
}

/// Hard-label BCE with optional mask, returning value and d/dlogits.
/// Probabilities are `sigmoid(z)`; clamped entries carry zero gradient.
pub fn masked_bce_with_grad(targets: &[f64], mask: Option<&[f32]>, logits: &[f64]) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for (i, (&y, &z)) in targets.iter().zip(logits).enumerate() {
        if mask.is_some_and(|m| m[i] == 0.0) {
            continue;
        }
        let raw = sigmoid(z);
        let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        value += bce_term(y, p);
        if raw == p {
            grad[i] = p - y;
        }
    }
    (value, grad)
}

/// BCE between soft targets and `soften(z / T)` in the given mode, with
/// d/dlogits. Clamped probabilities carry zero gradient.
pub fn soft_bce_with_grad(targets: &[f64], logits: &[f64], temperature: f64, mode: SoftLabelMode) -> (f64, Vec<f64>) {
    let raw = soften_raw(logits, temperature, mode);
    let mut value = 0.0;
    let mut d_prob = vec![0.0; logits.len()];
    for (i, (&y, &q_raw)) in targets.iter().zip(&raw).enumerate() {
        let q = q_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        value += bce_term(y, q);
        if q == q_raw {
            d_prob[i] = (q - y) / (q * (1.0 - q));
        }
    }
    let grad = match mode {
        SoftLabelMode::PerClassSigmoid => raw
            .iter()
            .zip(&d_prob)
            .zip(targets)
            .map(|((&q, &dp), &y)| if dp == 0.0 { 0.0 } else { (q - y) / temperature })
            .collect(),
        SoftLabelMode::Softmax => {
            let dot: f64 = d_prob.iter().zip(&raw).map(|(g, q)| g * q).sum();
            raw.iter()
                .zip(&d_prob)
                .map(|(&q, &g)| q * (g - dot) / temperature)
                .collect()
        }
    };
    (value, grad)
}

impl DistillObjective {
    /// Plain hard-label BCE training (no soft or feature terms).
    pub fn hard_only() -> Self {
        DistillObjective {
            feature: FeatureTerm::Kl,
            lambda: 0.0,
            mode: SoftLabelMode::PerClassSigmoid,
            learner_temperature: None,
            soft_weight: 1.0,
            align_size: DEFAULT_ALIGN_SIZE,
        }
    }

    pub fn evaluate(
        &self,
        logits: &[f64],
        targets: &SampleTargets<'_>,
        taps: &[TapInput<'_>],
    ) -> Result<(LossValue, LossGradient)> {
        let c = logits.len();
        if targets.hard.len() != c {
            return Err(Error::dim("hard targets", c, targets.hard.len()));
        }
        let (hard_bce, mut d_logits) = masked_bce_with_grad(targets.hard, targets.mask, logits);

        let mut soft_bce = 0.0;
        if let Some(soft) = targets.soft {
            if soft.len() != c {
                return Err(Error::dim("soft targets", c, soft.len()));
            }
            let t = self.learner_temperature.unwrap_or(1.0);
            let (v, g) = soft_bce_with_grad(soft, logits, t, self.mode);
            soft_bce = self.soft_weight * v;
            for (d, gi) in d_logits.iter_mut().zip(g) {
                *d += self.soft_weight * gi;
            }
        }

        let mut feature_value = 0.0;
        let mut tap_grads = Vec::with_capacity(taps.len());
        let active = self.lambda > 0.0 && !targets.references.is_empty();
        if active {
            if targets.references.len() != taps.len() {
                return Err(Error::dim("feature references", taps.len(), targets.references.len()));
            }
            let scale = self.lambda / taps.len() as f64;
            for (tap, reference) in taps.iter().zip(targets.references) {
                let expected = tap.shape.0 * self.align_size * self.align_size;
                if reference.len() != expected {
                    return Err(Error::dim("aligned reference", expected, reference.len()));
                }
                let learner: Vec<f64> = tap.data.iter().map(|&v| f64::from(v)).collect();
                let (v, g) = self
                    .feature
                    .value_and_grad(reference, &learner, tap.shape, self.align_size);
                feature_value += scale * v;
                tap_grads.push(g.into_iter().map(|x| x * scale).collect());
            }
        } else {
            tap_grads.extend(taps.iter().map(|t| vec![0.0; t.data.len()]));
        }

        let (kl_term, wasserstein_term) = match self.feature {
            FeatureTerm::Kl => (feature_value, 0.0),
            FeatureTerm::Wasserstein { .. } => (0.0, feature_value),
        };
        let value = LossValue::from_parts(hard_bce, soft_bce, kl_term, wasserstein_term);
        if !value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok((
            value,
            LossGradient {
                logits: d_logits,
                taps: tap_grads,
            },
        ))
    }
}
