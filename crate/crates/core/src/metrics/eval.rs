use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ensemble_probabilities, Checkpoint};
use crate::nn::{map_indexed, Execution};
use crate::types::{ImageBatch, LabelVector};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Counts and ratios for one class. Ratios with a zero denominator are 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub sample_count: usize,
    pub classes: Vec<ClassMetrics>,
    /// Ratios over counts pooled across classes.
    pub micro: Aggregate,
    /// Unweighted mean of per-class ratios.
    #[serde(rename = "macro")]
    pub macro_avg: Aggregate,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 from raw counts. F1 uses `2tp / (2tp + fp + fn)`.
pub fn ratios(tp: u64, fp: u64, fn_: u64) -> Aggregate {
    Aggregate {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )))
    }
}

/// Binarizes `probabilities` at `threshold` (positive when `p >= threshold`)
/// and tallies them against `labels`. Entries whose mask is 0 are skipped.
pub fn score_predictions(
    probabilities: &[Vec<f64>],
    labels: &[LabelVector],
    masks: &[Vec<u8>],
    threshold: f64,
    class_names: &[String],
) -> Result<EvalReport> {
    check_threshold(threshold)?;
    if probabilities.is_empty() {
        return Err(Error::EmptySplit);
    }
    if labels.len() != probabilities.len() || masks.len() != probabilities.len() {
        return Err(Error::dim(
            "evaluation labels",
            probabilities.len(),
            labels.len().min(masks.len()),
        ));
    }
    let c = class_names.len();
    let mut counts = vec![[0u64; 4]; c];
    for ((p, y), m) in probabilities.iter().zip(labels).zip(masks) {
        if p.len() != c || y.len() != c || m.len() != c {
            return Err(Error::dim("evaluated sample", c, p.len()));
        }
        for k in 0..c {
            if m[k] == 0 {
                continue;
            }
            if p[k].is_nan() {
                return Err(Error::NonFinite("predicted probability".into()));
            }
            let slot = match (p[k] >= threshold, y.is_positive(k)) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            counts[k][slot] += 1;
        }
    }
    let classes: Vec<ClassMetrics> = counts
        .iter()
        .zip(class_names)
        .map(|(&[tp, fp, fn_, tn], name)| {
            let r = ratios(tp, fp, fn_);
            ClassMetrics {
                name: name.clone(),
                tp,
                fp,
                fn_,
                tn,
                precision: r.precision,
                recall: r.recall,
                f1: r.f1,
            }
        })
        .collect();
    let sum = |f: fn(&ClassMetrics) -> u64| classes.iter().map(f).sum::<u64>();
    let micro = ratios(sum(|m| m.tp), sum(|m| m.fp), sum(|m| m.fn_));
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().map(f).sum::<f64>() / classes.len() as f64
        }
    };
    let macro_avg = Aggregate {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    Ok(EvalReport {
        threshold,
        sample_count: probabilities.len(),
        classes,
        micro,
        macro_avg,
    })
}

/// Per-class sigmoid probabilities of a checkpoint; ensembles average their
/// members' probabilities.
pub fn predict_probabilities(checkpoint: &Checkpoint, images: &ImageBatch, exec: Execution) -> Result<Vec<Vec<f64>>> {
    if checkpoint.members.is_empty() {
        return Err(Error::Parameter("checkpoint has no members".into()));
    }
    map_indexed(images.len(), exec, |i| {
        let logits = checkpoint
            .members
            .iter()
            .map(|m| Ok(m.forward(images.sample(i), images.shape())?.logits_f64()))
            .collect::<Result<Vec<_>>>()?;
        ensemble_probabilities(&logits)
    })
    .into_iter()
    .collect()
}

/// Scores `checkpoint` on a loaded validation batch.
pub fn evaluate(
    checkpoint: &Checkpoint,
    images: &ImageBatch,
    labels: &[LabelVector],
    masks: &[Vec<u8>],
    threshold: f64,
    class_names: &[String],
) -> Result<EvalReport> {
    check_threshold(threshold)?;
    if images.is_empty() {
        return Err(Error::EmptySplit);
    }
    let probs = predict_probabilities(checkpoint, images, Execution::preferred())?;
    score_predictions(&probs, labels, masks, threshold, class_names)
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table of per-class and aggregate rows.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9}\n",
            "class", "tp", "fp", "fn", "tn", "precision", "recall", "f1"
        );
        for m in &self.classes {
            out += &format!(
                "{:<16} {:>6} {:>6} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4}\n",
                m.name, m.tp, m.fp, m.fn_, m.tn, m.precision, m.recall, m.f1
            );
        }
        for (name, a) in [("micro", self.micro), ("macro", self.macro_avg)] {
            out += &format!(
                "{:<16} {:>6} {:>6} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4}\n",
                name, "", "", "", "", a.precision, a.recall, a.f1
            );
        }
        out += &format!(
            "samples: {}  threshold: {}\n{}\n",
            self.sample_count, self.threshold, ZERO_DENOMINATOR_NOTE
        );
        out
    }
}

pub const ZERO_DENOMINATOR_NOTE: &str = "note: precision, recall and f1 are reported as 0 when their denominator is 0";

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[u8]) -> LabelVector {
        LabelVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counts() {
        let probs = vec![vec![0.9], vec![0.8], vec![0.7], vec![0.1], vec![0.2]];
        let labels = vec![lv(&[1]), lv(&[1]), lv(&[0]), lv(&[1]), lv(&[0])];
        let masks = vec![vec![1]; 5];
        let r = score_predictions(&probs, &labels, &masks, 0.5, &["a".into()]).unwrap();
        assert_eq!(
            (r.classes[0].tp, r.classes[0].fp, r.classes[0].fn_, r.classes[0].tn),
            (2, 1, 1, 1)
        );
        assert_eq!(r.micro.precision, 2.0 / 3.0);
        assert_eq!(r.micro.recall, 2.0 / 3.0);
        assert_eq!(r.micro.f1, 2.0 / 3.0);
    }

    #[test]
    fn all_negative_predictions() {
        let probs = vec![vec![0.1, 0.2]];
        let r = score_predictions(&probs, &[lv(&[1, 0])], &[vec![1, 1]], 0.5, &["a".into(), "b".into()]).unwrap();
        assert_eq!(
            r.micro,
            Aggregate {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0
            }
        );
    }

    #[test]
    fn masked_entries_are_not_counted() {
        let probs = vec![vec![0.9, 0.9]];
        let r = score_predictions(&probs, &[lv(&[0, 1])], &[vec![0, 1]], 0.5, &["a".into(), "b".into()]).unwrap();
        assert_eq!(r.classes[0].fp, 0);
        assert_eq!(r.micro.f1, 1.0);
    }

    #[test]
    fn threshold_must_be_open_interval() {
        assert!(score_predictions(&[vec![0.5]], &[lv(&[1])], &[vec![1]], 1.0, &["a".into()]).is_err());
        assert!(matches!(
            score_predictions(&[], &[], &[], 0.5, &["a".into()]),
            Err(Error::EmptySplit)
        ));
    }
}
