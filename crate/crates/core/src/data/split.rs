use std::collections::HashSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::manifest::{RawLabel, SampleManifestRow};
use crate::config::LabelPolicy;
use crate::error::{Error, Result};
use crate::rng::child_rng;
use crate::types::LabelVector;

/// A resolved sample: hard labels plus a per-class loss mask
/// (1 = counted, 0 = ignored).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub labels: LabelVector,
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn mask_f32(&self) -> Vec<f32> {
        self.mask.iter().map(|&m| f32::from(m)).collect()
    }
}

/// Maps raw labels to hard labels and masks. Blank is always negative;
/// uncertain follows `policy`.
pub fn apply_label_policy(rows: &[SampleManifestRow], policy: LabelPolicy) -> Result<Vec<(LabelVector, Vec<u8>)>> {
    rows.iter()
        .map(|row| {
            let mut labels = Vec::with_capacity(row.raw_labels.len());
            let mut mask = Vec::with_capacity(row.raw_labels.len());
            for raw in &row.raw_labels {
                let (l, m) = match (raw, policy) {
                    (RawLabel::Positive, _) => (1, 1),
                    (RawLabel::Negative | RawLabel::Blank, _) => (0, 1),
                    (RawLabel::Uncertain, LabelPolicy::UZeros) => (0, 1),
                    (RawLabel::Uncertain, LabelPolicy::UOnes) => (1, 1),
                    (RawLabel::Uncertain, LabelPolicy::UIgnore) => (0, 0),
                };
                labels.push(l);
                mask.push(m);
            }
            Ok((LabelVector::new(labels)?, mask))
        })
        .collect()
}

pub fn resolve_samples(rows: &[SampleManifestRow], policy: LabelPolicy) -> Result<Vec<Sample>> {
    Ok(rows
        .iter()
        .zip(apply_label_policy(rows, policy)?)
        .map(|(row, (labels, mask))| Sample {
            sample_id: row.sample_id.clone(),
            image_path: row.image_path.clone(),
            labels,
            mask,
        })
        .collect())
}

/// Train and validation samples with their class metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    train: Vec<Sample>,
    validation: Vec<Sample>,
    class_names: Vec<String>,
    class_prevalence: Vec<usize>,
}

fn prevalence(samples: &[Sample], c: usize) -> Vec<usize> {
    let mut counts = vec![0; c];
    for s in samples {
        for (k, (&l, &m)) in s.labels.values().iter().zip(&s.mask).enumerate() {
            if l == 1 && m == 1 {
                counts[k] += 1;
            }
        }
    }
    counts
}

impl DatasetSplit {
    /// Validates disjointness and label widths, and counts prevalence over
    /// the training samples.
    pub fn new(train: Vec<Sample>, validation: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        let c = class_names.len();
        for s in train.iter().chain(&validation) {
            if s.labels.len() != c || s.mask.len() != c {
                return Err(Error::dim(format!("labels of `{}`", s.sample_id), c, s.labels.len()));
            }
        }
        let train_ids: HashSet<&str> = train.iter().map(|s| s.sample_id.as_str()).collect();
        if let Some(s) = validation.iter().find(|s| train_ids.contains(s.sample_id.as_str())) {
            return Err(Error::Parameter(format!(
                "sample `{}` is in both train and validation",
                s.sample_id
            )));
        }
        let class_prevalence = prevalence(&train, c);
        Ok(DatasetSplit {
            train,
            validation,
            class_names,
            class_prevalence,
        })
    }

    /// Seeded shuffle of `samples`, holding out `validation_fraction`.
    pub fn shuffled(
        samples: Vec<Sample>,
        class_names: Vec<String>,
        validation_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut child_rng(seed, 0x7370_6c74));
        let n_val = (samples.len() as f64 * validation_fraction).round() as usize;
        let mut val_idx: Vec<usize> = order[..n_val].to_vec();
        let mut train_idx: Vec<usize> = order[n_val..].to_vec();
        val_idx.sort_unstable();
        train_idx.sort_unstable();
        let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
        Self::new(pick(&train_idx), pick(&val_idx), class_names)
    }

    pub fn train(&self) -> &[Sample] {
        &self.train
    }

    pub fn validation(&self) -> &[Sample] {
        &self.validation
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_prevalence(&self) -> &[usize] {
        &self.class_prevalence
    }

    /// Same validation samples, new training list.
    pub fn with_train(&self, train: Vec<Sample>) -> Result<Self> {
        Self::new(train, self.validation.clone(), self.class_names.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(raw: Vec<RawLabel>) -> SampleManifestRow {
        SampleManifestRow {
            sample_id: "s".into(),
            image_path: "p".into(),
            raw_labels: raw,
        }
    }

    #[test]
    fn policies_on_mixed_row() {
        use RawLabel::*;
        let rows = vec![row(vec![Positive, Negative, Uncertain, Blank])];
        let z = apply_label_policy(&rows, LabelPolicy::UZeros).unwrap();
        let o = apply_label_policy(&rows, LabelPolicy::UOnes).unwrap();
        let i = apply_label_policy(&rows, LabelPolicy::UIgnore).unwrap();
        assert_eq!(
            (z[0].0.values(), z[0].1.as_slice()),
            (&[1, 0, 0, 0][..], &[1, 1, 1, 1][..])
        );
        assert_eq!(
            (o[0].0.values(), o[0].1.as_slice()),
            (&[1, 0, 1, 0][..], &[1, 1, 1, 1][..])
        );
        assert_eq!(
            (i[0].0.values(), i[0].1.as_slice()),
            (&[1, 0, 0, 0][..], &[1, 1, 0, 1][..])
        );
    }

    #[test]
    fn single_uncertain_label() {
        let rows = vec![row(vec![RawLabel::Uncertain])];
        let z = apply_label_policy(&rows, LabelPolicy::UZeros).unwrap();
        assert_eq!((z[0].0.values()[0], z[0].1[0]), (0, 1));
        let i = apply_label_policy(&rows, LabelPolicy::UIgnore).unwrap();
        assert_eq!(i[0].1[0], 0);
    }

    fn sample(id: &str, labels: Vec<u8>) -> Sample {
        let n = labels.len();
        Sample {
            sample_id: id.into(),
            image_path: format!("{id}.png").into(),
            labels: LabelVector::new(labels).unwrap(),
            mask: vec![1; n],
        }
    }

    #[test]
    fn shuffled_split_is_disjoint_and_counts_prevalence() {
        let samples: Vec<Sample> = (0..50)
            .map(|i| sample(&format!("s{i}"), vec![(i % 2) as u8, (i % 5 == 0) as u8]))
            .collect();
        let split = DatasetSplit::shuffled(samples, vec!["a".into(), "b".into()], 0.2, 3).unwrap();
        assert_eq!(split.validation().len(), 10);
        assert_eq!(split.train().len(), 40);
        let recount: Vec<usize> = (0..2)
            .map(|k| split.train().iter().filter(|s| s.labels.values()[k] == 1).count())
            .collect();
        assert_eq!(split.class_prevalence(), recount.as_slice());
    }

    #[test]
    fn overlapping_ids_rejected() {
        let a = sample("x", vec![1]);
        assert!(DatasetSplit::new(vec![a.clone()], vec![a], vec!["c".into()]).is_err());
    }
}
