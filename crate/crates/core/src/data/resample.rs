use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::split::{DatasetSplit, Sample};
use crate::config::SamplingMode;
use crate::error::{Error, Result};
use crate::rng::child_rng;

/// How to rebalance the training list of a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub mode: SamplingMode,
    pub target_ratio: f64,
    pub seed: u64,
}

impl SamplingPolicy {
    pub fn none() -> Self {
        SamplingPolicy {
            mode: SamplingMode::None,
            target_ratio: 1.0,
            seed: 0,
        }
    }
}

/// Name of the group holding samples without any positive label.
pub const NO_FINDING: &str = "no_finding";

/// Each training sample belongs to exactly one group: the first class it is
/// positive for, or the no-finding group. Returns indices per group, the
/// no-finding group last.
pub fn sampling_groups(samples: &[Sample], class_count: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); class_count + 1];
    for (i, s) in samples.iter().enumerate() {
        let g = s.labels.values().iter().position(|&l| l == 1).unwrap_or(class_count);
        groups[g].push(i);
    }
    groups
}

/// Per-group target counts for group sizes `sizes` (empty groups are left
/// at zero). The largest group is the majority; every other group is
/// brought to `round(ratio * majority_target)`. Undersampling picks the
/// largest majority target that removes no minority sample, oversampling
/// the smallest one that removes nothing at all.
pub fn target_counts(sizes: &[usize], mode: SamplingMode, ratio: f64) -> Vec<usize> {
    let live: Vec<usize> = (0..sizes.len()).filter(|&g| sizes[g] > 0).collect();
    if live.is_empty() || mode == SamplingMode::None {
        return sizes.to_vec();
    }
    let majority = live
        .iter()
        .copied()
        .fold(live[0], |m, g| if sizes[g] > sizes[m] { g } else { m });
    let n_major = sizes[majority];
    let a = match mode {
        SamplingMode::None => unreachable!(),
        SamplingMode::UndersampleMajority => live
            .iter()
            .filter(|&&g| g != majority)
            .map(|&g| (sizes[g] as f64 / ratio).floor() as usize)
            .fold(n_major, usize::min),
        SamplingMode::OversampleMinority => live
            .iter()
            .filter(|&&g| g != majority)
            .map(|&g| (sizes[g] as f64 / ratio).ceil() as usize)
            .fold(n_major, usize::max),
        SamplingMode::Both => {
            let total: usize = live.iter().map(|&g| sizes[g]).sum();
            let denom = 1.0 + ratio * (live.len() - 1) as f64;
            (total as f64 / denom).round() as usize
        }
    };
    let a = a.max(1);
    let minority = ((ratio * a as f64).round() as usize).max(1);
    (0..sizes.len())
        .map(|g| match () {
            _ if sizes[g] == 0 => 0,
            _ if g == majority => a,
            _ => minority,
        })
        .collect()
}

/// Rebalances the training samples of `split`. Validation is untouched.
/// Undersampling draws without replacement; oversampling keeps every
/// original and adds duplicates drawn with replacement.
pub fn resample(split: &DatasetSplit, policy: &SamplingPolicy) -> Result<DatasetSplit> {
    if policy.mode == SamplingMode::None {
        return Ok(split.clone());
    }
    if !(policy.target_ratio.is_finite() && policy.target_ratio > 0.0) {
        return Err(Error::Parameter(format!(
            "target ratio must be positive, got {}",
            policy.target_ratio
        )));
    }
    let c = split.class_count();
    for (k, &count) in split.class_prevalence().iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass(split.class_names()[k].clone()));
        }
    }
    let train = split.train();
    let groups = sampling_groups(train, c);
    if groups.iter().filter(|g| !g.is_empty()).count() < 2 {
        return Err(Error::EmptyClass(NO_FINDING.into()));
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let targets = target_counts(&sizes, policy.mode, policy.target_ratio);

    let mut chosen: Vec<usize> = Vec::with_capacity(targets.iter().sum());
    for (g, members) in groups.iter().enumerate() {
        let mut rng = child_rng(policy.seed, g as u64);
        let want = targets[g];
        if want <= members.len() {
            let mut pool = members.clone();
            pool.shuffle(&mut rng);
            chosen.extend_from_slice(&pool[..want]);
        } else {
            chosen.extend_from_slice(members);
            for _ in members.len()..want {
                chosen.push(members[rng.random_range(0..members.len())]);
            }
        }
    }
    chosen.sort_unstable();
    split.with_train(chosen.into_iter().map(|i| train[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_mode_meets_in_the_middle() {
        assert_eq!(target_counts(&[10, 100], SamplingMode::Both, 1.0), vec![55, 55]);
    }

    #[test]
    fn undersample_keeps_minority() {
        assert_eq!(
            target_counts(&[10, 100], SamplingMode::UndersampleMajority, 1.0),
            vec![10, 10]
        );
        assert_eq!(
            target_counts(&[10, 100], SamplingMode::UndersampleMajority, 0.5),
            vec![10, 20]
        );
    }

    #[test]
    fn oversample_lifts_minority() {
        assert_eq!(
            target_counts(&[10, 100, 0], SamplingMode::OversampleMinority, 1.0),
            vec![100, 100, 0]
        );
        assert_eq!(
            target_counts(&[60, 100], SamplingMode::OversampleMinority, 0.5),
            vec![60, 120]
        );
    }
}
