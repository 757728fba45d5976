//! Mini-batch Adam training of one network against a per-sample objective.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LoadedBatch;
use crate::error::{Error, Result};
use crate::losses::{Alignment, DistillObjective, LossValue, SampleTargets, TapInput};
use crate::models::Network;
use crate::nn::{batch_gradients, map_indexed, Adam, Execution};
use crate::rng::child_rng;
use crate::types::{ImageBatch, Role};

/// Training inputs held in memory: images plus per-sample hard targets
/// and loss masks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub images: ImageBatch,
    pub targets: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f32>>,
    pub sample_ids: Vec<String>,
}

impl TrainingSet {
    pub fn from_batch(batch: &LoadedBatch) -> Self {
        TrainingSet {
            images: batch.images.clone(),
            targets: batch.labels.iter().map(|l| l.as_targets()).collect(),
            masks: batch
                .masks
                .iter()
                .map(|m| m.iter().map(|&v| f32::from(v)).collect())
                .collect(),
            sample_ids: batch.sample_ids.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Where a learner's feature references come from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    /// Aligned references per training sample, one vector per tap.
    Stored(Vec<Vec<Vec<f64>>>),
    /// Recomputed from the reference networks on every step.
    Online {
        members: Vec<Network>,
        alignment: Alignment,
    },
}

/// Soft targets and feature references aligned with a [`TrainingSet`].
#[derive(Debug, Clone)]
pub struct Guidance {
    pub soft: Vec<Vec<f64>>,
    pub features: FeatureSource,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSettings {
    pub stage: Role,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub shuffle_seed: u64,
    pub exec: Execution,
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: LossValue,
}

/// Averaged aligned references of `members` for one input, one vector per
/// learner tap. Member `m`'s tap `t` is projected to `learner_channels[t]`.
pub fn reference_features(
    members: &[Network],
    input: &[f32],
    shape: (usize, usize, usize),
    learner_channels: &[usize],
    alignment: &Alignment,
) -> Result<Vec<Vec<f64>>> {
    let plane = alignment.size * alignment.size;
    let mut acc: Vec<Vec<f64>> = learner_channels.iter().map(|&c| vec![0.0; c * plane]).collect();
    for (m, net) in members.iter().enumerate() {
        let trace = net.forward(input, shape)?;
        let taps = trace.taps();
        if taps.len() != learner_channels.len() {
            return Err(Error::dim(
                format!("taps of reference `{}`", net.spec().name),
                learner_channels.len(),
                taps.len(),
            ));
        }
        for (t, ((data, tap_shape), &to)) in taps.iter().zip(learner_channels).enumerate() {
            let aligned = alignment.align_reference(data, *tap_shape, to, m, t);
            for (a, v) in acc[t].iter_mut().zip(aligned) {
                *a += v;
            }
        }
    }
    let n = members.len() as f64;
    for tap in &mut acc {
        for v in tap.iter_mut() {
            *v /= n;
        }
    }
    Ok(acc)
}

/// Trains `net` in place and returns the mean loss of every epoch.
///
/// Each step sums per-sample gradients (scaled by 1/batch) with the
/// deterministic chunked reduction, then takes one Adam step. Epoch order
/// comes from `shuffle_seed`, so results do not depend on the thread count.
pub fn fit(
    net: &mut Network,
    objective: &DistillObjective,
    data: &TrainingSet,
    guidance: Option<&Guidance>,
    settings: &FitSettings,
) -> Result<Vec<EpochLoss>> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptySplit);
    }
    if settings.batch_size == 0 {
        return Err(Error::Parameter("batch size must be >= 1".into()));
    }
    if let Some(g) = guidance {
        if g.soft.len() != n {
            return Err(Error::dim("soft targets", n, g.soft.len()));
        }
        if let FeatureSource::Stored(f) = &g.features {
            if f.len() != n {
                return Err(Error::dim("feature references", n, f.len()));
            }
        }
    }
    let shape = data.images.shape();
    let learner_channels: Vec<usize> = net.tap_shapes(shape.1, shape.2).iter().map(|s| s.0).collect();
    let use_features = objective.lambda > 0.0 && guidance.is_some();
    let trainable = net.trainable_mask();
    let mut adam = Adam::new(
        net.param_len(),
        settings.learning_rate as f32,
        settings.weight_decay as f32,
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(settings.epochs);

    for epoch in 0..settings.epochs {
        order.shuffle(&mut child_rng(settings.shuffle_seed, epoch as u64));
        let mut epoch_loss = LossValue::default();
        for batch in order.chunks(settings.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let model = &*net;
            let (grads, losses) = batch_gradients(batch.len(), model.param_len(), settings.exec, |k, grad| {
                let i = batch[k];
                let input = data.images.sample(i);
                let online;
                let references: &[Vec<f64>] = match guidance.map(|g| &g.features) {
                    Some(FeatureSource::Stored(f)) if use_features => &f[i],
                    Some(FeatureSource::Online { members, alignment }) if use_features => {
                        online = reference_features(members, input, shape, &learner_channels, alignment)?;
                        &online
                    }
                    _ => &[],
                };
                let trace = model.forward(input, shape)?;
                let (loss, g) = {
                    let taps: Vec<TapInput<'_>> = trace
                        .taps()
                        .iter()
                        .map(|(d, s)| TapInput { data: d, shape: *s })
                        .collect();
                    let targets = SampleTargets {
                        hard: &data.targets[i],
                        mask: Some(&data.masks[i]),
                        soft: guidance.map(|g| g.soft[i].as_slice()),
                        references,
                    };
                    objective.evaluate(&trace.logits_f64(), &targets, &taps)?
                };
                let d_logits: Vec<f32> = g.logits.iter().map(|&v| (v * scale) as f32).collect();
                let d_taps: Option<Vec<Vec<f32>>> = (!references.is_empty()).then(|| {
                    g.taps
                        .iter()
                        .map(|t| t.iter().map(|&v| (v * scale) as f32).collect())
                        .collect()
                });
                model.backward(trace, &d_logits, d_taps.as_deref(), grad)?;
                Ok(loss)
            })
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence {
                    stage: settings.stage.to_string(),
                    epoch,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            for l in &losses {
                epoch_loss.add_scaled(l, 1.0 / n as f64);
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    stage: settings.stage.to_string(),
                    epoch,
                    loss: epoch_loss.total,
                });
            }
            adam.step(net.params_mut(), &grads, &trainable);
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence {
                stage: settings.stage.to_string(),
                epoch,
                loss: epoch_loss.total,
            });
        }
        log::info!(
            "{} epoch {}/{}: loss {:.5} (hard {:.5}, soft {:.5}, kl {:.5}, wasserstein {:.5})",
            settings.stage,
            epoch + 1,
            settings.epochs,
            epoch_loss.total,
            epoch_loss.hard_bce,
            epoch_loss.soft_bce,
            epoch_loss.kl_term,
            epoch_loss.wasserstein_term
        );
        history.push(EpochLoss {
            epoch,
            loss: epoch_loss,
        });
    }
    Ok(history)
}

/// Loss of the current parameters over the whole set, without updating.
pub fn evaluate_objective(
    net: &Network,
    objective: &DistillObjective,
    data: &TrainingSet,
    guidance: Option<&Guidance>,
    exec: Execution,
) -> Result<LossValue> {
    let shape = data.images.shape();
    let learner_channels: Vec<usize> = net.tap_shapes(shape.1, shape.2).iter().map(|s| s.0).collect();
    let use_features = objective.lambda > 0.0 && guidance.is_some();
    let per_sample = map_indexed(data.len(), exec, |i| -> Result<LossValue> {
        let input = data.images.sample(i);
        let references = match guidance.map(|g| &g.features) {
            Some(FeatureSource::Stored(f)) if use_features => f[i].clone(),
            Some(FeatureSource::Online { members, alignment }) if use_features => {
                reference_features(members, input, shape, &learner_channels, alignment)?
            }
            _ => Vec::new(),
        };
        let trace = net.forward(input, shape)?;
        let taps: Vec<TapInput<'_>> = trace
            .taps()
            .iter()
            .map(|(d, s)| TapInput { data: d, shape: *s })
            .collect();
        let targets = SampleTargets {
            hard: &data.targets[i],
            mask: Some(&data.masks[i]),
            soft: guidance.map(|g| g.soft[i].as_slice()),
            references: &references,
        };
        Ok(objective.evaluate(&trace.logits_f64(), &targets, &taps)?.0)
    });
    let mut total = LossValue::default();
    for l in per_sample {
        total.add_scaled(&l?, 1.0 / data.len() as f64);
    }
    Ok(total)
}

impl TrainingSet {
    /// Decodes every sample. Unreadable images abort, or are skipped with a
    /// warning when `skip_unreadable` is set.
    pub fn load(samples: &[crate::data::Sample], image_size: usize, skip_unreadable: bool) -> Result<Self> {
        let mut keep = Vec::with_capacity(samples.len());
        let mut pixels = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            match crate::data::load_gray(s, image_size) {
                Ok(p) => {
                    keep.push(i);
                    pixels.push(p);
                }
                Err(e) if skip_unreadable => log::warn!("skipping sample: {e}"),
                Err(e) => return Err(e),
            }
        }
        if keep.is_empty() {
            return Err(Error::EmptySplit);
        }
        let data: Vec<f32> = pixels.iter().flat_map(|p| crate::data::normalize_pixels(p)).collect();
        Ok(TrainingSet {
            images: ImageBatch::new(data, keep.len(), 1, image_size, image_size)?,
            targets: keep.iter().map(|&i| samples[i].labels.as_targets()).collect(),
            masks: keep.iter().map(|&i| samples[i].mask_f32()).collect(),
            sample_ids: keep.iter().map(|&i| samples[i].sample_id.clone()).collect(),
        })
    }

    /// Hard labels and masks in the form the metrics expect.
    pub fn labels(&self) -> Result<(Vec<crate::types::LabelVector>, Vec<Vec<u8>>)> {
        let labels = self
            .targets
            .iter()
            .map(|t| crate::types::LabelVector::new(t.iter().map(|&v| v as u8).collect()))
            .collect::<Result<Vec<_>>>()?;
        let masks = self
            .masks
            .iter()
            .map(|m| m.iter().map(|&v| v as u8).collect())
            .collect();
        Ok((labels, masks))
    }
}
