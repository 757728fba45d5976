//! Network definitions: backbone registry, the 3-block student, teacher
//! ensembles, feature taps and checkpoints.

mod checkpoint;
mod network;
mod spec;

pub use checkpoint::{file_checksum, sha256_hex, Checkpoint, CHECKPOINT_VERSION};
pub use network::{ForwardTrace, Network, ParamBlock};
pub use spec::{
    student_spec, tiny_b6_spec, tiny_b7_spec, tiny_densenet_spec, tiny_inception_spec, BackboneRegistry, BackboneSpec,
    HeadSpec, LayerSpec, StageSpec,
};

use crate::error::{Error, Result};
use crate::types::{sigmoid, ImageBatch, PredictionVector};

/// Looks up `name` in `registry` and builds it.
pub fn build_network(registry: &BackboneRegistry, name: &str, class_count: usize, seed: u64) -> Result<Network> {
    Network::build(registry.get(name)?, class_count, seed)
}

/// Per-class mean of member sigmoid probabilities for one sample's logits.
pub fn ensemble_probabilities(member_logits: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = member_logits
        .first()
        .ok_or_else(|| Error::Parameter("ensemble needs at least one member".into()))?;
    let c = first.len();
    let mut mean = vec![0.0; c];
    for logits in member_logits {
        if logits.len() != c {
            return Err(Error::dim("ensemble member class count", c, logits.len()));
        }
        for (m, &z) in mean.iter_mut().zip(logits) {
            *m += sigmoid(z);
        }
    }
    let n = member_logits.len() as f64;
    Ok(mean.into_iter().map(|m| m / n).collect())
}

/// Averages member probabilities per class; the returned logits are the
/// inverse sigmoid of that mean.
pub fn teacher_ensemble_predict(members: &[Network], batch: &ImageBatch) -> Result<Vec<PredictionVector>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Parameter("ensemble needs at least one member".into()))?;
    if let Some(m) = members.iter().find(|m| m.class_count() != first.class_count()) {
        return Err(Error::dim(
            "ensemble member class count",
            first.class_count(),
            m.class_count(),
        ));
    }
    let per_member: Vec<Vec<Vec<f64>>> = members.iter().map(|m| m.predict_logits(batch)).collect::<Result<_>>()?;
    (0..batch.len())
        .map(|i| {
            let logits: Vec<Vec<f64>> = per_member.iter().map(|m| m[i].clone()).collect();
            PredictionVector::from_probabilities(ensemble_probabilities(&logits)?)
        })
        .collect()
}

/// Exact count of trainable scalars.
pub fn parameter_count(net: &Network) -> usize {
    net.parameter_count()
}
