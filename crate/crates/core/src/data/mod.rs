//! Manifests, label policies, splits, resampling and the synthetic dataset.

mod images;
mod manifest;
mod resample;
mod split;
mod synth;

pub use images::{load_batch, load_gray, normalize_pixels, LoadedBatch, PIXEL_MEAN, PIXEL_STD};
pub use manifest::{parse_manifest, parse_manifest_str, write_manifest, RawLabel, SampleManifestRow};
pub use resample::{resample, sampling_groups, target_counts, SamplingPolicy, NO_FINDING};
pub use split::{apply_label_policy, resolve_samples, DatasetSplit, Sample};
pub use synth::{
    default_class_names, render_sample, synthesize_dataset, synthesize_named, MotifGeometry, MotifKind, SynthSpec,
    CELL_ORDER, DECOY_RATE, MAX_SYNTH_CLASSES, MOTIF_AMPLITUDE, POSITIVE_RATE,
};
