#![allow(dead_code)]

use std::path::Path;

use kdcascade::data::{synthesize_dataset, SynthSpec};
use kdcascade::RunConfig;

/// Writes a synthetic dataset under `dir/data` and returns a config that
/// trains on it with every stage set to `epochs`, single-threaded.
pub fn synth_config(dir: &Path, samples: usize, image_size: usize, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    let spec = SynthSpec {
        n_samples: samples,
        class_count: cfg.class_count,
        image_size,
        rule_seed: cfg.synth_rule_seed,
        noise: cfg.synth_noise,
    };
    let data = dir.join("data");
    synthesize_dataset(&spec, &data).unwrap();
    cfg.train_manifest = data.join("train.csv").to_string_lossy().into_owned();
    cfg.validation_manifest = data.join("validation.csv").to_string_lossy().into_owned();
    cfg.image_size = image_size;
    cfg.synth_samples = samples;
    cfg.threads = 1;
    for stage in [&mut cfg.teacher, &mut cfg.assistant, &mut cfg.student] {
        stage.epochs = epochs;
    }
    cfg
}

pub fn naive_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-class BCE summed over classes, probabilities clamped to [1e-7, 1 - 1e-7].
pub fn plain_bce(targets: &[f64], logits: &[f64]) -> f64 {
    targets
        .iter()
        .zip(logits)
        .map(|(&y, &z)| {
            let p = naive_sigmoid(z).clamp(1e-7, 1.0 - 1e-7);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

/// Adaptive average pooling of one `(c, h, w)` map to `(c, s, s)`, written
/// out cell by cell.
pub fn pool(data: &[f32], shape: (usize, usize, usize), s: usize) -> Vec<f64> {
    let (c, h, w) = shape;
    let mut out = Vec::with_capacity(c * s * s);
    for ch in 0..c {
        for oy in 0..s {
            for ox in 0..s {
                let (y0, y1) = (oy * h / s, ((oy + 1) * h).div_ceil(s));
                let (x0, x1) = (ox * w / s, ((ox + 1) * w).div_ceil(s));
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += f64::from(data[ch * h * w + y * w + x]);
                    }
                }
                out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}
