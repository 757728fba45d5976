//! Desk-scale synthetic dataset: each class is a fixed motif drawn at its own
//! cell of a 3×3 grid, over a sloped background with Gaussian noise.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::manifest::{write_manifest, RawLabel, SampleManifestRow};
use super::split::{resolve_samples, DatasetSplit};
use crate::config::LabelPolicy;
use crate::error::{Error, Result};
use crate::rng::child_rng;

/// Grid cells handed to classes in order; classes beyond nine are rejected.
pub const CELL_ORDER: [usize; 9] = [0, 2, 6, 8, 4, 1, 3, 5, 7];
pub const MAX_SYNTH_CLASSES: usize = 9;
/// Motif brightness above the local background, in 8-bit grey levels.
pub const MOTIF_AMPLITUDE: f64 = 100.0;
pub const POSITIVE_RATE: f64 = 0.4;
pub const DECOY_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotifKind {
    HorizontalBar,
    VerticalBar,
    Block,
    Frame,
    /// Diagonal stroke, only ever drawn as a decoy.
    Diagonal,
}

impl MotifKind {
    pub fn for_class(class: usize) -> Self {
        match class % 4 {
            0 => MotifKind::HorizontalBar,
            1 => MotifKind::VerticalBar,
            2 => MotifKind::Block,
            _ => MotifKind::Frame,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub class_count: usize,
    pub image_size: usize,
    pub rule_seed: u64,
    /// Noise standard deviation as a fraction of the motif amplitude.
    pub noise: f64,
}

/// Pixel layout shared by the generator and anything that wants to
/// re-detect motifs from the images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotifGeometry {
    pub image_size: usize,
    pub cell: usize,
    pub margin: usize,
    pub jitter: i64,
    pub bar_length: usize,
    pub bar_thickness: usize,
    pub block: usize,
    pub frame: usize,
}

impl MotifGeometry {
    pub fn new(image_size: usize) -> Self {
        let cell = image_size / 3;
        MotifGeometry {
            image_size,
            cell,
            margin: (image_size - 3 * cell) / 2,
            jitter: (image_size / 32).max(1) as i64,
            bar_length: (cell * 6 / 10).max(4),
            bar_thickness: (cell / 5).max(2),
            block: (cell * 4 / 10).max(3),
            frame: (cell * 6 / 10).max(5),
        }
    }

    /// Top-left pixel of grid cell `cell_index`'s center.
    pub fn cell_center(&self, cell_index: usize) -> (i64, i64) {
        let row = cell_index / 3;
        let col = cell_index % 3;
        let half = self.cell / 2;
        (
            (self.margin + row * self.cell + half) as i64,
            (self.margin + col * self.cell + half) as i64,
        )
    }

    /// Mask pixels of `kind` as (dy, dx) offsets from the anchor.
    pub fn mask(&self, kind: MotifKind) -> Vec<(i64, i64)> {
        let rect = |h: usize, w: usize| {
            let (h, w) = (h as i64, w as i64);
            let mut px = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    px.push((y - h / 2, x - w / 2));
                }
            }
            px
        };
        match kind {
            MotifKind::HorizontalBar => rect(self.bar_thickness, self.bar_length),
            MotifKind::VerticalBar => rect(self.bar_length, self.bar_thickness),
            MotifKind::Block => rect(self.block, self.block),
            MotifKind::Frame => {
                let f = self.frame as i64;
                let t = (self.frame / 5).max(1) as i64;
                rect(self.frame, self.frame)
                    .into_iter()
                    .filter(|&(y, x)| {
                        let (y, x) = (y + f / 2, x + f / 2);
                        y < t || x < t || y >= f - t || x >= f - t
                    })
                    .collect()
            }
            MotifKind::Diagonal => {
                let n = self.bar_length as i64;
                let t = self.bar_thickness as i64;
                let mut px = Vec::new();
                for i in 0..n {
                    for k in 0..t {
                        px.push((i - n / 2, i - n / 2 + k - (t - 1) / 2));
                    }
                }
                px
            }
        }
    }
}

/// Default class names, `class_0 .. class_{C-1}`.
pub fn default_class_names(c: usize) -> Vec<String> {
    (0..c).map(|k| format!("class_{k}")).collect()
}

fn stamp(canvas: &mut [f64], size: usize, center: (i64, i64), mask: &[(i64, i64)], amp: f64) {
    for &(dy, dx) in mask {
        let (y, x) = (center.0 + dy, center.1 + dx);
        if y >= 0 && x >= 0 && (y as usize) < size && (x as usize) < size {
            canvas[y as usize * size + x as usize] += amp;
        }
    }
}

/// Renders sample `index`: returns its pixels and per-class labels.
pub fn render_sample(spec: &SynthSpec, geometry: &MotifGeometry, index: usize) -> (GrayImage, Vec<u8>) {
    let s = spec.image_size;
    let mut rng = child_rng(spec.rule_seed, index as u64);
    let base = rng.random_range(60.0..90.0);
    let gy = rng.random_range(-30.0..30.0);
    let gx = rng.random_range(-30.0..30.0);
    let mut canvas = vec![0.0f64; s * s];
    for y in 0..s {
        for x in 0..s {
            let fy = y as f64 / s as f64 - 0.5;
            let fx = x as f64 / s as f64 - 0.5;
            canvas[y * s + x] = base + gy * fy + gx * fx;
        }
    }

    let jittered = |rng: &mut crate::rng::Rng, cell: usize| {
        let (cy, cx) = geometry.cell_center(cell);
        let j = geometry.jitter;
        (cy + rng.random_range(-j..=j), cx + rng.random_range(-j..=j))
    };
    let mut labels = vec![0u8; spec.class_count];
    for (class, label) in labels.iter_mut().enumerate() {
        if rng.random_bool(POSITIVE_RATE) {
            *label = 1;
            let at = jittered(&mut rng, CELL_ORDER[class]);
            stamp(
                &mut canvas,
                s,
                at,
                &geometry.mask(MotifKind::for_class(class)),
                MOTIF_AMPLITUDE,
            );
        }
    }
    for &cell in &CELL_ORDER[spec.class_count..] {
        if rng.random_bool(DECOY_RATE) {
            let at = jittered(&mut rng, cell);
            stamp(&mut canvas, s, at, &geometry.mask(MotifKind::Diagonal), MOTIF_AMPLITUDE);
        }
    }

    let sd = spec.noise * MOTIF_AMPLITUDE;
    let noise = Normal::new(0.0, sd.max(f64::MIN_POSITIVE)).expect("finite sd");
    let pixels: Vec<u8> = canvas
        .iter()
        .map(|&v| {
            let n = if sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (v + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    let img = GrayImage::from_raw(s as u32, s as u32, pixels).expect("buffer sized to image");
    (img, labels)
}

/// Writes `images/*.png`, `manifest.csv`, `train.csv` and `validation.csv`
/// under `dir` and returns the split (20% validation by seeded shuffle).
pub fn synthesize_dataset(spec: &SynthSpec, dir: &Path) -> Result<DatasetSplit> {
    synthesize_named(spec, &default_class_names(spec.class_count), dir)
}

/// [`synthesize_dataset`] with explicit manifest column names.
pub fn synthesize_named(spec: &SynthSpec, names: &[String], dir: &Path) -> Result<DatasetSplit> {
    let c = spec.class_count;
    if names.len() != c {
        return Err(Error::dim("class names", c, names.len()));
    }
    if c == 0 || c > MAX_SYNTH_CLASSES {
        return Err(Error::Parameter(format!(
            "synthetic data supports 1..={MAX_SYNTH_CLASSES} classes, got {c}"
        )));
    }
    if spec.n_samples < 10 * c {
        return Err(Error::Parameter(format!(
            "need at least {} samples for {c} classes, got {}",
            10 * c,
            spec.n_samples
        )));
    }
    if spec.image_size < 16 {
        return Err(Error::Parameter(format!("image size {} is below 16", spec.image_size)));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(Error::Parameter(format!("noise must be >= 0, got {}", spec.noise)));
    }
    let geometry = MotifGeometry::new(spec.image_size);
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let mut rows = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let (img, labels) = render_sample(spec, &geometry, i);
        let id = format!("synth_{i:05}");
        let rel = PathBuf::from("images").join(format!("{id}.png"));
        let path = dir.join(&rel);
        img.save(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        rows.push(SampleManifestRow {
            sample_id: id,
            image_path: path,
            raw_labels: labels
                .iter()
                .map(|&l| if l == 1 { RawLabel::Positive } else { RawLabel::Negative })
                .collect(),
        });
    }
    let names = names.to_vec();
    write_manifest(&dir.join("manifest.csv"), &names, &rows, dir)?;

    let samples = resolve_samples(&rows, LabelPolicy::UZeros)?;
    let split = DatasetSplit::shuffled(samples, names.clone(), 0.2, spec.rule_seed)?;
    for (file, part) in [("train.csv", split.train()), ("validation.csv", split.validation())] {
        let part_rows: Vec<SampleManifestRow> = part
            .iter()
            .map(|s| SampleManifestRow {
                sample_id: s.sample_id.clone(),
                image_path: s.image_path.clone(),
                raw_labels: s
                    .labels
                    .values()
                    .iter()
                    .map(|&l| if l == 1 { RawLabel::Positive } else { RawLabel::Negative })
                    .collect(),
            })
            .collect();
        write_manifest(&dir.join(file), &names, &part_rows, dir)?;
    }
    Ok(split)
}
