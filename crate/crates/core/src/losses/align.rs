//! Bringing two feature maps of different shapes onto a common grid.
//!
//! Both maps are adaptive-average-pooled to `size x size`. The reference
//! map's channel axis is then mixed down (or up) to the learner's channel
//! count by a fixed random projection drawn from the alignment seed, so no
//! trainable parameters are added to the learner.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_rng, derive_seed};
use crate::types::FeatureMap;

pub const DEFAULT_ALIGN_SIZE: usize = 4;

/// Alignment settings shared by exporters and learners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub size: usize,
    pub seed: u64,
}

impl Default for Alignment {
    fn default() -> Self {
        Alignment {
            size: DEFAULT_ALIGN_SIZE,
            seed: 0,
        }
    }
}

fn bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end.max(start + 1))
}

/// Adaptive average pooling of a `(c, h, w)` tensor to `(c, size, size)`.
/// Bin edges follow the usual floor/ceil convention, so bins may overlap
/// when `h` or `w` is not a multiple of `size`.
pub fn adaptive_avg_pool<T: Copy + Into<f64>>(data: &[T], shape: (usize, usize, usize), size: usize) -> Vec<f64> {
    let (c, h, w) = shape;
    let mut out = vec![0.0; c * size * size];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for oy in 0..size {
            let (y0, y1) = bin(oy, h, size);
            for ox in 0..size {
                let (x0, x1) = bin(ox, w, size);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        acc += plane[y * w + x].into();
                    }
                }
                out[(ch * size + oy) * size + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

/// Transpose of [`adaptive_avg_pool`]: scatters pooled gradients back.
pub fn adaptive_avg_pool_backward(grad: &[f64], shape: (usize, usize, usize), size: usize) -> Vec<f64> {
    let (c, h, w) = shape;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..size {
            let (y0, y1) = bin(oy, h, size);
            for ox in 0..size {
                let (x0, x1) = bin(ox, w, size);
                let g = grad[(ch * size + oy) * size + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        out[(ch * h + y) * w + x] += g;
                    }
                }
            }
        }
    }
    out
}

/// Fixed channel-mixing matrix of shape `(to, from)`.
///
/// Entries are independent standard normals scaled by `1/sqrt(from)`, so
/// every output channel is a distinct random direction and the expected
/// squared norm of a pooled position is preserved. Equal channel counts
/// get the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelProjection {
    from: usize,
    to: usize,
    weights: Vec<f64>,
}

impl ChannelProjection {
    pub fn random(from: usize, to: usize, seed: u64) -> Self {
        if from == to {
            let mut weights = vec![0.0; from * to];
            for i in 0..from {
                weights[i * from + i] = 1.0;
            }
            return ChannelProjection { from, to, weights };
        }
        let mut rng = child_rng(seed, ((from as u64) << 32) | to as u64);
        let scale = 1.0 / (from as f64).sqrt();
        let weights = (0..from * to)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v * scale
            })
            .collect();
        ChannelProjection { from, to, weights }
    }

    pub fn from_channels(&self) -> usize {
        self.from
    }

    pub fn to_channels(&self) -> usize {
        self.to
    }

    /// Projects pooled `(from, s, s)` data to `(to, s, s)`.
    pub fn apply(&self, pooled: &[f64], plane: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.to * plane];
        for o in 0..self.to {
            let row = &self.weights[o * self.from..(o + 1) * self.from];
            let dst = &mut out[o * plane..(o + 1) * plane];
            for (i, &wgt) in row.iter().enumerate() {
                let src = &pooled[i * plane..(i + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
        out
    }
}

impl Alignment {
    /// Seed of the projection used for the `tap_index`-th tap of the
    /// `member`-th reference network.
    pub fn projection_seed(&self, member: usize, tap_index: usize) -> u64 {
        derive_seed(derive_seed(self.seed, member as u64), tap_index as u64)
    }

    /// Pooled and projected reference values, laid out `(to_channels, size, size)`.
    pub fn align_reference(
        &self,
        data: &[f32],
        shape: (usize, usize, usize),
        to_channels: usize,
        member: usize,
        tap_index: usize,
    ) -> Vec<f64> {
        let pooled = adaptive_avg_pool(data, shape, self.size);
        let proj = ChannelProjection::random(shape.0, to_channels, self.projection_seed(member, tap_index));
        proj.apply(&pooled, self.size * self.size)
    }

    pub fn align_learner<T: Copy + Into<f64>>(&self, data: &[T], shape: (usize, usize, usize)) -> Vec<f64> {
        adaptive_avg_pool(data, shape, self.size)
    }
}

/// Aligns a reference map and a learner map to the learner's channel count
/// on a `size x size` grid. Returns `(reference, learner)`.
pub fn align_feature_maps(
    reference: &FeatureMap,
    learner: &FeatureMap,
    alignment: &Alignment,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if alignment.size == 0 {
        return Err(Error::Parameter("alignment size must be >= 1".into()));
    }
    let r = alignment.align_reference(reference.data(), reference.shape(), learner.channels(), 0, 0);
    let l = alignment.align_learner(learner.data(), learner.shape());
    Ok((r, l))
}
