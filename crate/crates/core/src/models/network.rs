use rand_distr::{Distribution, Normal};

use super::spec::{BackboneSpec, LayerSpec};
use crate::error::{Error, Result};
use crate::nn::ops;
use crate::rng::child_rng;
use crate::types::{FeatureMap, ImageBatch, PredictionVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    offset: usize,
    len: usize,
}

impl Slot {
    fn of<'a>(&self, buf: &'a [f32]) -> &'a [f32] {
        &buf[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvParams {
    in_c: usize,
    out_c: usize,
    k: usize,
    weight: Slot,
    bias: Slot,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv(ConvParams),
    Relu,
    MaxPool,
    Dense(Vec<ConvParams>),
    Inception(Vec<ConvParams>),
}

#[derive(Debug, Clone, PartialEq)]
struct LinearParams {
    n_in: usize,
    n_out: usize,
    weight: Slot,
    bias: Slot,
}

/// Named contiguous run of parameters; the unit of freezing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub frozen: bool,
}

enum Cache {
    Conv {
        col: Vec<f32>,
        in_shape: (usize, usize, usize),
    },
    Relu {
        out: Vec<f32>,
    },
    Pool {
        arg: Vec<u32>,
        in_len: usize,
    },
    Multi {
        in_shape: (usize, usize, usize),
        steps: Vec<(Vec<f32>, Vec<f32>)>,
    },
}

/// One tap's activations and its `(c, h, w)` shape.
pub type TapActivation = (Vec<f32>, (usize, usize, usize));

/// Everything the backward pass needs from one forward pass of one sample.
pub struct ForwardTrace {
    caches: Vec<Cache>,
    taps: Vec<TapActivation>,
    final_shape: (usize, usize, usize),
    head_inputs: Vec<Vec<f32>>,
    head_outputs: Vec<Vec<f32>>,
    logits: Vec<f32>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn logits_f64(&self) -> Vec<f64> {
        self.logits.iter().map(|&v| f64::from(v)).collect()
    }

    /// Tap activations in stage order with their `(c, h, w)` shapes.
    pub fn taps(&self) -> &[TapActivation] {
        &self.taps
    }
}

/// A built network: layer graph plus one flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: BackboneSpec,
    class_count: usize,
    seed: u64,
    layers: Vec<Layer>,
    stage_ends: Vec<usize>,
    head: Vec<LinearParams>,
    params: Vec<f32>,
    blocks: Vec<ParamBlock>,
}

struct Builder {
    params: Vec<f32>,
    blocks: Vec<ParamBlock>,
    rng: crate::rng::Rng,
}

impl Builder {
    fn alloc(&mut self, name: String, len: usize, std: f32) -> Slot {
        let offset = self.params.len();
        if std > 0.0 {
            let normal = Normal::new(0.0f32, std).expect("valid std");
            self.params.extend((0..len).map(|_| normal.sample(&mut self.rng)));
        } else {
            self.params.extend(std::iter::repeat_n(0.0, len));
        }
        self.blocks.push(ParamBlock {
            name,
            offset,
            len,
            frozen: false,
        });
        Slot { offset, len }
    }

    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize) -> ConvParams {
        let fan_in = (in_c * k * k) as f32;
        let weight = self.alloc(format!("{name}.weight"), out_c * in_c * k * k, (2.0 / fan_in).sqrt());
        let bias = self.alloc(format!("{name}.bias"), out_c, 0.0);
        ConvParams {
            in_c,
            out_c,
            k,
            weight,
            bias,
        }
    }
}

impl Network {
    /// Builds and initialises a network. Equal seeds give bit-identical
    /// parameters.
    pub fn build(spec: &BackboneSpec, class_count: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if class_count == 0 {
            return Err(Error::Parameter("class count must be >= 1".into()));
        }
        let mut b = Builder {
            params: Vec::new(),
            blocks: Vec::new(),
            rng: child_rng(seed, 0x6e65_7477),
        };
        let mut layers = Vec::new();
        let mut stage_ends = Vec::new();
        let mut c = spec.input_channels;
        for stage in &spec.stages {
            for (li, layer) in stage.layers.iter().enumerate() {
                let name = format!("{}.{li}", stage.tap_name);
                let built = match *layer {
                    LayerSpec::Conv { filters, kernel } => Layer::Conv(b.conv(&name, c, filters, kernel)),
                    LayerSpec::Relu => Layer::Relu,
                    LayerSpec::MaxPool => Layer::MaxPool,
                    LayerSpec::Dense {
                        layers: n,
                        growth,
                        kernel,
                    } => Layer::Dense(
                        (0..n)
                            .map(|l| b.conv(&format!("{name}.dense{l}"), c + l * growth, growth, kernel))
                            .collect(),
                    ),
                    LayerSpec::Inception {
                        branch1,
                        branch3,
                        branch5,
                    } => Layer::Inception(vec![
                        b.conv(&format!("{name}.b1"), c, branch1, 1),
                        b.conv(&format!("{name}.b3"), c, branch3, 3),
                        b.conv(&format!("{name}.b5"), c, branch5, 5),
                    ]),
                };
                c = layer.out_channels(c);
                layers.push(built);
            }
            stage_ends.push(layers.len() - 1);
        }
        let mut head = Vec::new();
        let mut width = c;
        let sizes: Vec<usize> = spec.head.hidden.iter().copied().chain([class_count]).collect();
        for (i, &n_out) in sizes.iter().enumerate() {
            let last = i + 1 == sizes.len();
            let std = if last {
                (1.0 / width as f32).sqrt()
            } else {
                (2.0 / width as f32).sqrt()
            };
            let weight = b.alloc(format!("head.{i}.weight"), n_out * width, std);
            let bias = b.alloc(format!("head.{i}.bias"), n_out, 0.0);
            head.push(LinearParams {
                n_in: width,
                n_out,
                weight,
                bias,
            });
            width = n_out;
        }
        Ok(Network {
            spec: spec.clone(),
            class_count,
            seed,
            layers,
            stage_ends,
            head,
            params: b.params,
            blocks: b.blocks,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    /// Replaces the parameter buffer; its length must match.
    pub fn set_params(&mut self, params: Vec<f32>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::dim("parameter buffer", self.params.len(), params.len()));
        }
        self.params = params;
        Ok(())
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    /// Number of trainable (non-frozen) scalars.
    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().filter(|b| !b.frozen).map(|b| b.len).sum()
    }

    /// Trainable scalars in the convolutional stages (head excluded).
    pub fn backbone_parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| !b.frozen && !b.name.starts_with("head."))
            .map(|b| b.len)
            .sum()
    }

    /// Freezes every parameter block whose name starts with `prefix`.
    /// Returns how many scalars were frozen.
    pub fn freeze(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for b in self
            .blocks
            .iter_mut()
            .filter(|b| b.name.starts_with(prefix) && !b.frozen)
        {
            b.frozen = true;
            n += b.len;
        }
        n
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.params.len()];
        for b in self.blocks.iter().filter(|b| b.frozen) {
            mask[b.offset..b.offset + b.len].fill(false);
        }
        mask
    }

    pub fn tap_shapes(&self, height: usize, width: usize) -> Vec<(usize, usize, usize)> {
        let mut c = self.spec.input_channels;
        let (mut h, mut w) = (height, width);
        self.spec
            .stages
            .iter()
            .map(|s| {
                for l in &s.layers {
                    c = l.out_channels(c);
                    if matches!(l, LayerSpec::MaxPool) {
                        h /= 2;
                        w /= 2;
                    }
                }
                (c, h, w)
            })
            .collect()
    }

    fn check_input(&self, len: usize, shape: (usize, usize, usize)) -> Result<()> {
        let (c, h, w) = shape;
        if c != self.spec.input_channels {
            return Err(Error::dim("input channels", self.spec.input_channels, c));
        }
        if len != c * h * w {
            return Err(Error::dim("input sample", c * h * w, len));
        }
        let min = 1usize << self.spec.pool_count();
        if h < min || w < min {
            return Err(Error::dim("input height/width (minimum)", min, h.min(w)));
        }
        Ok(())
    }

    /// Forward pass of one sample, keeping what backward needs.
    pub fn forward(&self, input: &[f32], shape: (usize, usize, usize)) -> Result<ForwardTrace> {
        self.forward_until(input, shape, self.layers.len())
    }

    /// Runs only the layers up to the end of `stage`, returning that tap.
    /// Independent of [`Network::forward`]'s bookkeeping, so it can be used
    /// to cross-check recorded taps.
    pub fn forward_truncated(
        &self,
        input: &[f32],
        shape: (usize, usize, usize),
        stage: usize,
    ) -> Result<TapActivation> {
        self.check_input(input.len(), shape)?;
        let end = *self
            .stage_ends
            .get(stage)
            .ok_or_else(|| Error::Parameter(format!("no stage {stage}")))?;
        let mut x = input.to_vec();
        let mut s = shape;
        for layer in &self.layers[..=end] {
            let (y, ys, _) = self.layer_forward(layer, x, s);
            x = y;
            s = ys;
        }
        Ok((x, s))
    }

    fn forward_until(&self, input: &[f32], shape: (usize, usize, usize), n_layers: usize) -> Result<ForwardTrace> {
        self.check_input(input.len(), shape)?;
        let mut x = input.to_vec();
        let mut s = shape;
        let mut caches = Vec::with_capacity(n_layers);
        let mut taps = Vec::with_capacity(self.stage_ends.len());
        for (li, layer) in self.layers[..n_layers].iter().enumerate() {
            let (y, ys, cache) = self.layer_forward(layer, x, s);
            x = y;
            s = ys;
            caches.push(cache);
            if self.stage_ends.contains(&li) {
                taps.push((x.clone(), s));
            }
        }
        let (c, h, w) = s;
        let hw = (h * w) as f32;
        let mut hidden: Vec<f32> = x.chunks(h * w).map(|p| p.iter().sum::<f32>() / hw).collect();
        debug_assert_eq!(hidden.len(), c);
        let mut head_inputs = Vec::with_capacity(self.head.len());
        let mut head_outputs = Vec::with_capacity(self.head.len());
        for (i, lin) in self.head.iter().enumerate() {
            let mut out = ops::linear_forward(&hidden, lin.weight.of(&self.params), lin.bias.of(&self.params));
            if i + 1 < self.head.len() {
                ops::relu_inplace(&mut out);
            }
            head_inputs.push(std::mem::replace(&mut hidden, out.clone()));
            head_outputs.push(out);
        }
        if hidden.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} logits", self.spec.name)));
        }
        Ok(ForwardTrace {
            caches,
            taps,
            final_shape: s,
            head_inputs,
            head_outputs,
            logits: hidden,
        })
    }

    fn layer_forward(
        &self,
        layer: &Layer,
        x: Vec<f32>,
        s: (usize, usize, usize),
    ) -> (Vec<f32>, (usize, usize, usize), Cache) {
        let p = &self.params;
        match layer {
            Layer::Conv(cp) => {
                let (y, col) = ops::conv_forward(&x, s, cp.k, cp.out_c, cp.weight.of(p), cp.bias.of(p));
                (y, (cp.out_c, s.1, s.2), Cache::Conv { col, in_shape: s })
            }
            Layer::Relu => {
                let mut y = x;
                ops::relu_inplace(&mut y);
                let out = y.clone();
                (y, s, Cache::Relu { out })
            }
            Layer::MaxPool => {
                let (y, arg) = ops::maxpool_forward(&x, s);
                (y, (s.0, s.1 / 2, s.2 / 2), Cache::Pool { arg, in_len: x.len() })
            }
            Layer::Dense(convs) => {
                let hw = s.1 * s.2;
                let mut concat = x;
                let mut c = s.0;
                let mut steps = Vec::with_capacity(convs.len());
                for cp in convs {
                    let (mut y, col) =
                        ops::conv_forward(&concat, (c, s.1, s.2), cp.k, cp.out_c, cp.weight.of(p), cp.bias.of(p));
                    ops::relu_inplace(&mut y);
                    concat.extend_from_slice(&y);
                    c += cp.out_c;
                    steps.push((col, y));
                }
                debug_assert_eq!(concat.len(), c * hw);
                (concat, (c, s.1, s.2), Cache::Multi { in_shape: s, steps })
            }
            Layer::Inception(convs) => {
                let mut out = Vec::new();
                let mut c = 0;
                let mut steps = Vec::with_capacity(convs.len());
                for cp in convs {
                    let (mut y, col) = ops::conv_forward(&x, s, cp.k, cp.out_c, cp.weight.of(p), cp.bias.of(p));
                    ops::relu_inplace(&mut y);
                    out.extend_from_slice(&y);
                    c += cp.out_c;
                    steps.push((col, y));
                }
                (out, (c, s.1, s.2), Cache::Multi { in_shape: s, steps })
            }
        }
    }

    /// Backward pass for one sample. `d_logits` is dL/dlogits; `d_taps`, when
    /// given, holds dL/dtap for every stage tap. Parameter gradients are
    /// added into `grads` (same layout as [`Network::params`]).
    pub fn backward(
        &self,
        trace: ForwardTrace,
        d_logits: &[f32],
        d_taps: Option<&[Vec<f32>]>,
        grads: &mut [f32],
    ) -> Result<()> {
        if d_logits.len() != self.class_count {
            return Err(Error::dim("logit gradient", self.class_count, d_logits.len()));
        }
        if grads.len() != self.params.len() {
            return Err(Error::dim("gradient buffer", self.params.len(), grads.len()));
        }
        if let Some(dt) = d_taps {
            if dt.len() != self.stage_ends.len() {
                return Err(Error::dim("tap gradients", self.stage_ends.len(), dt.len()));
            }
        }
        let p = &self.params;
        let mut g = d_logits.to_vec();
        for i in (0..self.head.len()).rev() {
            let lin = &self.head[i];
            if i + 1 < self.head.len() {
                ops::relu_backward(&mut g, &trace.head_outputs[i]);
            }
            let (gw, rest) = split_two(grads, lin.weight, lin.bias);
            g = ops::linear_backward(&g, &trace.head_inputs[i], lin.weight.of(p), gw, rest);
            debug_assert_eq!(g.len(), lin.n_in);
        }
        let (c, h, w) = trace.final_shape;
        let hw = h * w;
        let mut d: Vec<f32> = Vec::with_capacity(c * hw);
        for gc in &g {
            d.extend(std::iter::repeat_n(gc / hw as f32, hw));
        }

        let mut caches = trace.caches;
        let mut stage = self.stage_ends.len();
        for li in (0..caches.len()).rev() {
            if stage > 0 && self.stage_ends[stage - 1] == li {
                stage -= 1;
                if let Some(dt) = d_taps {
                    let tap = &dt[stage];
                    if tap.len() != d.len() {
                        return Err(Error::dim("tap gradient", d.len(), tap.len()));
                    }
                    for (a, b) in d.iter_mut().zip(tap) {
                        *a += b;
                    }
                }
            }
            let cache = caches.pop().expect("one cache per layer");
            d = self.layer_backward(&self.layers[li], cache, d, grads, li > 0);
        }
        Ok(())
    }

    fn layer_backward(
        &self,
        layer: &Layer,
        cache: Cache,
        d: Vec<f32>,
        grads: &mut [f32],
        need_input: bool,
    ) -> Vec<f32> {
        let p = &self.params;
        match (layer, cache) {
            (Layer::Conv(cp), Cache::Conv { col, in_shape }) => {
                let (gw, gb) = split_two(grads, cp.weight, cp.bias);
                ops::conv_backward(&d, &col, in_shape, cp.k, cp.out_c, cp.weight.of(p), gw, gb, need_input)
                    .unwrap_or_default()
            }
            (Layer::Relu, Cache::Relu { out }) => {
                let mut d = d;
                ops::relu_backward(&mut d, &out);
                d
            }
            (Layer::MaxPool, Cache::Pool { arg, in_len }) => ops::maxpool_backward(&d, &arg, in_len),
            (Layer::Dense(convs), Cache::Multi { in_shape, steps }) => {
                let (c0, h, w) = in_shape;
                let hw = h * w;
                let mut d = d;
                let mut c = c0 + convs.iter().map(|cp| cp.out_c).sum::<usize>();
                for (cp, (col, out)) in convs.iter().zip(steps).rev() {
                    c -= cp.out_c;
                    let mut g_new = d.split_off(c * hw);
                    ops::relu_backward(&mut g_new, &out);
                    let (gw, gb) = split_two(grads, cp.weight, cp.bias);
                    let need = need_input || c > c0;
                    if let Some(gi) =
                        ops::conv_backward(&g_new, &col, (c, h, w), cp.k, cp.out_c, cp.weight.of(p), gw, gb, need)
                    {
                        for (a, b) in d.iter_mut().zip(gi) {
                            *a += b;
                        }
                    }
                }
                d
            }
            (Layer::Inception(convs), Cache::Multi { in_shape, steps }) => {
                let (c0, h, w) = in_shape;
                let hw = h * w;
                let mut d_in = vec![0.0f32; c0 * hw];
                let mut start = 0;
                for (cp, (col, out)) in convs.iter().zip(steps) {
                    let mut g = d[start * hw..(start + cp.out_c) * hw].to_vec();
                    start += cp.out_c;
                    ops::relu_backward(&mut g, &out);
                    let (gw, gb) = split_two(grads, cp.weight, cp.bias);
                    if let Some(gi) =
                        ops::conv_backward(&g, &col, in_shape, cp.k, cp.out_c, cp.weight.of(p), gw, gb, need_input)
                    {
                        for (a, b) in d_in.iter_mut().zip(gi) {
                            *a += b;
                        }
                    }
                }
                d_in
            }
            _ => unreachable!("cache variant always matches its layer"),
        }
    }

    /// Logits and taps for every sample in a batch.
    pub fn forward_with_taps(&self, batch: &ImageBatch) -> Result<Vec<(PredictionVector, Vec<FeatureMap>)>> {
        let names = self.spec.tap_names();
        (0..batch.len())
            .map(|i| {
                let trace = self.forward(batch.sample(i), batch.shape())?;
                let pred = PredictionVector::from_logits(trace.logits_f64())?;
                let maps = trace
                    .taps
                    .into_iter()
                    .zip(&names)
                    .map(|((data, shape), name)| FeatureMap::new(data, shape, *name, self.spec.role))
                    .collect::<Result<Vec<_>>>()?;
                Ok((pred, maps))
            })
            .collect()
    }

    /// Logits for every sample.
    pub fn predict_logits(&self, batch: &ImageBatch) -> Result<Vec<Vec<f64>>> {
        (0..batch.len())
            .map(|i| Ok(self.forward(batch.sample(i), batch.shape())?.logits_f64()))
            .collect()
    }
}

/// Disjoint mutable views of two parameter slots (weight before bias).
fn split_two(grads: &mut [f32], a: Slot, b: Slot) -> (&mut [f32], &mut [f32]) {
    debug_assert!(a.offset + a.len <= b.offset);
    let (left, right) = grads.split_at_mut(b.offset);
    (&mut left[a.offset..a.offset + a.len], &mut right[..b.len])
}
