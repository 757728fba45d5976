use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Role;

/// One layer of a backbone stage. Convolutions are stride 1 with padding
/// that preserves the spatial size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
    },
    Relu,
    /// 2x2 max pooling, stride 2.
    MaxPool,
    /// Densely connected block: each conv (+ReLU) sees the concatenation of
    /// the block input and all earlier outputs; output is the full concatenation.
    Dense {
        layers: usize,
        growth: usize,
        kernel: usize,
    },
    /// Parallel 1x1 / 3x3 / 5x5 conv branches (+ReLU each), concatenated.
    Inception {
        branch1: usize,
        branch3: usize,
        branch5: usize,
    },
}

impl LayerSpec {
    pub(crate) fn out_channels(&self, in_c: usize) -> usize {
        match *self {
            LayerSpec::Conv { filters, .. } => filters,
            LayerSpec::Relu | LayerSpec::MaxPool => in_c,
            LayerSpec::Dense { layers, growth, .. } => in_c + layers * growth,
            LayerSpec::Inception {
                branch1,
                branch3,
                branch5,
            } => branch1 + branch3 + branch5,
        }
    }

    pub(crate) fn parameter_count(&self, in_c: usize) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        match *self {
            LayerSpec::Conv { filters, kernel } => conv(in_c, filters, kernel),
            LayerSpec::Relu | LayerSpec::MaxPool => 0,
            LayerSpec::Dense { layers, growth, kernel } => {
                (0..layers).map(|l| conv(in_c + l * growth, growth, kernel)).sum()
            }
            LayerSpec::Inception {
                branch1,
                branch3,
                branch5,
            } => conv(in_c, branch1, 1) + conv(in_c, branch3, 3) + conv(in_c, branch5, 5),
        }
    }
}

/// A run of layers whose output is exposed as a named feature tap.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub tap_name: String,
    pub layers: Vec<LayerSpec>,
}

/// Classifier head: global average pool, then linear layers with ReLU in
/// between, ending in `class_count` logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden: Vec<usize>,
}

/// Declarative description of a network in the cascade.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub role: Role,
    /// Ordinal capacity: teacher > assistant > student.
    pub capacity_class: u8,
    pub input_channels: usize,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
    /// Published parameter count for full-scale backbones that are
    /// described here but not buildable in-process.
    pub reference_parameter_count: Option<u64>,
}

impl BackboneSpec {
    pub fn tap_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.tap_name.as_str()).collect()
    }

    pub fn is_buildable(&self) -> bool {
        !self.stages.is_empty()
    }

    /// Channel count of every tap, in stage order.
    pub fn tap_channels(&self) -> Vec<usize> {
        let mut c = self.input_channels;
        self.stages
            .iter()
            .map(|stage| {
                for layer in &stage.layers {
                    c = layer.out_channels(c);
                }
                c
            })
            .collect()
    }

    pub fn pool_count(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| &s.layers)
            .filter(|l| matches!(l, LayerSpec::MaxPool))
            .count()
    }

    /// Conv layers in order as `(filters, kernel)`, not counting those
    /// inside dense or inception blocks.
    pub fn plain_convs(&self) -> Vec<(usize, usize)> {
        self.stages
            .iter()
            .flat_map(|s| &s.layers)
            .filter_map(|l| match *l {
                LayerSpec::Conv { filters, kernel } => Some((filters, kernel)),
                _ => None,
            })
            .collect()
    }

    /// Trainable scalars in the convolutional stages.
    pub fn backbone_parameter_count(&self) -> usize {
        let mut c = self.input_channels;
        let mut total = 0;
        for layer in self.stages.iter().flat_map(|s| &s.layers) {
            total += layer.parameter_count(c);
            c = layer.out_channels(c);
        }
        total
    }

    /// Trainable scalars of the whole network for `class_count` outputs.
    pub fn parameter_count(&self, class_count: usize) -> u64 {
        if let Some(n) = self.reference_parameter_count {
            if !self.is_buildable() {
                return n;
            }
        }
        let mut total = self.backbone_parameter_count();
        let mut width = self.tap_channels().last().copied().unwrap_or(0);
        for &h in self.head.hidden.iter().chain(std::iter::once(&class_count)) {
            total += width * h + h;
            width = h;
        }
        total as u64
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Registry(format!(
                "{} has no in-process layers (external weights required)",
                self.name
            )));
        }
        if self.stages.iter().any(|s| s.tap_name.is_empty()) {
            return Err(Error::Parameter(format!("{}: empty tap name", self.name)));
        }
        let mut names = self.tap_names();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.stages.len() {
            return Err(Error::Parameter(format!("{}: duplicate tap names", self.name)));
        }
        if self.input_channels == 0 {
            return Err(Error::Parameter(format!("{}: zero input channels", self.name)));
        }
        Ok(())
    }
}

fn conv(filters: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv { filters, kernel }
}

fn stage(tap: &str, layers: Vec<LayerSpec>) -> StageSpec {
    StageSpec {
        tap_name: tap.to_string(),
        layers,
    }
}

use LayerSpec::{MaxPool, Relu};

/// The 3-block student: 64 filters 5x5, then 64 and 128 filters 3x3, each
/// followed by ReLU and 2x2 max pooling.
pub fn student_spec() -> BackboneSpec {
    BackboneSpec {
        name: "student".into(),
        role: Role::Student,
        capacity_class: 0,
        input_channels: 1,
        stages: vec![
            stage("block1", vec![conv(64, 5), Relu, MaxPool]),
            stage("block2", vec![conv(64, 3), Relu, MaxPool]),
            stage("block3", vec![conv(128, 3), Relu, MaxPool]),
        ],
        head: HeadSpec { hidden: vec![64] },
        reference_parameter_count: None,
    }
}

fn tiny_efficientnet(name: &str, widths: [usize; 5], hidden: usize) -> BackboneSpec {
    let [a, b, c, d, e] = widths;
    BackboneSpec {
        name: name.into(),
        role: Role::Teacher,
        capacity_class: 2,
        input_channels: 1,
        stages: vec![
            stage("stage1", vec![conv(a, 3), Relu, MaxPool, conv(b, 3), Relu, MaxPool]),
            stage("stage2", vec![conv(c, 3), Relu, conv(d, 3), Relu, MaxPool]),
            stage("stage3", vec![conv(e, 3), Relu]),
        ],
        head: HeadSpec { hidden: vec![hidden] },
        reference_parameter_count: None,
    }
}

pub fn tiny_b6_spec() -> BackboneSpec {
    tiny_efficientnet("tiny-b6", [32, 48, 96, 96, 192], 96)
}

pub fn tiny_b7_spec() -> BackboneSpec {
    tiny_efficientnet("tiny-b7", [40, 64, 128, 128, 256], 128)
}

pub fn tiny_densenet_spec() -> BackboneSpec {
    BackboneSpec {
        name: "tiny-densenet".into(),
        role: Role::Assistant,
        capacity_class: 1,
        input_channels: 1,
        stages: vec![
            stage(
                "dense1",
                vec![
                    conv(32, 3),
                    Relu,
                    MaxPool,
                    LayerSpec::Dense {
                        layers: 3,
                        growth: 16,
                        kernel: 3,
                    },
                ],
            ),
            stage(
                "dense2",
                vec![
                    conv(96, 1),
                    Relu,
                    MaxPool,
                    LayerSpec::Dense {
                        layers: 3,
                        growth: 24,
                        kernel: 3,
                    },
                ],
            ),
            stage(
                "dense3",
                vec![
                    conv(160, 1),
                    Relu,
                    MaxPool,
                    LayerSpec::Dense {
                        layers: 2,
                        growth: 32,
                        kernel: 3,
                    },
                ],
            ),
        ],
        head: HeadSpec { hidden: vec![64] },
        reference_parameter_count: None,
    }
}

pub fn tiny_inception_spec() -> BackboneSpec {
    let inception = |b1, b3, b5| LayerSpec::Inception {
        branch1: b1,
        branch3: b3,
        branch5: b5,
    };
    BackboneSpec {
        name: "tiny-inception".into(),
        role: Role::Teacher,
        capacity_class: 2,
        input_channels: 1,
        stages: vec![
            stage("mixed1", vec![conv(32, 3), Relu, MaxPool, inception(16, 32, 16)]),
            stage("mixed2", vec![MaxPool, inception(32, 64, 32)]),
            stage("mixed3", vec![MaxPool, inception(64, 128, 64)]),
        ],
        head: HeadSpec { hidden: vec![128] },
        reference_parameter_count: None,
    }
}

fn full_scale(name: &str, role: Role, capacity_class: u8, params: u64) -> BackboneSpec {
    BackboneSpec {
        name: name.into(),
        role,
        capacity_class,
        input_channels: 1,
        stages: Vec::new(),
        head: HeadSpec { hidden: Vec::new() },
        reference_parameter_count: Some(params),
    }
}

/// Name-indexed collection of backbone specs.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneRegistry {
    specs: Vec<BackboneSpec>,
}

impl BackboneRegistry {
    /// Desk-scale stand-ins plus the student.
    pub fn desk_scale() -> Self {
        BackboneRegistry {
            specs: vec![
                tiny_b6_spec(),
                tiny_b7_spec(),
                tiny_densenet_spec(),
                tiny_inception_spec(),
                student_spec(),
            ],
        }
    }

    /// Full-scale backbones by their commonly quoted parameter counts, plus
    /// the student. These cannot be built in-process.
    pub fn full_scale() -> Self {
        BackboneRegistry {
            specs: vec![
                full_scale("efficientnet-b6", Role::Teacher, 2, 43_000_000),
                full_scale("efficientnet-b7", Role::Teacher, 2, 66_000_000),
                full_scale("inception-v3", Role::Teacher, 2, 23_800_000),
                full_scale("densenet121", Role::Assistant, 1, 8_000_000),
                student_spec(),
            ],
        }
    }

    pub fn get(&self, name: &str) -> Result<&BackboneSpec> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Registry(name.to_string()))
    }

    pub fn specs(&self) -> &[BackboneSpec] {
        &self.specs
    }

    pub fn register(&mut self, spec: BackboneSpec) -> Result<()> {
        if self.specs.iter().any(|s| s.name == spec.name) {
            return Err(Error::Parameter(format!("backbone `{}` already registered", spec.name)));
        }
        self.specs.push(spec);
        self.check_capacity_ordering(3)
    }

    /// Every teacher has more parameters than every assistant, and every
    /// assistant more than every student.
    pub fn check_capacity_ordering(&self, class_count: usize) -> Result<()> {
        let counts = |role: Role| -> Vec<(String, u64)> {
            self.specs
                .iter()
                .filter(|s| s.role == role)
                .map(|s| (s.name.clone(), s.parameter_count(class_count)))
                .collect()
        };
        let teachers = counts(Role::Teacher);
        let assistants = counts(Role::Assistant);
        let students = counts(Role::Student);
        for (upper, lower) in [(&teachers, &assistants), (&assistants, &students)] {
            for (un, uc) in upper {
                for (ln, lc) in lower {
                    if uc <= lc {
                        return Err(Error::Parameter(format!(
                            "capacity ordering violated: {un} ({uc}) <= {ln} ({lc})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}
