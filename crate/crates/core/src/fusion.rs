//! Operator fusion: Conv2d -> ReLU -> MaxPool2d chains collapse into one
//! execution unit when the pool windows do not overlap, and ReLU folds into
//! its producing Conv2d or Linear.
//!
//! The pool condition is `stride >= kernel_size` with no padding. Windows
//! then never share a convolution output, so each pooled element can be
//! produced from a running maximum without materializing the full
//! convolution map. The reversed condition (`kernel_size >= stride`) is not
//! accepted: overlapping windows share convolution outputs, which a running
//! maximum cannot reuse without buffering them.

use std::fmt;
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    Conv2dSpec, ElementType, LayerSpec, LinearSpec, ModelGraph, PoolSpec, TensorShape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// A max-pool folded into a convolution. Only built for legal pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct PoolAttachment {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolAttachment {
    fn from_legal(pool: &PoolSpec) -> Option<Self> {
        fusion_legal(pool).then_some(Self {
            kernel_size: pool.kernel_size,
            stride: pool.stride,
            padding: pool.padding,
        })
    }
}

/// `true` iff the pool's windows are disjoint and unpadded.
pub fn fusion_legal(pool: &PoolSpec) -> bool {
    pool.stride >= pool.kernel_size && pool.padding == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "unit", rename_all = "snake_case")]
pub enum ExecutionUnit {
    FusedConv {
        conv: Conv2dSpec,
        activation: Option<Activation>,
        pool: Option<PoolAttachment>,
    },
    FusedLinear {
        linear: LinearSpec,
        activation: Option<Activation>,
    },
    Standalone {
        layer: LayerSpec,
    },
}

impl ExecutionUnit {
    pub fn is_flatten(&self) -> bool {
        matches!(
            self,
            ExecutionUnit::Standalone {
                layer: LayerSpec::Flatten
            }
        )
    }
}

impl fmt::Display for ExecutionUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutionUnit::FusedConv {
                conv,
                activation,
                pool,
            } => {
                write!(
                    f,
                    "conv2d({}->{}, k={}, s={}, p={})",
                    conv.in_channels, conv.out_channels, conv.kernel_size, conv.stride, conv.padding
                )?;
                if activation.is_some() {
                    f.write_str(" + relu")?;
                }
                if let Some(p) = pool {
                    write!(f, " + maxpool(k={}, s={})", p.kernel_size, p.stride)?;
                }
                Ok(())
            }
            ExecutionUnit::FusedLinear { linear, activation } => {
                write!(f, "linear({}->{})", linear.in_features, linear.out_features)?;
                if activation.is_some() {
                    f.write_str(" + relu")?;
                }
                Ok(())
            }
            ExecutionUnit::Standalone { layer } => match layer {
                LayerSpec::MaxPool2d(p) => {
                    write!(f, "maxpool(k={}, s={}, p={})", p.kernel_size, p.stride, p.padding)
                }
                other => f.write_str(other.kind()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanStep {
    pub unit: ExecutionUnit,
    /// Source graph layers folded into this unit.
    pub layers: Range<usize>,
    pub input_shape: TensorShape,
    pub output_shape: TensorShape,
}

impl PlanStep {
    /// Index of the Conv2d/Linear layer that owns this unit's parameters.
    pub fn parameter_layer(&self) -> Option<usize> {
        match self.unit {
            ExecutionUnit::FusedConv { .. } | ExecutionUnit::FusedLinear { .. } => {
                Some(self.layers.start)
            }
            ExecutionUnit::Standalone { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecutionPlan {
    pub input_shape: TensorShape,
    pub element_type: ElementType,
    pub steps: Vec<PlanStep>,
}

impl ExecutionPlan {
    pub fn units(&self) -> impl Iterator<Item = &ExecutionUnit> {
        self.steps.iter().map(|s| &s.unit)
    }

    pub fn output_shapes(&self) -> Vec<TensorShape> {
        self.steps.iter().map(|s| s.output_shape).collect()
    }

    pub fn output_shape(&self) -> TensorShape {
        self.steps
            .last()
            .map_or(self.input_shape, |s| s.output_shape)
    }
}

/// Rewrite `graph` into fused execution units.
pub fn fuse(graph: &ModelGraph) -> Result<ExecutionPlan> {
    let layers = graph.layers();
    let shapes = graph.infer_shapes();
    let mut steps = Vec::with_capacity(layers.len());

    let follows_relu = |j: usize| matches!(layers.get(j), Some(LayerSpec::Relu));

    let mut i = 0;
    while i < layers.len() {
        let start = i;
        let unit = match layers[i] {
            LayerSpec::Conv2d(conv) => {
                i += 1;
                let activation = follows_relu(i).then(|| {
                    i += 1;
                    Activation::Relu
                });
                let pool = match layers.get(i) {
                    Some(LayerSpec::MaxPool2d(p)) => PoolAttachment::from_legal(p),
                    _ => None,
                };
                if pool.is_some() {
                    i += 1;
                }
                ExecutionUnit::FusedConv {
                    conv,
                    activation,
                    pool,
                }
            }
            LayerSpec::Linear(linear) => {
                i += 1;
                let activation = follows_relu(i).then(|| {
                    i += 1;
                    Activation::Relu
                });
                ExecutionUnit::FusedLinear { linear, activation }
            }
            LayerSpec::Relu => return Err(Error::OrphanActivation { layer: i }),
            layer @ (LayerSpec::MaxPool2d(_) | LayerSpec::Flatten) => {
                i += 1;
                ExecutionUnit::Standalone { layer }
            }
        };
        steps.push(PlanStep {
            unit,
            layers: start..i,
            input_shape: shapes[start],
            output_shape: shapes[i],
        });
    }

    Ok(ExecutionPlan {
        input_shape: graph.input_shape(),
        element_type: graph.element_type(),
        steps,
    })
}
