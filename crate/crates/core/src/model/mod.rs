//! Sequential model IR: element types, tensor shapes, layer specifications
//! and shape inference.
//!
//! Spatial tensors are laid out channel-major, then row-major
//! (`channel, row, column`).

mod parse;
mod weights;

pub use parse::{graph_to_json, parse_model};
pub use weights::{
    load_weights, load_weights_from_entries, LayerParams, ManifestEntry, ParamData, TensorRole, WeightStore,
};

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    F32,
    I8,
}

impl ElementType {
    pub const fn byte_width(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::I8 => 1,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            ElementType::F32 => "f32",
            ElementType::I8 => "i8",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "f32" => Some(ElementType::F32),
            "i8" => Some(ElementType::I8),
            _ => None,
        }
    }
}

impl fmt::Display for ElementType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TensorShape {
    Spatial {
        channels: usize,
        height: usize,
        width: usize,
    },
    Flat {
        len: usize,
    },
}

impl TensorShape {
    pub const fn spatial(channels: usize, height: usize, width: usize) -> Self {
        TensorShape::Spatial {
            channels,
            height,
            width,
        }
    }

    pub const fn flat(len: usize) -> Self {
        TensorShape::Flat { len }
    }

    pub const fn element_count(&self) -> usize {
        match *self {
            TensorShape::Spatial {
                channels,
                height,
                width,
            } => channels * height * width,
            TensorShape::Flat { len } => len,
        }
    }

    pub const fn bytes(&self, element_type: ElementType) -> usize {
        self.element_count() * element_type.byte_width()
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, TensorShape::Spatial { .. })
    }

    /// `(channels, height, width)`; flat tensors report `(len, 1, 1)`.
    pub const fn dims(&self) -> (usize, usize, usize) {
        match *self {
            TensorShape::Spatial {
                channels,
                height,
                width,
            } => (channels, height, width),
            TensorShape::Flat { len } => (len, 1, 1),
        }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorShape::Spatial {
                channels,
                height,
                width,
            } => write!(f, "{channels}x{height}x{width}"),
            TensorShape::Flat { len } => write!(f, "{len}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl Conv2dSpec {
    pub fn weight_elements(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size * self.kernel_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct PoolSpec {
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct LinearSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub has_bias: bool,
}

impl LinearSpec {
    pub fn weight_elements(&self) -> usize {
        self.in_features * self.out_features
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d(Conv2dSpec),
    Relu,
    MaxPool2d(PoolSpec),
    Flatten,
    Linear(LinearSpec),
}

impl LayerSpec {
    pub const fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d(_) => "maxpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear(_) => "linear",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Conv2d(_) | LayerSpec::Linear(_))
    }

    /// `(weight elements, bias elements)` for parameterized layers.
    pub fn parameter_shape(&self) -> Option<(usize, usize)> {
        match self {
            LayerSpec::Conv2d(c) => Some((
                c.weight_elements(),
                if c.has_bias { c.out_channels } else { 0 },
            )),
            LayerSpec::Linear(l) => Some((
                l.weight_elements(),
                if l.has_bias { l.out_features } else { 0 },
            )),
            _ => None,
        }
    }

    pub fn has_bias(&self) -> bool {
        match self {
            LayerSpec::Conv2d(c) => c.has_bias,
            LayerSpec::Linear(l) => l.has_bias,
            _ => false,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let ctx = || format!("layer {index} ({})", self.kind());
        let positive = |field: &str, value: usize| {
            if value == 0 {
                Err(Error::NonPositiveDimension {
                    context: ctx(),
                    field: field.to_string(),
                    value: 0,
                })
            } else {
                Ok(())
            }
        };
        match self {
            LayerSpec::Conv2d(c) => {
                positive("in_channels", c.in_channels)?;
                positive("out_channels", c.out_channels)?;
                positive("kernel_size", c.kernel_size)?;
                positive("stride", c.stride)?;
            }
            LayerSpec::MaxPool2d(p) => {
                positive("kernel_size", p.kernel_size)?;
                positive("stride", p.stride)?;
                // every window must overlap at least one real element
                if p.padding >= p.kernel_size {
                    return Err(Error::InvalidField {
                        context: ctx(),
                        field: "padding".into(),
                        reason: format!(
                            "padding {} must be smaller than kernel_size {}",
                            p.padding, p.kernel_size
                        ),
                    });
                }
            }
            LayerSpec::Linear(l) => {
                positive("in_features", l.in_features)?;
                positive("out_features", l.out_features)?;
            }
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
        Ok(())
    }

    /// Output shape of this layer for the given input shape.
    pub fn output_shape(&self, index: usize, input: TensorShape) -> Result<TensorShape> {
        match *self {
            LayerSpec::Conv2d(c) => {
                let (channels, height, width) = spatial_dims(index, input, "conv2d")?;
                if channels != c.in_channels {
                    return Err(Error::IncompatibleLayer {
                        layer: index,
                        detail: format!(
                            "conv2d expects {} input channels, found {channels}",
                            c.in_channels
                        ),
                    });
                }
                let oh = window_output(index, height, c.kernel_size, c.stride, c.padding)?;
                let ow = window_output(index, width, c.kernel_size, c.stride, c.padding)?;
                Ok(TensorShape::spatial(c.out_channels, oh, ow))
            }
            LayerSpec::MaxPool2d(p) => {
                let (channels, height, width) = spatial_dims(index, input, "maxpool2d")?;
                let oh = window_output(index, height, p.kernel_size, p.stride, p.padding)?;
                let ow = window_output(index, width, p.kernel_size, p.stride, p.padding)?;
                Ok(TensorShape::spatial(channels, oh, ow))
            }
            LayerSpec::Relu => Ok(input),
            LayerSpec::Flatten => Ok(TensorShape::flat(input.element_count())),
            LayerSpec::Linear(l) => match input {
                TensorShape::Flat { len } if len == l.in_features => {
                    Ok(TensorShape::flat(l.out_features))
                }
                TensorShape::Flat { len } => Err(Error::FeatureMismatch {
                    layer: index,
                    expected: l.in_features,
                    found: len,
                }),
                TensorShape::Spatial { .. } => Err(Error::IncompatibleLayer {
                    layer: index,
                    detail: "linear after spatial layers requires a flatten".into(),
                }),
            },
        }
    }
}

fn spatial_dims(index: usize, shape: TensorShape, kind: &str) -> Result<(usize, usize, usize)> {
    match shape {
        TensorShape::Spatial {
            channels,
            height,
            width,
        } => Ok((channels, height, width)),
        TensorShape::Flat { .. } => Err(Error::IncompatibleLayer {
            layer: index,
            detail: format!("{kind} requires a spatial input, found flat {shape}"),
        }),
    }
}

/// `floor((input + 2*padding - kernel) / stride) + 1`; partial windows are dropped.
pub(crate) fn window_output(
    layer: usize,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::DimensionUnderflow {
            layer,
            detail: format!("kernel {kernel} exceeds padded input {padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Shapes of the input followed by every layer output.
pub fn infer_shapes(input: TensorShape, layers: &[LayerSpec]) -> Result<Vec<TensorShape>> {
    let mut shapes = Vec::with_capacity(layers.len() + 1);
    shapes.push(input);
    let mut current = input;
    for (index, layer) in layers.iter().enumerate() {
        current = layer.output_shape(index, current)?;
        shapes.push(current);
    }
    Ok(shapes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    pub elements: usize,
    pub bytes: usize,
}

/// A validated, shape-inferred sequential model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGraph {
    input_shape: TensorShape,
    element_type: ElementType,
    layers: Vec<LayerSpec>,
    shapes: Vec<TensorShape>,
}

impl ModelGraph {
    pub fn new(
        input_shape: TensorShape,
        element_type: ElementType,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyModel);
        }
        if input_shape.element_count() == 0 {
            return Err(Error::NonPositiveDimension {
                context: "input".into(),
                field: "shape".into(),
                value: 0,
            });
        }
        for (index, layer) in layers.iter().enumerate() {
            layer.validate(index)?;
        }
        let shapes = infer_shapes(input_shape, &layers)?;
        Ok(Self {
            input_shape,
            element_type,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    pub fn element_type(&self) -> ElementType {
        self.element_type
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Input shape followed by one shape per layer output.
    pub fn infer_shapes(&self) -> &[TensorShape] {
        &self.shapes
    }

    pub fn output_shape(&self) -> TensorShape {
        *self.shapes.last().expect("graph has at least one layer")
    }

    /// Same layers, different element type.
    pub fn with_element_type(&self, element_type: ElementType) -> Self {
        Self {
            element_type,
            ..self.clone()
        }
    }

    /// Parameter elements (weights plus declared biases) and their bytes at
    /// this graph's element width.
    pub fn parameter_count(&self) -> ParameterCount {
        let elements = self
            .layers
            .iter()
            .filter_map(LayerSpec::parameter_shape)
            .map(|(w, b)| w + b)
            .sum::<usize>();
        ParameterCount {
            elements,
            bytes: elements * self.element_type.byte_width(),
        }
    }

    pub fn parameterized_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
    }
}
