//! Model interchange document (JSON):
//!
//! ```json
//! {"input": {"c": 1, "h": 32, "w": 32}, "dtype": "f32",
//!  "layers": [{"type": "conv2d", "in_channels": 1, "out_channels": 6, "kernel_size": 5}, ...]}
//! ```
//!
//! Optional keys and their defaults: conv2d `stride` 1, `padding` 0,
//! `has_bias` true; maxpool2d `stride` = `kernel_size`, `padding` 0;
//! linear `has_bias` true. A flat input may be given as `{"len": n}`.

use serde_json::{json, Map, Value};

use super::{
    Conv2dSpec, ElementType, LayerSpec, LinearSpec, ModelGraph, PoolSpec, TensorShape,
};
use crate::error::{Error, Result};

pub fn parse_model(text: &str) -> Result<ModelGraph> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let root = doc.as_object().ok_or_else(|| Error::InvalidField {
        context: "document".into(),
        field: "<root>".into(),
        reason: "expected an object".into(),
    })?;

    let input = parse_input(required(root, "document", "input")?)?;

    let dtype = required(root, "document", "dtype")?;
    let element_type = dtype
        .as_str()
        .and_then(ElementType::from_name)
        .ok_or_else(|| Error::InvalidField {
            context: "document".into(),
            field: "dtype".into(),
            reason: format!("expected \"f32\" or \"i8\", found {dtype}"),
        })?;

    let layers = required(root, "document", "layers")?
        .as_array()
        .ok_or_else(|| Error::InvalidField {
            context: "document".into(),
            field: "layers".into(),
            reason: "expected an array".into(),
        })?;
    if layers.is_empty() {
        return Err(Error::EmptyModel);
    }
    let layers = layers
        .iter()
        .enumerate()
        .map(|(index, v)| parse_layer(index, v))
        .collect::<Result<Vec<_>>>()?;

    ModelGraph::new(input, element_type, layers)
}

fn parse_input(value: &Value) -> Result<TensorShape> {
    let ctx = "input";
    let obj = as_object(value, ctx)?;
    if obj.contains_key("len") {
        return Ok(TensorShape::flat(dimension(obj, ctx, "len", None)?));
    }
    Ok(TensorShape::spatial(
        dimension(obj, ctx, "c", None)?,
        dimension(obj, ctx, "h", None)?,
        dimension(obj, ctx, "w", None)?,
    ))
}

fn parse_layer(index: usize, value: &Value) -> Result<LayerSpec> {
    let ctx = format!("layer {index}");
    let obj = as_object(value, &ctx)?;
    let kind = required(obj, &ctx, "type")?
        .as_str()
        .ok_or_else(|| Error::InvalidField {
            context: ctx.clone(),
            field: "type".into(),
            reason: "expected a string".into(),
        })?;

    let layer = match kind {
        "conv2d" => {
            check_keys(
                obj,
                &ctx,
                &["in_channels", "out_channels", "kernel_size", "stride", "padding", "has_bias"],
            )?;
            LayerSpec::Conv2d(Conv2dSpec {
                in_channels: dimension(obj, &ctx, "in_channels", None)?,
                out_channels: dimension(obj, &ctx, "out_channels", None)?,
                kernel_size: dimension(obj, &ctx, "kernel_size", None)?,
                stride: dimension(obj, &ctx, "stride", Some(1))?,
                padding: padding(obj, &ctx)?,
                has_bias: flag(obj, &ctx, "has_bias", true)?,
            })
        }
        "maxpool2d" => {
            check_keys(obj, &ctx, &["kernel_size", "stride", "padding"])?;
            let kernel_size = dimension(obj, &ctx, "kernel_size", None)?;
            LayerSpec::MaxPool2d(PoolSpec {
                kernel_size,
                stride: dimension(obj, &ctx, "stride", Some(kernel_size))?,
                padding: padding(obj, &ctx)?,
            })
        }
        "linear" => {
            check_keys(obj, &ctx, &["in_features", "out_features", "has_bias"])?;
            LayerSpec::Linear(LinearSpec {
                in_features: dimension(obj, &ctx, "in_features", None)?,
                out_features: dimension(obj, &ctx, "out_features", None)?,
                has_bias: flag(obj, &ctx, "has_bias", true)?,
            })
        }
        "relu" => {
            check_keys(obj, &ctx, &[])?;
            LayerSpec::Relu
        }
        "flatten" => {
            check_keys(obj, &ctx, &[])?;
            LayerSpec::Flatten
        }
        other => {
            return Err(Error::UnknownLayerType {
                index,
                kind: other.to_string(),
            })
        }
    };
    Ok(layer)
}

fn as_object<'a>(value: &'a Value, ctx: &str) -> Result<&'a Map<String, Value>> {
    value.as_object().ok_or_else(|| Error::InvalidField {
        context: ctx.to_string(),
        field: "<self>".into(),
        reason: "expected an object".into(),
    })
}

fn required<'a>(obj: &'a Map<String, Value>, ctx: &str, field: &str) -> Result<&'a Value> {
    obj.get(field).ok_or_else(|| Error::MissingField {
        context: ctx.to_string(),
        field: field.to_string(),
    })
}

fn check_keys(obj: &Map<String, Value>, ctx: &str, allowed: &[&str]) -> Result<()> {
    match obj
        .keys()
        .find(|k| k.as_str() != "type" && !allowed.contains(&k.as_str()))
    {
        Some(k) => Err(Error::InvalidField {
            context: ctx.to_string(),
            field: k.clone(),
            reason: "unrecognized key".into(),
        }),
        None => Ok(()),
    }
}

fn integer(obj: &Map<String, Value>, ctx: &str, field: &str) -> Result<Option<i64>> {
    match obj.get(field) {
        None => Ok(None),
        Some(v) => v.as_i64().map(Some).ok_or_else(|| Error::InvalidField {
            context: ctx.to_string(),
            field: field.to_string(),
            reason: format!("expected an integer, found {v}"),
        }),
    }
}

/// A count that must be >= 1.
fn dimension(
    obj: &Map<String, Value>,
    ctx: &str,
    field: &str,
    default: Option<usize>,
) -> Result<usize> {
    let value = match (integer(obj, ctx, field)?, default) {
        (Some(v), _) => v,
        (None, Some(d)) => return Ok(d),
        (None, None) => {
            return Err(Error::MissingField {
                context: ctx.to_string(),
                field: field.to_string(),
            })
        }
    };
    if value < 1 {
        return Err(Error::NonPositiveDimension {
            context: ctx.to_string(),
            field: field.to_string(),
            value,
        });
    }
    Ok(value as usize)
}

fn padding(obj: &Map<String, Value>, ctx: &str) -> Result<usize> {
    match integer(obj, ctx, "padding")? {
        None => Ok(0),
        Some(v) if v < 0 => Err(Error::InvalidField {
            context: ctx.to_string(),
            field: "padding".into(),
            reason: format!("padding must be >= 0, found {v}"),
        }),
        Some(v) => Ok(v as usize),
    }
}

fn flag(obj: &Map<String, Value>, ctx: &str, field: &str, default: bool) -> Result<bool> {
    match obj.get(field) {
        None => Ok(default),
        Some(v) => v.as_bool().ok_or_else(|| Error::InvalidField {
            context: ctx.to_string(),
            field: field.to_string(),
            reason: format!("expected a boolean, found {v}"),
        }),
    }
}

/// Serialize a graph back into the interchange document.
pub fn graph_to_json(graph: &ModelGraph) -> Value {
    let input = match graph.input_shape() {
        TensorShape::Spatial {
            channels,
            height,
            width,
        } => json!({"c": channels, "h": height, "w": width}),
        TensorShape::Flat { len } => json!({ "len": len }),
    };
    let layers: Vec<Value> = graph
        .layers()
        .iter()
        .map(|layer| serde_json::to_value(layer).expect("layer specs serialize"))
        .collect();
    json!({
        "input": input,
        "dtype": graph.element_type().name(),
        "layers": layers,
    })
}
