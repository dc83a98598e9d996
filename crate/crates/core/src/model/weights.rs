//! Parameter storage and the weight manifest + blob interchange.
//!
//! The manifest is a JSON list of entries
//! `{"layer_index", "tensor", "offset", "elements", "scale"}`. The blob is
//! little-endian: FP32 tensors as IEEE-754 binary32, INT8 weights as
//! two's-complement bytes and INT8 biases as 32-bit integers. INT8
//! manifests additionally carry activation scales as `"input"` (model
//! input) and `"output"` (output of the named Conv2d/Linear layer) entries
//! with no extent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ElementType, ModelGraph};
use crate::error::{Error, Result};
use crate::quant::QuantParams;

#[derive(Debug, Clone, PartialEq)]
pub enum ParamData {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl ParamData {
    pub fn len(&self) -> usize {
        match self {
            ParamData::F32(v) => v.len(),
            ParamData::I8(v) => v.len(),
            ParamData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn byte_width(&self) -> usize {
        match self {
            ParamData::F32(_) | ParamData::I32(_) => 4,
            ParamData::I8(_) => 1,
        }
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.byte_width()
    }

    const fn type_name(&self) -> &'static str {
        match self {
            ParamData::F32(_) => "f32",
            ParamData::I8(_) => "i8",
            ParamData::I32(_) => "i32",
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ParamData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ParamData::I8(v) => v.iter().map(|&x| x as u8).collect(),
            ParamData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            ParamData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match self {
            ParamData::I8(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match self {
            ParamData::I32(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: ParamData,
    pub bias: Option<ParamData>,
}

/// Parameters for every Conv2d/Linear layer of one graph, keyed by layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStore {
    element_type: ElementType,
    layers: BTreeMap<usize, LayerParams>,
    quant: Option<QuantParams>,
}

impl WeightStore {
    /// Validates coverage, element counts and storage types against `graph`.
    /// INT8 stores must carry quantization parameters; FP32 stores must not.
    pub fn new(
        graph: &ModelGraph,
        layers: BTreeMap<usize, LayerParams>,
        quant: Option<QuantParams>,
    ) -> Result<Self> {
        let element_type = graph.element_type();
        let (weight_type, bias_type) = match element_type {
            ElementType::F32 => ("f32", "f32"),
            ElementType::I8 => ("i8", "i32"),
        };

        for &index in layers.keys() {
            if !graph.layers().get(index).is_some_and(|l| l.is_parameterized()) {
                return Err(Error::UnexpectedTensor {
                    layer: index,
                    tensor: "weight".into(),
                });
            }
        }
        for (index, layer) in graph.parameterized_layers() {
            let (weight_elems, bias_elems) = layer.parameter_shape().expect("parameterized");
            let params = layers.get(&index).ok_or(Error::MissingTensor {
                layer: index,
                tensor: "weight",
            })?;
            check_tensor(index, "weight", &params.weight, weight_elems, weight_type)?;
            match (&params.bias, layer.has_bias()) {
                (Some(bias), true) => check_tensor(index, "bias", bias, bias_elems, bias_type)?,
                (None, true) => {
                    return Err(Error::MissingTensor {
                        layer: index,
                        tensor: "bias",
                    })
                }
                (Some(_), false) => {
                    return Err(Error::UnexpectedTensor {
                        layer: index,
                        tensor: "bias".into(),
                    })
                }
                (None, false) => {}
            }
        }

        match (element_type, &quant) {
            (ElementType::F32, Some(_)) => {
                return Err(Error::ElementTypeMismatch {
                    expected: "f32 (no quantization parameters)",
                    found: "quantized",
                })
            }
            (ElementType::I8, None) => {
                return Err(Error::MissingScale("int8 weight store".into()))
            }
            (ElementType::I8, Some(q)) => q.validate(graph)?,
            (ElementType::F32, None) => {}
        }

        Ok(Self {
            element_type,
            layers,
            quant,
        })
    }

    pub fn element_type(&self) -> ElementType {
        self.element_type
    }

    pub fn layer(&self, index: usize) -> Option<&LayerParams> {
        self.layers.get(&index)
    }

    pub fn layers(&self) -> &BTreeMap<usize, LayerParams> {
        &self.layers
    }

    pub fn quant(&self) -> Option<&QuantParams> {
        self.quant.as_ref()
    }

    /// Number of stored tensors (weights plus biases).
    pub fn tensor_count(&self) -> usize {
        self.layers
            .values()
            .map(|p| 1 + usize::from(p.bias.is_some()))
            .sum()
    }

    /// Bytes actually stored. Equals the graph's parameter byte count except
    /// for INT8 biases, which occupy 4 bytes each.
    pub fn stored_bytes(&self) -> usize {
        self.layers
            .values()
            .map(|p| p.weight.byte_len() + p.bias.as_ref().map_or(0, ParamData::byte_len))
            .sum()
    }

    /// Serialize into manifest entries plus a concatenated blob, in layer
    /// order with each weight followed by its bias.
    pub fn to_manifest(&self) -> (Vec<ManifestEntry>, Vec<u8>) {
        let mut entries = Vec::new();
        let mut blob = Vec::with_capacity(self.stored_bytes());
        if let Some(q) = &self.quant {
            entries.push(ManifestEntry::activation(TensorRole::Input, 0, q.input_scale()));
        }
        for (&index, params) in &self.layers {
            let weight_scale = self.quant.as_ref().map(|q| q.weight_scale(index));
            entries.push(ManifestEntry {
                layer_index: index,
                tensor: TensorRole::Weight,
                offset: blob.len(),
                elements: params.weight.len(),
                scale: weight_scale,
            });
            blob.extend(params.weight.to_le_bytes());
            if let Some(bias) = &params.bias {
                let bias_scale = self
                    .quant
                    .as_ref()
                    .map(|q| q.weight_scale(index) * q.activation_scale(index));
                entries.push(ManifestEntry {
                    layer_index: index,
                    tensor: TensorRole::Bias,
                    offset: blob.len(),
                    elements: bias.len(),
                    scale: bias_scale,
                });
                blob.extend(bias.to_le_bytes());
            }
            if let Some(q) = &self.quant {
                entries.push(ManifestEntry::activation(
                    TensorRole::Output,
                    index,
                    q.activation_scale(index + 1),
                ));
            }
        }
        (entries, blob)
    }

    pub fn manifest_json(&self) -> (String, Vec<u8>) {
        let (entries, blob) = self.to_manifest();
        let text = serde_json::to_string_pretty(&entries).expect("manifest serializes");
        (text, blob)
    }
}

fn check_tensor(
    layer: usize,
    tensor: &'static str,
    data: &ParamData,
    expected: usize,
    type_name: &'static str,
) -> Result<()> {
    if data.type_name() != type_name {
        return Err(Error::ElementTypeMismatch {
            expected: type_name,
            found: data.type_name(),
        });
    }
    if data.len() != expected {
        return Err(Error::CountMismatch {
            layer,
            tensor,
            expected,
            found: data.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Weight,
    Bias,
    Input,
    Output,
}

impl TensorRole {
    const fn name(self) -> &'static str {
        match self {
            TensorRole::Weight => "weight",
            TensorRole::Bias => "bias",
            TensorRole::Input => "input",
            TensorRole::Output => "output",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer_index: usize,
    pub tensor: TensorRole,
    #[serde(default)]
    pub offset: usize,
    #[serde(default)]
    pub elements: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl ManifestEntry {
    fn activation(role: TensorRole, layer_index: usize, scale: f64) -> Self {
        Self {
            layer_index,
            tensor: role,
            offset: 0,
            elements: 0,
            scale: Some(scale),
        }
    }

    fn byte_width(&self, element_type: ElementType) -> usize {
        match self.tensor {
            TensorRole::Weight => element_type.byte_width(),
            TensorRole::Bias => 4,
            TensorRole::Input | TensorRole::Output => 0,
        }
    }

    fn byte_len(&self, element_type: ElementType) -> usize {
        self.elements * self.byte_width(element_type)
    }
}

/// Build a [`WeightStore`] for `graph` from a manifest document and blob.
pub fn load_weights(graph: &ModelGraph, manifest: &str, blob: &[u8]) -> Result<WeightStore> {
    let entries: Vec<ManifestEntry> = serde_json::from_str(manifest).map_err(|e| Error::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    load_weights_from_entries(graph, &entries, blob)
}

pub fn load_weights_from_entries(
    graph: &ModelGraph,
    entries: &[ManifestEntry],
    blob: &[u8],
) -> Result<WeightStore> {
    let element_type = graph.element_type();

    let declared: usize = entries.iter().map(|e| e.byte_len(element_type)).sum();
    if declared != blob.len() {
        return Err(Error::BlobLengthMismatch {
            expected: declared,
            found: blob.len(),
        });
    }

    let mut weights: BTreeMap<usize, ParamData> = BTreeMap::new();
    let mut biases: BTreeMap<usize, ParamData> = BTreeMap::new();
    let mut input_scale = None;
    let mut weight_scales = BTreeMap::new();
    let mut output_scales = BTreeMap::new();

    for entry in entries {
        let index = entry.layer_index;
        let role = entry.tensor;
        let duplicate = || Error::UnexpectedTensor {
            layer: index,
            tensor: format!("duplicate {}", role.name()),
        };
        match role {
            TensorRole::Input => {
                let scale = require_scale(entry, "input activation")?;
                if input_scale.replace(scale).is_some() {
                    return Err(duplicate());
                }
                continue;
            }
            TensorRole::Output => {
                let scale = require_scale(entry, &format!("layer {index} output activation"))?;
                if output_scales.insert(index, scale).is_some() {
                    return Err(duplicate());
                }
                continue;
            }
            TensorRole::Weight | TensorRole::Bias => {}
        }

        let tensor: &'static str = role.name();
        let layer = graph
            .layers()
            .get(index)
            .filter(|l| l.is_parameterized())
            .ok_or_else(|| Error::UnexpectedTensor {
                layer: index,
                tensor: tensor.to_string(),
            })?;
        let (weight_elems, bias_elems) = layer.parameter_shape().expect("parameterized");
        let expected = if role == TensorRole::Weight {
            weight_elems
        } else {
            if !layer.has_bias() {
                return Err(Error::UnexpectedTensor {
                    layer: index,
                    tensor: tensor.to_string(),
                });
            }
            bias_elems
        };
        if entry.elements != expected {
            return Err(Error::CountMismatch {
                layer: index,
                tensor,
                expected,
                found: entry.elements,
            });
        }

        let start = entry.offset;
        let end = start
            .checked_add(entry.byte_len(element_type))
            .filter(|&end| end <= blob.len())
            .ok_or(Error::ExtentOverflow {
                layer: index,
                tensor,
                start,
                end: start.saturating_add(entry.byte_len(element_type)),
                blob_len: blob.len(),
            })?;
        let bytes = &blob[start..end];

        let data = match (role, element_type) {
            (TensorRole::Weight, ElementType::I8) => {
                ParamData::I8(bytes.iter().map(|&b| b as i8).collect())
            }
            (TensorRole::Bias, ElementType::I8) => ParamData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            (_, ElementType::F32) => ParamData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            _ => unreachable!("activation roles handled above"),
        };

        let slot = if role == TensorRole::Weight {
            if element_type == ElementType::I8 {
                weight_scales.insert(index, require_scale(entry, &format!("layer {index} weight"))?);
            }
            &mut weights
        } else {
            &mut biases
        };
        if slot.insert(index, data).is_some() {
            return Err(duplicate());
        }
    }

    for (index, layer) in graph.parameterized_layers() {
        if !weights.contains_key(&index) {
            return Err(Error::MissingTensor {
                layer: index,
                tensor: "weight",
            });
        }
        if layer.has_bias() && !biases.contains_key(&index) {
            return Err(Error::MissingTensor {
                layer: index,
                tensor: "bias",
            });
        }
    }

    let layers = weights
        .into_iter()
        .map(|(index, weight)| {
            let bias = biases.remove(&index);
            (index, LayerParams { weight, bias })
        })
        .collect();

    let quant = match element_type {
        ElementType::F32 => None,
        ElementType::I8 => {
            let input_scale =
                input_scale.ok_or_else(|| Error::MissingScale("input activation".into()))?;
            Some(QuantParams::assemble(
                graph,
                input_scale,
                &output_scales,
                weight_scales,
            )?)
        }
    };

    WeightStore::new(graph, layers, quant)
}

fn require_scale(entry: &ManifestEntry, what: &str) -> Result<f64> {
    match entry.scale {
        Some(s) if s.is_finite() && s > 0.0 => Ok(s),
        Some(s) => Err(Error::InvalidField {
            context: what.to_string(),
            field: "scale".into(),
            reason: format!("scale must be positive and finite, found {s}"),
        }),
        None => Err(Error::MissingScale(what.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model;

    const LENET: &str = include_str!("../../../../models/lenet5.json");

    fn lenet_blob(graph: &ModelGraph) -> (String, Vec<u8>) {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut blob = Vec::new();
        for (index, layer) in graph.parameterized_layers() {
            let (w, b) = layer.parameter_shape().unwrap();
            for (tensor, n) in [(TensorRole::Weight, w), (TensorRole::Bias, b)] {
                entries.push(ManifestEntry {
                    layer_index: index,
                    tensor,
                    offset,
                    elements: n,
                    scale: None,
                });
                for i in 0..n {
                    blob.extend(((index * 1000 + i) as f32 * 1e-3).to_le_bytes());
                }
                offset += 4 * n;
            }
        }
        (serde_json::to_string(&entries).unwrap(), blob)
    }

    #[test]
    fn loads_lenet() {
        let graph = parse_model(LENET).unwrap();
        let (manifest, blob) = lenet_blob(&graph);
        assert_eq!(blob.len(), 246824);
        let store = load_weights(&graph, &manifest, &blob).unwrap();
        assert_eq!(store.tensor_count(), 10);
        assert_eq!(store.stored_bytes(), graph.parameter_count().bytes);
        let conv2 = store.layer(3).unwrap();
        assert_eq!(conv2.weight.as_f32().unwrap()[1], 3001.0f32 * 1e-3);

        let (manifest2, blob2) = store.manifest_json();
        assert_eq!(blob2, blob);
        assert_eq!(load_weights(&graph, &manifest2, &blob2).unwrap(), store);
    }

    #[test]
    fn blob_one_byte_short() {
        let graph = parse_model(LENET).unwrap();
        let (manifest, mut blob) = lenet_blob(&graph);
        blob.pop();
        let err = load_weights(&graph, &manifest, &blob).unwrap_err();
        assert!(err.to_string().starts_with("blob length mismatch"), "{err}");
    }

    #[test]
    fn missing_bias_entry() {
        let graph = parse_model(LENET).unwrap();
        let (manifest, blob) = lenet_blob(&graph);
        let mut entries: Vec<ManifestEntry> = serde_json::from_str(&manifest).unwrap();
        let pos = entries
            .iter()
            .position(|e| e.layer_index == 3 && e.tensor == TensorRole::Bias)
            .unwrap();
        let removed = entries.remove(pos);
        // keep the blob consistent with the declared extents
        let mut trimmed = blob[..removed.offset].to_vec();
        trimmed.extend(&blob[removed.offset + removed.elements * 4..]);
        for e in entries.iter_mut().filter(|e| e.offset > removed.offset) {
            e.offset -= removed.elements * 4;
        }
        let err = load_weights_from_entries(&graph, &entries, &trimmed).unwrap_err();
        assert!(matches!(
            err,
            Error::MissingTensor {
                layer: 3,
                tensor: "bias"
            }
        ));
        assert!(err.to_string().starts_with("missing tensor"));
    }

    #[test]
    fn extent_overflow() {
        let graph = parse_model(LENET).unwrap();
        let (manifest, blob) = lenet_blob(&graph);
        let mut entries: Vec<ManifestEntry> = serde_json::from_str(&manifest).unwrap();
        entries[0].offset = blob.len() - 8;
        let err = load_weights_from_entries(&graph, &entries, &blob).unwrap_err();
        assert!(matches!(err, Error::ExtentOverflow { layer: 0, .. }));
    }

    #[test]
    fn count_mismatch() {
        let graph = parse_model(LENET).unwrap();
        let (manifest, blob) = lenet_blob(&graph);
        let mut entries: Vec<ManifestEntry> = serde_json::from_str(&manifest).unwrap();
        // shift one element from conv1 weight into its bias: total extent unchanged
        entries[0].elements -= 1;
        entries[1].elements += 1;
        let err = load_weights_from_entries(&graph, &entries, &blob).unwrap_err();
        assert!(matches!(err, Error::CountMismatch { layer: 0, .. }));
    }

    #[test]
    fn int8_requires_scales() {
        let graph = parse_model(LENET).unwrap().with_element_type(ElementType::I8);
        let mut entries = Vec::new();
        let mut offset = 0;
        for (index, layer) in graph.parameterized_layers() {
            let (w, b) = layer.parameter_shape().unwrap();
            entries.push(ManifestEntry {
                layer_index: index,
                tensor: TensorRole::Weight,
                offset,
                elements: w,
                scale: Some(0.01),
            });
            offset += w;
            entries.push(ManifestEntry {
                layer_index: index,
                tensor: TensorRole::Bias,
                offset,
                elements: b,
                scale: None,
            });
            offset += 4 * b;
        }
        let blob = vec![0u8; offset];
        let err = load_weights_from_entries(&graph, &entries, &blob).unwrap_err();
        assert!(matches!(err, Error::MissingScale(_)), "{err}");
    }
}
