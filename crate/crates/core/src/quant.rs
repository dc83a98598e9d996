//! Symmetric per-tensor INT8 quantization.
//!
//! * Weights: `scale = max|w| / 127` (1 for an all-zero tensor),
//!   `q = clamp(round(w / scale), -127, 127)`, rounding half away from zero.
//! * Biases: 32-bit integers at scale `weight_scale * input_scale`.
//! * Activations: one scale per graph tensor, calibrated as
//!   `max|a| / 127` over sample inputs. Only the network input and
//!   Conv2d/Linear outputs are calibrated; ReLU, MaxPool2d and Flatten
//!   outputs inherit the scale of their input because they never change
//!   the value scale.
//! * Execution: 32-bit integer accumulation, then
//!   `clamp(round(acc * multiplier), -127, 127)` with
//!   `multiplier = (s_in * s_w / s_out) as f32`, computed once per layer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::fusion::PlanStep;
use crate::interp::kernels::NoProbe;
use crate::interp::{execute_step, run_naive_trace, Tensor};
use crate::model::{
    ElementType, LayerParams, ModelGraph, ParamData, TensorShape, WeightStore,
};

pub const QMAX: i32 = 127;
pub const MIN_ACTIVATION_SCALE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    weight_scales: BTreeMap<usize, f64>,
    /// One per graph tensor: input, then each layer output.
    activation_scales: Vec<f64>,
}

impl QuantParams {
    /// Expand calibrated producer scales to every graph tensor.
    pub fn assemble(
        graph: &ModelGraph,
        input_scale: f64,
        output_scales: &BTreeMap<usize, f64>,
        weight_scales: BTreeMap<usize, f64>,
    ) -> Result<Self> {
        let mut activation_scales = Vec::with_capacity(graph.layers().len() + 1);
        activation_scales.push(input_scale);
        for (index, layer) in graph.layers().iter().enumerate() {
            let scale = if layer.is_parameterized() {
                *output_scales
                    .get(&index)
                    .ok_or_else(|| Error::MissingScale(format!("layer {index} output activation")))?
            } else {
                *activation_scales.last().expect("input scale pushed")
            };
            activation_scales.push(scale);
        }
        let params = Self {
            weight_scales,
            activation_scales,
        };
        params.validate(graph)?;
        Ok(params)
    }

    pub(crate) fn validate(&self, graph: &ModelGraph) -> Result<()> {
        let positive = |s: f64| s.is_finite() && s > 0.0;
        if self.activation_scales.len() != graph.layers().len() + 1 {
            return Err(Error::MissingScale(format!(
                "expected {} activation scales, found {}",
                graph.layers().len() + 1,
                self.activation_scales.len()
            )));
        }
        if let Some(i) = self.activation_scales.iter().position(|&s| !positive(s)) {
            return Err(Error::MissingScale(format!("activation tensor {i}")));
        }
        for (index, layer) in graph.layers().iter().enumerate() {
            if layer.is_parameterized() {
                match self.weight_scales.get(&index) {
                    Some(&s) if positive(s) => {}
                    _ => return Err(Error::MissingScale(format!("layer {index} weight"))),
                }
            } else if self.activation_scales[index + 1] != self.activation_scales[index] {
                return Err(Error::MissingScale(format!(
                    "layer {index} ({}) must keep its input scale",
                    layer.kind()
                )));
            }
        }
        Ok(())
    }

    pub fn input_scale(&self) -> f64 {
        self.activation_scales[0]
    }

    /// Scale of graph tensor `tensor` (0 = input, `i + 1` = output of layer `i`).
    pub fn activation_scale(&self, tensor: usize) -> f64 {
        self.activation_scales[tensor]
    }

    pub fn activation_scales(&self) -> &[f64] {
        &self.activation_scales
    }

    pub fn weight_scale(&self, layer: usize) -> f64 {
        self.weight_scales[&layer]
    }

    pub fn weight_scales(&self) -> &BTreeMap<usize, f64> {
        &self.weight_scales
    }

    /// Requantization multiplier for parameterized layer `layer`.
    pub fn multiplier(&self, layer: usize) -> f32 {
        requant_multiplier(
            self.activation_scales[layer],
            self.weight_scale(layer),
            self.activation_scales[layer + 1],
        )
    }
}

pub fn requant_multiplier(input_scale: f64, weight_scale: f64, output_scale: f64) -> f32 {
    (input_scale * weight_scale / output_scale) as f32
}

/// `clamp(round_half_away(acc * multiplier), -127, 127)`.
///
/// The product is formed in `f64` and rounded without libm so that emitted
/// C reproduces it bit for bit.
pub fn requantize(acc: i32, multiplier: f32) -> i8 {
    let x = f64::from(acc) * f64::from(multiplier);
    if x >= QMAX as f64 {
        return QMAX as i8;
    }
    if x <= -QMAX as f64 {
        return -QMAX as i8;
    }
    let mut t = x as i32;
    let frac = x - f64::from(t);
    if frac >= 0.5 {
        t += 1;
    } else if frac <= -0.5 {
        t -= 1;
    }
    t as i8
}

/// Quantize one tensor: returns `(values, scale)`.
pub fn quantize_tensor(values: &[f32]) -> (Vec<i8>, f64) {
    let max_abs = values
        .iter()
        .map(|v| f64::from(v.abs()))
        .fold(0.0f64, f64::max);
    if max_abs == 0.0 {
        return (vec![0; values.len()], 1.0);
    }
    let q = values
        .iter()
        .map(|&v| {
            (f64::from(v) * QMAX as f64 / max_abs)
                .round()
                .clamp(-QMAX as f64, QMAX as f64) as i8
        })
        .collect();
    (q, max_abs / QMAX as f64)
}

pub fn dequantize(values: &[i8], scale: f64) -> Vec<f64> {
    values.iter().map(|&q| f64::from(q) * scale).collect()
}

/// Quantize an FP32 tensor with a known scale (activations).
pub fn quantize_with_scale(values: &[f32], scale: f64) -> Vec<i8> {
    values
        .iter()
        .map(|&v| {
            (f64::from(v) / scale)
                .round()
                .clamp(-QMAX as f64, QMAX as f64) as i8
        })
        .collect()
}

/// Calibrated activation scales: the network input and every Conv2d/Linear
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub input_scale: f64,
    pub output_scales: BTreeMap<usize, f64>,
}

pub fn calibrate_activations(
    graph: &ModelGraph,
    store: &WeightStore,
    samples: &[Tensor],
) -> Result<Calibration> {
    if samples.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if graph.element_type() != ElementType::F32 {
        return Err(Error::ElementTypeMismatch {
            expected: "f32",
            found: graph.element_type().name(),
        });
    }
    let mut max_abs = vec![0.0f64; graph.layers().len() + 1];
    for sample in samples {
        let trace = run_naive_trace(graph, store, sample)?;
        for (slot, tensor) in max_abs.iter_mut().zip(&trace) {
            let m = tensor
                .as_f32()
                .expect("fp32 trace")
                .iter()
                .map(|v| f64::from(v.abs()))
                .fold(0.0f64, f64::max);
            *slot = slot.max(m);
        }
    }
    let scale = |m: f64| (m / QMAX as f64).max(MIN_ACTIVATION_SCALE);
    Ok(Calibration {
        input_scale: scale(max_abs[0]),
        output_scales: graph
            .parameterized_layers()
            .map(|(index, _)| (index, scale(max_abs[index + 1])))
            .collect(),
    })
}

/// Quantize an FP32 model. Returns the INT8 graph and a store carrying
/// its [`QuantParams`].
pub fn quantize_weights(
    graph: &ModelGraph,
    store: &WeightStore,
    calibration: &Calibration,
) -> Result<(ModelGraph, WeightStore)> {
    if store.element_type() != ElementType::F32 {
        return Err(Error::ElementTypeMismatch {
            expected: "f32",
            found: store.element_type().name(),
        });
    }
    let mut weight_scales = BTreeMap::new();
    let mut weights = BTreeMap::new();
    for (&index, params) in store.layers() {
        let w = params.weight.as_f32().expect("fp32 store");
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: index,
                tensor: "weight",
            });
        }
        let (q, scale) = quantize_tensor(w);
        weight_scales.insert(index, scale);
        weights.insert(index, q);
    }

    let q_graph = graph.with_element_type(ElementType::I8);
    let quant = QuantParams::assemble(
        &q_graph,
        calibration.input_scale,
        &calibration.output_scales,
        weight_scales,
    )?;

    let mut layers = BTreeMap::new();
    for (index, q) in weights {
        let bias = match &store.layer(index).expect("same keys").bias {
            Some(b) => {
                let b = b.as_f32().expect("fp32 store");
                if b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        layer: index,
                        tensor: "bias",
                    });
                }
                let bias_scale = quant.weight_scale(index) * quant.activation_scale(index);
                Some(ParamData::I32(
                    b.iter()
                        .map(|&v| {
                            (f64::from(v) / bias_scale)
                                .round()
                                .clamp(i32::MIN as f64, i32::MAX as f64)
                                as i32
                        })
                        .collect(),
                ))
            }
            None => None,
        };
        layers.insert(
            index,
            LayerParams {
                weight: ParamData::I8(q),
                bias,
            },
        );
    }
    let q_store = WeightStore::new(&q_graph, layers, Some(quant))?;
    Ok((q_graph, q_store))
}

/// Quantize an FP32 input tensor at the model's input scale.
pub fn quantize_input(input: &Tensor, quant: &QuantParams) -> Result<Tensor> {
    let data = input.as_f32().ok_or(Error::ElementTypeMismatch {
        expected: "f32",
        found: "i8",
    })?;
    let scale = quant.input_scale();
    Tensor::from_i8(input.shape(), quantize_with_scale(data, scale), scale)
}

/// Execute a single INT8 plan step on a fresh output tensor.
pub fn int8_unit_execute(step: &PlanStep, store: &WeightStore, input: &Tensor) -> Result<Tensor> {
    let quant = store
        .quant()
        .ok_or_else(|| Error::MissingScale("int8 weight store".into()))?;
    let data = input.as_i8().ok_or(Error::ElementTypeMismatch {
        expected: "i8",
        found: "f32",
    })?;
    if input.shape() != step.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "unit expects {}, got {}",
            step.input_shape,
            input.shape()
        )));
    }
    let out_shape: TensorShape = step.output_shape;
    let mut out = vec![0i8; out_shape.element_count()];
    execute_step(step, store, data, &mut out, &mut NoProbe)?;
    Tensor::from_i8(out_shape, out, quant.activation_scale(step.layers.end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn max_abs_normalization() {
        let (q, scale) = quantize_tensor(&[-1.0, 0.5, 1.0]);
        assert_eq!(q, [-127, 64, 127]);
        assert_eq!(scale, 1.0 / 127.0);
    }

    #[test]
    fn all_zero_tensor() {
        let (q, scale) = quantize_tensor(&[0.0; 5]);
        assert_eq!(q, [0; 5]);
        assert_eq!(scale, 1.0);
    }

    #[test]
    fn requantize_rounding_and_clamp() {
        assert_eq!(requantize(5, 0.5), 3); // 2.5 -> 3
        assert_eq!(requantize(-5, 0.5), -3);
        assert_eq!(requantize(3, 0.5), 2); // 1.5 -> 2
        assert_eq!(requantize(1, 0.25), 0);
        assert_eq!(requantize(1_000_000, 1.0), 127);
        assert_eq!(requantize(-1_000_000, 1.0), -127);
        assert_eq!(requantize(i32::MAX, 1.0), 127);
    }

    #[test]
    fn requantize_matches_f64_round() {
        for acc in -2000..2000 {
            for m in [0.013f32, 0.1, 0.37, 1.0 / 3.0] {
                let expected = (f64::from(acc) * f64::from(m)).round().clamp(-127.0, 127.0) as i8;
                assert_eq!(requantize(acc, m), expected, "acc={acc} m={m}");
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_half_scale(values in prop::collection::vec(-50.0f32..50.0, 1..200)) {
            let (q, scale) = quantize_tensor(&values);
            for (d, &w) in dequantize(&q, scale).iter().zip(&values) {
                prop_assert!((d - f64::from(w)).abs() <= scale / 2.0);
            }
        }

        #[test]
        fn symmetric(values in prop::collection::vec(-50.0f32..50.0, 1..200)) {
            let neg: Vec<f32> = values.iter().map(|v| -v).collect();
            let (q, s) = quantize_tensor(&values);
            let (qn, sn) = quantize_tensor(&neg);
            prop_assert_eq!(s, sn);
            prop_assert!(q.iter().zip(&qn).all(|(a, b)| *a == -*b));
        }

        #[test]
        fn range_is_symmetric(values in prop::collection::vec(-1e6f32..1e6, 1..100)) {
            let (q, _) = quantize_tensor(&values);
            prop_assert!(q.iter().all(|&v| v != i8::MIN));
        }
    }
}
