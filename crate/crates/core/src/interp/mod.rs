//! Host reference interpreter.
//!
//! [`run_naive`] executes the source graph layer by layer with a fresh
//! buffer per layer. [`run_fused`] executes the fused plan inside the two
//! planned ping-pong buffers. Both use the same accumulation order, so
//! their FP32 results are bitwise identical and their INT8 results equal.

mod fused;
pub(crate) mod kernels;
mod naive;

pub use fused::{run_fused, run_fused_instrumented, LivenessReport, SCALAR_SLOTS};
pub(crate) use fused::execute_step;
pub use naive::{
    conv2d_naive, flatten, linear_naive, maxpool2d_naive, relu, run_naive, run_naive_trace,
};

use crate::error::{Error, Result};
use crate::model::{ElementType, TensorShape};

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

/// Activation tensor in channel-major, row-major order. INT8 tensors carry
/// their symmetric scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: TensorShape,
    data: TensorData,
    scale: Option<f64>,
}

impl Tensor {
    pub fn from_f32(shape: TensorShape, data: Vec<f32>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self {
            shape,
            data: TensorData::F32(data),
            scale: None,
        })
    }

    pub fn from_i8(shape: TensorShape, data: Vec<i8>, scale: f64) -> Result<Self> {
        check_len(shape, data.len())?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::MissingScale(format!("tensor scale {scale}")));
        }
        Ok(Self {
            shape,
            data: TensorData::I8(data),
            scale: Some(scale),
        })
    }

    pub fn zeros(shape: TensorShape, element_type: ElementType, scale: f64) -> Self {
        let n = shape.element_count();
        match element_type {
            ElementType::F32 => Self::from_f32(shape, vec![0.0; n]).expect("length matches"),
            ElementType::I8 => Self::from_i8(shape, vec![0; n], scale).expect("length matches"),
        }
    }

    /// Decode a little-endian byte image of a tensor.
    pub fn from_le_bytes(
        shape: TensorShape,
        element_type: ElementType,
        bytes: &[u8],
        scale: Option<f64>,
    ) -> Result<Self> {
        let expected = shape.bytes(element_type);
        if bytes.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: bytes.len(),
            });
        }
        match element_type {
            ElementType::F32 => Self::from_f32(
                shape,
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                    .collect(),
            ),
            ElementType::I8 => Self::from_i8(
                shape,
                bytes.iter().map(|&b| b as i8).collect(),
                scale.ok_or_else(|| Error::MissingScale("int8 tensor".into()))?,
            ),
        }
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as u8).collect(),
        }
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn scale(&self) -> Option<f64> {
        self.scale
    }

    pub fn element_type(&self) -> ElementType {
        match self.data {
            TensorData::F32(_) => ElementType::F32,
            TensorData::I8(_) => ElementType::I8,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.element_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I8(_) => None,
        }
    }

    pub fn as_i8(&self) -> Option<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    /// Same data under a different shape with the same element count.
    pub fn reshaped(mut self, shape: TensorShape) -> Result<Self> {
        check_len(shape, self.len())?;
        self.shape = shape;
        Ok(self)
    }

    /// Element values as `f64`, dequantized for INT8.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::I8(v) => {
                let s = self.scale.unwrap_or(1.0);
                v.iter().map(|&x| f64::from(x) * s).collect()
            }
        }
    }

    /// Equality of shape and element bit patterns (so `-0.0 != 0.0` and
    /// NaN payloads are compared exactly).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape.element_count() == other.shape.element_count()
            && match (&self.data, &other.data) {
                (TensorData::F32(a), TensorData::F32(b)) => a
                    .iter()
                    .zip(b)
                    .all(|(x, y)| x.to_bits() == y.to_bits()),
                (TensorData::I8(a), TensorData::I8(b)) => a == b,
                _ => false,
            }
    }
}

fn check_len(shape: TensorShape, len: usize) -> Result<()> {
    if shape.element_count() != len {
        return Err(Error::ShapeMismatch(format!(
            "shape {shape} holds {} elements, data has {len}",
            shape.element_count()
        )));
    }
    Ok(())
}

/// Index of the largest logit; ties go to the lowest index.
pub fn classify(logits: &Tensor) -> Result<usize> {
    fn argmax<T: PartialOrd + Copy>(v: &[T]) -> Option<usize> {
        let (first, rest) = v.split_first()?;
        let mut best = (0, *first);
        for (i, &x) in rest.iter().enumerate() {
            if x > best.1 {
                best = (i + 1, x);
            }
        }
        Some(best.0)
    }
    match logits.data() {
        TensorData::F32(v) => argmax(v),
        TensorData::I8(v) => argmax(v),
    }
    .ok_or(Error::EmptyTensor)
}
