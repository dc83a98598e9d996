//! Camera-frame preprocessing: invert, then zero anything dark.

use crate::error::{Error, Result};
use crate::interp::Tensor;
use crate::model::{ElementType, TensorShape};
use crate::quant::{quantize_with_scale, QuantParams};

/// Inverted values below this become 0.
pub const BLACK_THRESHOLD: u8 = 100;

/// `255 - p`, then values under [`BLACK_THRESHOLD`] are forced to 0.
/// The threshold is applied to the inverted value.
pub fn preprocess_pixel(p: u8) -> u8 {
    let inverted = 255 - p;
    if inverted < BLACK_THRESHOLD {
        0
    } else {
        inverted
    }
}

/// Preprocess a raw 8-bit grayscale frame of the model's input size.
pub fn preprocess_frame(raw: &[u8], shape: TensorShape) -> Result<Vec<u8>> {
    let expected = shape.element_count();
    if raw.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: raw.len(),
        });
    }
    Ok(raw.iter().map(|&p| preprocess_pixel(p)).collect())
}

/// Scale already preprocessed pixels into a model input: `p / 255` for
/// FP32, then quantized at the input scale for INT8.
pub fn pixels_to_input(
    pixels: &[u8],
    shape: TensorShape,
    element_type: ElementType,
    quant: Option<&QuantParams>,
) -> Result<Tensor> {
    let expected = shape.element_count();
    if pixels.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            found: pixels.len(),
        });
    }
    let scaled: Vec<f32> = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    match element_type {
        ElementType::F32 => Tensor::from_f32(shape, scaled),
        ElementType::I8 => {
            let quant = quant.ok_or_else(|| Error::MissingScale("model input".into()))?;
            let scale = quant.input_scale();
            Tensor::from_i8(shape, quantize_with_scale(&scaled, scale), scale)
        }
    }
}

/// Raw frame to model input in one step.
pub fn image_to_input(
    raw: &[u8],
    shape: TensorShape,
    element_type: ElementType,
    quant: Option<&QuantParams>,
) -> Result<Tensor> {
    pixels_to_input(&preprocess_frame(raw, shape)?, shape, element_type, quant)
}
