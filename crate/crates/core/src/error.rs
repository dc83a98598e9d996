use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("empty model")]
    EmptyModel,

    #[error("layer {index}: unknown layer type `{kind}`")]
    UnknownLayerType { index: usize, kind: String },

    #[error("{context}: missing required field `{field}`")]
    MissingField { context: String, field: String },

    #[error("{context}: field `{field}` has invalid value: {reason}")]
    InvalidField {
        context: String,
        field: String,
        reason: String,
    },

    #[error("{context}: non-positive dimension `{field}` = {value}")]
    NonPositiveDimension {
        context: String,
        field: String,
        value: i64,
    },

    #[error("layer {layer}: dimension underflow ({detail})")]
    DimensionUnderflow { layer: usize, detail: String },

    #[error("layer {layer}: expected {expected} input features, found {found}")]
    FeatureMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("layer {layer}: {detail}")]
    IncompatibleLayer { layer: usize, detail: String },

    #[error("missing tensor: layer {layer} {tensor}")]
    MissingTensor { layer: usize, tensor: &'static str },

    #[error("unexpected tensor: layer {layer} {tensor}")]
    UnexpectedTensor { layer: usize, tensor: String },

    #[error("blob length mismatch: manifest declares {expected} bytes, blob has {found}")]
    BlobLengthMismatch { expected: usize, found: usize },

    #[error("extent overflow: layer {layer} {tensor} spans {start}..{end} of a {blob_len}-byte blob")]
    ExtentOverflow {
        layer: usize,
        tensor: &'static str,
        start: usize,
        end: usize,
        blob_len: usize,
    },

    #[error("count mismatch: layer {layer} {tensor} expects {expected} elements, manifest declares {found}")]
    CountMismatch {
        layer: usize,
        tensor: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("element type mismatch: expected {expected}, found {found}")]
    ElementTypeMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("layer {layer}: orphan activation (ReLU must follow Conv2d or Linear)")]
    OrphanActivation { layer: usize },

    #[error("plan has no execution units")]
    EmptyPlan,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in layer {layer} {tensor}")]
    NonFinite { layer: usize, tensor: &'static str },

    #[error("calibration requires at least one sample")]
    EmptyCalibration,

    #[error("missing quantization scale for {0}")]
    MissingScale(String),

    #[error("internal: buffer {buffer} holds {capacity} elements, unit {unit} needs {needed}")]
    BufferTooSmall {
        buffer: char,
        unit: usize,
        capacity: usize,
        needed: usize,
    },

    #[error("cannot classify an empty tensor")]
    EmptyTensor,

    #[error("input size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("toolchain unavailable: {}", .0.display())]
    ToolchainUnavailable(PathBuf),

    #[error("compilation failed:\n{0}")]
    CompileFailed(String),

    #[error("harness failed: {0}")]
    Harness(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
