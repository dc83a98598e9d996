//! Deploy small sequential CNNs to microcontrollers.
//!
//! A model goes through these stages:
//!
//! 1. [`model::parse_model`] and [`model::load_weights`] read the interchange
//!    document and weight blob into a validated [`ModelGraph`] and
//!    [`WeightStore`].
//! 2. [`fusion::fuse`] folds conv/activation/pool runs into execution units.
//! 3. [`planner::pingpong_plan`] assigns unit outputs to two static buffers.
//! 4. [`quant`] optionally converts the model to INT8.
//! 5. [`emit::emit`] writes freestanding C, and [`emit::verify_emitted`]
//!    checks it against [`interp::run_fused`] on the host.

pub mod emit;
pub mod error;
pub mod fusion;
pub mod interp;
pub mod model;
pub mod planner;
pub mod preprocess;
pub mod quant;

pub use error::{Error, Result};
pub use fusion::{fuse, ExecutionPlan, ExecutionUnit};
pub use interp::{classify, run_fused, run_naive, Tensor};
pub use model::{ElementType, LayerSpec, ModelGraph, TensorShape, WeightStore};
pub use planner::{memory_report, pingpong_plan, BufferPlan, MemoryReport};
