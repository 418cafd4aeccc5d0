//! Desk-scale building blocks of an interleaved local/global attention
//! decoder: dense kernels, grouped-query attention with QK-norm and sliding
//! windows, windowed KV caching and its byte accounting, a quantized memory
//! planner, sampled-logit distillation, Pan & Scan image windowing, and a
//! discoverable-extraction memorization audit.
//!
//! All numerics are `f64`. Reduced precisions only appear in the memory
//! planner's arithmetic.

pub mod attention;
pub mod audit;
pub mod autograd;
pub mod distill;
mod error;
pub mod kvcache;
pub mod memplan;
pub mod model;
pub mod panscan;
pub mod tensor;

pub use attention::{AttentionConfig, LayerKind};
pub use error::{Error, Result};
pub use kvcache::{CacheMode, KvCache};
pub use model::{Model, ModelConfig};
pub use tensor::{Matrix, RopeParams};
