//! Set-to-one embedding aggregation: a recurrent context-aware attention
//! pooler with scalar-quality and average-pooling baselines, a triplet-loss
//! trainer with hand-derived gradients, synthetic benchmark data, and
//! biometric identification / verification protocols.
//!
//! The core is generic over the scalar type via [`numerics::Real`]; the
//! aliases below pin the two supported widths. All on-disk formats store f32
//! little-endian regardless of the compute type.

pub mod aggregator;
pub mod data;
pub mod error;
pub mod eval;
pub mod model_io;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

/// f64 is the default compute type; gradients and training always use it.
pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type Template64 = aggregator::FrameEmbeddingSet<f64>;
pub type Template32 = aggregator::FrameEmbeddingSet<f32>;
pub type Representation64 = aggregator::TemplateRepresentation<f64>;
pub type Representation32 = aggregator::TemplateRepresentation<f32>;
pub type AggregatorParams64 = aggregator::AggregatorParams<f64>;
pub type AggregatorParams32 = aggregator::AggregatorParams<f32>;
