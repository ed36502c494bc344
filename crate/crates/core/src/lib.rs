//! Self-supervised channel charting from CIR measurements with TDoA losses,
//! NLoS masking and displacement fusion.
//!
//! The crate covers the whole chain: scenario simulation
//! ([`scenario`]), CIR preprocessing into TDoA-preserving normalized tensors
//! ([`pipeline`]), LoS/NLoS masking ([`nlos`]), the convolutional embedding
//! network ([`model`]) and its training losses ([`trainer`]), a PSO TDoA
//! baseline ([`pso`]), evaluation metrics ([`eval`]) and file formats plus
//! the experiment runner ([`io`], [`config`], [`experiment`]).

pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod model;
pub mod nlos;
pub mod pipeline;
pub mod pso;
pub mod rng;
pub mod scalar;
pub mod scenario;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

/// Embedding network at training precision.
pub type EmbeddingModel = model::ChartModel<f32>;
/// Gradients matching [`EmbeddingModel`].
pub type Gradients = model::Gradients<f32>;
/// Metrics report in double precision.
pub type MetricsReport = eval::MetricsReport;
