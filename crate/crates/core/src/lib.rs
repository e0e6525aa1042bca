//! Hold/shift turn-taking detection at desk scale.
//!
//! The crate covers the whole path from two-channel frame-level voice
//! activity to a trained turn-taking classifier:
//!
//! - [`labels`]: future-window consensus labeling and fixed-length context
//!   construction from VAD.
//! - [`frontend`]: frozen toy encoders producing the linguistic (512-d) and
//!   acoustic (256-d) feature streams, plus the feature-file format.
//! - [`model`]: cross-attention fusion, causal ALiBi transformer, attention
//!   pooling and the sigmoid head, with exact analytic gradients.
//! - [`inference`]: frontend plus model for single contexts.
//! - [`train`]: AdamW, cosine learning-rate schedule and the training loop.
//! - [`attribution`]: gradient-activation contribution ratios and temporal
//!   attribution.
//! - [`streaming`]: simulated real-time replay with latency measurement.
//! - [`synth`]: seeded synthetic dialogue generator with a planted,
//!   learnable hold/shift signature.

pub mod attribution;
pub mod checkpoint;
pub mod dataset;
pub mod frontend;
pub mod inference;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod streaming;
pub mod synth;
pub mod train;
pub mod vad;

pub use scalar::Real;
pub use vad::{Channel, FrameVadSequence, Recording, RecordingKind, TurnLabel};
