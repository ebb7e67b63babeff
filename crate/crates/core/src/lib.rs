//! One-stream tracking in plain Rust.
//!
//! Template and search-region patches are embedded into a single token
//! sequence and pushed through a stack of transformer encoder layers, so
//! feature extraction and template/search relation modeling happen in the
//! same self-attention operations. Low-similarity search tokens are
//! discarded in-network at configurable layers and scattered back to their
//! grid positions before an anchor-free convolutional head decodes a box.
//!
//! Everything runs on a small dense-tensor library with a reverse-mode
//! gradient tape (`tensor`, `tape`), verified against finite differences.
//! The `macs` module prices the encoder analytically so the effect of
//! candidate elimination on compute can be measured without a stopwatch.

pub mod boxes;
pub mod config;
pub mod elimination;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod head;
pub mod loss;
pub mod macs;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod ppm;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tracker;
pub mod train;
pub mod weights;

pub use boxes::{BBox, Frame};
pub use config::{ModelConfig, ScoringStrategy, TrainConfig};
pub use elimination::SimilarityScore;
pub use embed::{EmbedderParams, ImagePatchGrid, PatchRole, TokenState};
pub use encoder::AttentionRecord;
pub use error::{Error, Result};
pub use head::HeadMaps;
pub use loss::LossWeights;
pub use model::{Model, ModelParams};
pub use optim::AdamW;
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
pub use tracker::TrackerState;
