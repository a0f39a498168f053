//! Sequential neural-network training with backpropagation, feedback
//! alignment, direct feedback alignment and its memory-efficient variant,
//! instrumented by an allocation ledger.

pub mod data;
pub mod error;
pub mod feedback;
pub mod layers;
pub mod ledger;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use feedback::{FeedbackMode, FeedbackPolicy, FeedbackSet};
pub use model::{Model, ModelSpec};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{FillDistribution, Tensor};
pub use trainers::{Algorithm, Precision, TrainConfig};
