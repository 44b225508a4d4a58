//! Hybrid frontal-view to bird's-eye-view feature transformation.
//!
//! The crate lifts a monocular camera image into a metric top-down grid of
//! per-class occupancy probabilities with two cooperating branches: a
//! camera-model-based branch that warps height-flattened features through
//! the pinhole model, and a camera-model-free branch that learns the view
//! mapping densely. The branches are tied together by a mutual-learning
//! loss. Around the network sit a procedural driving-scene generator, the
//! evaluation metrics, and a deterministic training / ablation harness.

pub mod autograd;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod synthworld;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
