//! Feature-space unsupervised domain adaptation for semantic segmentation,
//! at desk scale.
//!
//! This crate is `no_std` (it needs `alloc`) and holds every pure piece of
//! the lab: a reverse-mode autodiff engine, a small encoder/decoder
//! segmentation network, the adaptation objectives over encoder features,
//! a procedural two-domain scene renderer, the optimization loop, and the
//! evaluation diagnostics. File formats and the command line live in the
//! `udafeat` crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod segnet;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use labels::{LabelMap, IGNORE_LABEL};
pub use losses::{LossReport, LossWeights, ObjectiveFlags};
pub use segnet::{SegNet, SegNetConfig, SegNetParams};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, Trainer};
