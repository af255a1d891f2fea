//! Event recognition with injected object-detection features.
//!
//! A small convolutional network with a shared backbone and three RoI heads
//! (rigid objects, non-rigid regions, whole-image events), a tape-based
//! reverse-mode autodiff engine to train it, a synthetic scene generator,
//! and average-precision evaluation.

pub mod config;
pub mod detection;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod grad_check;
pub mod network;
pub mod ops;
pub mod optim;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use detection::{BBox, RoiBatch};
pub use error::{Error, Result};
pub use network::{ArchConfig, InjectionSite, NetworkParams};
pub use tape::{NodeId, Tape};
pub use tensor::{ParamGroup, Tensor};
