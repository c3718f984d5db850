//! Reference implementations of batch normalization and three
//! weight-normalization schemes on a minimal from-scratch network stack,
//! together with the diagnostics needed to track per-layer output norms,
//! weight coherence, and training stability.

pub mod autodiff;
pub mod conv;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod network;
pub mod ops;
pub mod optim;
pub mod snapshot;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Shape, Tensor};
