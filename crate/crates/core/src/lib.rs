// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod gloss;
pub mod harness;
pub mod interference;
pub mod interventions;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod sae;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
