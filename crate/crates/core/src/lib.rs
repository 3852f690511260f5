//! Universal adversarial perturbations: generation by clipped-loss stochastic
//! gradient ascent, the iterative DeepFool baseline, and universal adversarial
//! training by alternating or simultaneous min-max updates.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
mod serde_inf;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
