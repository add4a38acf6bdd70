//! Spiking neural networks with leaky integrate-and-fire neurons.
//!
//! Hard-reset, soft-reset and adaptive-reset (AR-LIF) neurons, a small
//! reverse-mode tape with a rectangular spike surrogate, feed-forward
//! spiking networks, TET-style training, IDX loading and spike encoders,
//! and synaptic-operation / energy accounting.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod network;
pub mod neurons;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
