//! A from-scratch spiking neural network engine built around a hybrid
//! training pipeline: constrained analog pre-training, conversion to a
//! spiking network via per-layer threshold balancing, and fine-tuning with
//! spike-timing-dependent backpropagation through time.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and layer primitives with exact adjoints
//! - [`neuron`]: leaky integrate-and-fire dynamics and surrogate gradients
//! - [`encoding`]: Poisson rate coding of images into spike trains
//! - [`network`]: architecture graphs, state init, forward passes
//! - [`conversion`]: weight copy and sequential threshold balancing
//! - [`training`]: analog pre-training, BPTT with surrogate gradients,
//!   truncated BPTT, and optimizers
//! - [`analysis`]: spike statistics and the energy-delay proxy
//! - [`io`]: dataset loaders, binary checkpoints, and run configuration
//! - [`verify`]: independent reference implementations (finite differences,
//!   a scalar unrolled backpropagation oracle) used by tests and the
//!   `gradcheck` command

pub mod analysis;
pub mod conversion;
pub mod data;
pub mod encoding;
pub mod error;
pub mod io;
pub mod network;
pub mod neuron;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Result, SnnError};
pub use tensor::{Scalar, Tensor};
