//! Confidence-propagating normalized convolution networks for unguided
//! sparse depth completion.
//!
//! A sparse depth map travels through the network as a signal/confidence
//! pair. Every layer produces a dense estimate from the confident samples
//! in its window and a matching output confidence, so the final prediction
//! comes with a per-pixel reliability map. Filters are constrained to be
//! non-negative through a softplus reparameterization, which keeps the
//! data path a convex combination of observed values and keeps confidences
//! meaningful end to end.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense rank-4 tensors and the primitive numeric ops;
//! * [`rng`] — seeded, platform-stable random numbers;
//! * [`nconv`] — the constrained layer: forward, confidence propagation,
//!   analytic backward, plus per-pixel reference oracles;
//! * [`network`] — the four named model variants, confidence-driven
//!   pooling/unpooling, full-model forward/backward, checkpoints;
//! * [`training`] — confidence-augmented Huber loss, ADAM, the training
//!   loop, and a finite-difference gradient-check harness;
//! * [`data`] — synthetic scenes, 16-bit depth PNG I/O, a nearest-neighbor
//!   fill baseline, and evaluation metrics;
//! * [`cli`] — the `ncdepth` command-line driver.

pub mod cli;
pub mod data;
pub mod error;
pub mod nconv;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{NcError, Result};
pub use tensor::{SignalPair, Tensor4, WeightBank};
