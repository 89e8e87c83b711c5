//! Unit scaling for computational graphs.
//!
//! Ops are wrapped with a forward factor `α` and per-input backward factors
//! `β_i` chosen so that activations, weights and gradients start training with
//! roughly unit standard deviation. The crate contains the pieces needed to
//! build, check and train such graphs on a CPU, plus a simulator for the
//! low-precision number formats that motivate the technique:
//!
//! - [`floatsim`]: FP32/TF32/BF16/FP16/FP8 emulation and quantisation SNR.
//! - [`tensor`]: a small dense `f64` tensor with stats and exponent histograms.
//! - [`graph`]: scaled computational graphs, cut-edges, constraint resolution
//!   and checks that a graph behaves as a single scaled op.
//! - [`opslib`]: the table of unit-scaling factors and builder helpers.
//! - [`train`]: optimisers, toy models and the mixed-precision training loop.

pub mod floatsim;
pub mod graph;
pub mod opslib;
pub mod rng;
pub mod tensor;
pub mod train;

pub use floatsim::{FloatFormat, OverflowPolicy};
pub use rng::Rng;
pub use tensor::{ExponentHistogram, ScaleStats, Tensor};
