//! Conversion of threshold-ReLU networks into low-latency integrate-and-fire
//! spiking networks.
//!
//! The crate covers the whole path from a trained source network to a
//! costed spiking network:
//!
//! - [`netcore`]: tensors, bias-free dense/conv/pool/dropout layers and the
//!   feed-forward driver.
//! - [`dnn`]: threshold ReLU (`clip(x, 0, μ)` with a trainable ceiling),
//!   SGD training and per-layer pre-activation percentile statistics.
//! - [`snn`]: time-stepped IF/LIF simulation with direct input encoding,
//!   output-scaled spikes, the closed-form staircase activation and
//!   surrogate-gradient fine-tuning through time.
//! - [`convert`]: threshold balancing, the bias-shift baseline and the
//!   percentile-driven search for threshold scale `α` and spike scale `β`.
//! - [`analysis`]: plug-in estimators of the expected post-activation gap
//!   between a source layer and its spiking replacement.
//! - [`energy`]: spike counts, MAC/AC tallies and energy models.
//!
//! Data-parallel loops run on rayon when the default `parallel` feature is
//! enabled; every reduction happens in a fixed order so results do not
//! depend on the thread count.

pub mod analysis;
pub mod arch;
pub mod convert;
pub mod data;
pub mod dnn;
pub mod energy;
pub mod error;
pub mod netcore;
pub mod par;
pub mod snn;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use netcore::{Layer, LayerKind, NetworkSpec, Topology};
pub use par::Execution;
pub use tensor::Tensor;
