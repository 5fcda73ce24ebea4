//! Joint quantile and distribution regression.
//!
//! Two heads on one backbone: a quantile surface `Q(tau, x)` and a
//! conditional CDF `F(y, x)`, trained to be each other's inverse. The crate
//! carries its own reverse-mode tape (dense `f64` tensors, eager op
//! recording), the eleven-term annealed loss stack, Adam with a 2:1
//! feature/regression update schedule, and blended Q-direct / F-inverted
//! inference. Every random draw comes from a seeded, per-purpose ChaCha
//! stream so runs reproduce bit-for-bit.

pub mod autodiff;
pub mod data;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optimizer;
pub mod sampler;
pub mod training;

pub use autodiff::tape::{AdError, Gradients, Tape, Var};
pub use autodiff::tensor::{Tensor2, TensorError};
pub use metrics::EvalReport;
pub use network::{ArchSpec, DdrModel, InjectionMode, Standardization};
pub use training::{TrainConfig, TrainMode, TrainOutcome, TrainReport};
