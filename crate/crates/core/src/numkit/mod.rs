//! Minimal numeric kernel: dense matrices, shift-stable reductions, seeded
//! counter-based RNG streams, a small feed-forward network with hand-written
//! backpropagation and an adaptive-moment optimizer.

pub mod adam;
pub mod linalg;
pub mod mlp;
pub mod reduce;
pub mod rng;
pub mod tol;

pub use adam::Adam;
pub use linalg::Mat;
pub use mlp::{Activation, Mlp};
pub use reduce::{log_mean_exp, log_sum_exp, sample_categorical, softmax};
pub use rng::RngStream;
