//! Reward alignment of diffusion models as variational EM.
//!
//! The E-step samples reward-tilted denoising trajectories with soft-Q
//! guided proposals and importance resampling; the M-step distills them into
//! the policy by maximum likelihood. Both a continuous Gaussian-mixture world
//! and a masked discrete sequence world are provided, with exact dynamic
//! programming oracles for small discrete instances.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod continuous;
pub mod discrete;
pub mod error;
pub mod estep;
pub mod eval;
pub mod mstep;
pub mod oracle;
pub mod numkit;
pub mod par;
pub mod policy;
pub mod rewards;
pub mod runner;
pub mod sched;
pub mod softq;

pub use error::{Error, Result};
