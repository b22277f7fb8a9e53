//! Budget-conditioned trajectory planning for offline constrained MDPs.
//!
//! A denoising diffusion model learns the behavior trajectory distribution of
//! an offline dataset; learned reward and cost estimators steer its reverse
//! process toward high-return trajectories whose cost stays within a budget
//! supplied at inference time. A receding-horizon planner tracks the
//! remaining budget across an episode. For small discrete problems the
//! [`oracle`] module computes the constrained optimal trajectory distribution
//! and the associated error bounds exactly.

pub mod api;
pub mod artifacts;
pub mod cmdp;
pub mod diffusion;
pub mod error;
pub mod guide;
pub mod harness;
pub mod io;
pub mod nn;
pub mod oracle;
pub mod planner;
pub mod rng;
pub mod trajectory;

pub use error::{Error, Result};
