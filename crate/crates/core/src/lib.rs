//! Two-stage trajectory planning toolkit.
//!
//! Planning is split into a cheap stage and a careful stage: an
//! autoregressive sequence model produces a feasible state/returns-to-go
//! trajectory, and a conditional denoising-diffusion model then refines it
//! with a handful of classifier-free-guided reverse steps. An inverse
//! dynamics model turns the first planned transition into an executable
//! action. Everything runs on a small self-contained f64 tensor engine so
//! results are deterministic and checkable on a laptop.

pub mod ar;
pub mod data;
pub mod diffusion;
pub mod envs;
pub mod error;
pub mod invdyn;
pub mod nn;
pub mod planner;
pub mod rng;

pub use error::{CoreError, Result};
