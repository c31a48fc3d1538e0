//! Depth-to-pressure estimation for in-bed posture: physics utilities,
//! anthropometric conditioning, a Brownian-bridge diffusion, baselines,
//! metrics and data handling.

pub mod bridge;
pub mod data;
pub mod error;
pub mod ils;
pub mod metrics;
pub mod models;
pub mod physics;
pub mod pipeline;

pub use error::{Error, Result};
