//! Numerical laboratory for SDEs and transport equations with rough drift
//! and additive Brownian noise.

pub mod drift;
pub mod error;
pub mod field;
pub mod flow;
pub mod harness;
pub mod kernel;
pub mod noise;
pub mod parabolic;
pub mod quad;
pub mod stats;
pub mod transport;

pub use drift::{holder_seminorm_estimate, mollify_drift, DivergenceMode, DriftSpec};
pub use error::{LabError, Result};
pub use field::{BoundaryCondition, GridMeta, SpaceTimeField};
pub use noise::{sample_brownian, wong_zakai_smooth, BrownianPath, PathSpec, SmoothingKernel};
