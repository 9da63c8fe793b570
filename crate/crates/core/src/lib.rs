//! Spectral-Galerkin laboratory for the internally controlled heat equation
//!
//! The state space is the span of the first `M` Dirichlet eigenfunctions of an
//! interval or a box, so every quantity below is an exact finite-dimensional
//! object:
//!
//! - [`spectral`]: eigenpairs, mode counting, the observation Gram matrix on the
//!   control region and the empirical spectral-inequality constant.
//! - [`feedback`]: the explicit stationary feedback `F_λ = -γ_λ P_N`, its gain
//!   constants and the radial cutoff `K_r`.
//! - [`sim`]: closed-loop integration with Lyapunov monitors.
//! - [`schedule`]: piecewise null-control schedules and their cost.
//! - [`stabilizer`]: the T-periodic finite-time stabilizing feedback and its flow.

// Guards are written `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod feedback;
pub mod fit;
mod mp;
pub mod schedule;
pub mod sim;
pub mod spectral;
pub mod stabilizer;

pub use error::{Error, Result};
pub use feedback::{CutoffShape, FeedbackParams};
pub use fit::{fit_loglinear, FitResult};
pub use schedule::{CostReport, Schedule, ScheduleKind, StopRule};
pub use sim::{GalerkinState, IntegratorConfig, IntegratorMethod, Sample, System, Trajectory};
pub use spectral::{ControlRegion, DomainKind, DomainSpec, EigenMode, GramMatrix, ModeBasis, SpectralFit};
pub use stabilizer::{FlowResult, StabilizerConfig};
