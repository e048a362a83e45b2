//! Online identification of manipulator inertia, Coriolis and gravity terms
//! with three parallel neural networks trained by Lyapunov-derived update
//! laws with a dead-zone robust modification.
//!
//! The crate is organized bottom-up:
//!
//! - [`plant`]: analytic ground-truth manipulator, RK4 integrator and
//!   excitation references.
//! - [`network`]: the three subnets, term assembly and weight Jacobians.
//! - [`residuals`]: torque and structural residuals, the weighted stacked
//!   error and the modified-error filter.
//! - [`learner`]: hyperparameters, dead-zone gate, update law and the
//!   Lyapunov monitor.
//! - [`estimation`]: per-joint constant-acceleration Kalman filters.
//! - [`control`]: proportional, PD and inverse-dynamics controllers and the
//!   closed-loop identification run.
//! - [`experiments`]: configuration, scenarios and artifact emission.
//! - [`plot`], [`spectral`]: SVG charts and coherence estimates.

pub mod control;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod learner;
pub mod network;
pub mod plant;
pub mod plot;
pub mod residuals;
pub mod spectral;

pub use error::{Error, Result};

/// Formats a float with 17 significant digits, enough to round-trip any
/// `f64` exactly.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
