//! Active fault-tolerant control of a differential-drive robot.
//!
//! The crate is organised bottom-up:
//!
//! * [`dynamics`]: kinematic truth model with per-wheel radii, puncture fault
//!   profiles and noisy speed measurements.
//! * [`estimators`]: EKF and UKF over the augmented state `[x, y, psi, r_right, r_left]`.
//! * [`imm`]: interacting multiple model bank over EKF/UKF mode filters.
//! * [`pseudospectral`]: Legendre-Gauss-Lobatto nodes, weights and differentiation matrix.
//! * [`mpc`]: pseudospectral nonlinear MPC with an in-tree SQP solver, plus a
//!   linearised MPC baseline.
//! * [`harness`]: closed-loop scenarios, consistency statistics and CSV logs.

pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod imm;
pub mod mpc;
pub mod pseudospectral;

pub use dynamics::{ControlInput, FaultKind, FaultProfile, RobotParams, RobotState, SpeedMeasurement, Wheel};
pub use error::{FtcError, Result};
pub use estimators::{FilterKind, GaussianBelief, InnovationRecord, NoiseConfig};
pub use harness::{ControllerKind, FilterChoice, ScenarioConfig, SimLog};
pub use imm::{ImmBank, ModeSpec, ProcessVariant};
pub use pseudospectral::CollocationBasis;
