//! Extended and unscented Kalman filters over the augmented robot state
//! `[x, y, psi, r_right, r_left]` with a speed-only measurement.
//!
//! Filters are value-semantic: every predict/update takes a belief and
//! returns a new one. The model is supplied through [`FilterModel`] so the
//! same filter code runs on the robot and on small linear test systems.

mod ekf;
mod ukf;

pub use ekf::{ekf_predict, ekf_update};
pub use ukf::{sigma_points, ukf_predict, ukf_update, SigmaSet, DEFAULT_KAPPA};

use nalgebra::{Matrix5, RowVector5, SymmetricEigen, Vector5};

use crate::dynamics::{ControlInput, RobotParams, RobotState, NOMINAL_HALF_TRACK, NOMINAL_RADIUS};
use crate::error::{FtcError, Result};

pub const STATE_DIM: usize = 5;

pub type StateVector = Vector5<f64>;
pub type StateMatrix = Matrix5<f64>;
pub type MeasurementRow = RowVector5<f64>;

/// Index of each component in [`StateVector`].
pub mod idx {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const PSI: usize = 2;
    pub const R_RIGHT: usize = 3;
    pub const R_LEFT: usize = 4;
}

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterKind {
    Ekf,
    Ukf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: StateVector,
    pub cov: StateMatrix,
}

impl GaussianBelief {
    /// Build a belief, symmetrizing the covariance and rejecting non-PSD input.
    pub fn new(mean: StateVector, cov: StateMatrix) -> Result<Self> {
        if (cov - cov.transpose()).amax() > SYMMETRY_TOL * cov.amax().max(1.0) {
            return Err(FtcError::InvalidArgument("covariance is not symmetric".into()));
        }
        let cov = symmetrize(&cov);
        check_psd(&cov)?;
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(FtcError::InvalidArgument("belief mean is not finite".into()));
        }
        Ok(Self { mean, cov })
    }

    /// Initial belief for a robot at `pose` with the given radii and the
    /// standard initial covariance `diag(0.5^2, 0.5^2, (pi/180)^2, 0.5^2, 0.5^2)`.
    pub fn initial(pose: &RobotState, r_right: f64, r_left: f64) -> Self {
        Self {
            mean: StateVector::new(pose.x, pose.y, pose.psi, r_right, r_left),
            cov: initial_covariance(),
        }
    }

    pub fn pose(&self) -> RobotState {
        RobotState::new(self.mean[idx::X], self.mean[idx::Y], self.mean[idx::PSI])
    }

    pub fn radii(&self) -> (f64, f64) {
        (self.mean[idx::R_RIGHT], self.mean[idx::R_LEFT])
    }

    pub fn variances(&self) -> [f64; STATE_DIM] {
        let d = self.cov.diagonal();
        [d[0], d[1], d[2], d[3], d[4]]
    }
}

pub fn initial_covariance() -> StateMatrix {
    let deg = std::f64::consts::PI / 180.0;
    StateMatrix::from_diagonal(&StateVector::new(0.25, 0.25, deg * deg, 0.25, 0.25))
}

/// Process and measurement noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    pub q: StateMatrix,
    /// Speed measurement variance ((m/s)^2).
    pub r: f64,
}

impl NoiseConfig {
    pub fn new(q: StateMatrix, r: f64) -> Result<Self> {
        if !(r > 0.0) {
            return Err(FtcError::InvalidArgument(format!("measurement variance must be positive, got {r}")));
        }
        check_psd(&symmetrize(&q))?;
        Ok(Self { q, r })
    }

    /// `Q = diag((5dt)^2, (5dt)^2, (0.1dt)^2, (2dt)^2, (2dt)^2)`, `R = 0.5^2`.
    pub fn standard(dt: f64) -> Self {
        let sq = |v: f64| (v * dt) * (v * dt);
        Self {
            q: StateMatrix::from_diagonal(&StateVector::new(sq(5.0), sq(5.0), sq(0.1), sq(2.0), sq(2.0))),
            r: 0.25,
        }
    }
}

/// Innovation and its predicted variance for one speed update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnovationRecord {
    pub nu: f64,
    pub s: f64,
    pub t: f64,
}

impl InnovationRecord {
    pub fn normalized_squared(&self) -> f64 {
        self.nu * self.nu / self.s
    }
}

/// `(-2 sqrt(S), +2 sqrt(S))`.
pub fn two_sigma_bounds(rec: &InnovationRecord) -> Result<(f64, f64)> {
    if !(rec.s > 0.0) {
        return Err(FtcError::InvalidArgument(format!("innovation variance must be positive, got {}", rec.s)));
    }
    let half = 2.0 * rec.s.sqrt();
    Ok((-half, half))
}

/// Discrete-time model consumed by the filters.
pub trait FilterModel {
    fn propagate(&self, x: &StateVector, u: &ControlInput) -> StateVector;
    fn process_jacobian(&self, x: &StateVector, u: &ControlInput) -> StateMatrix;
    fn observe(&self, x: &StateVector, u: &ControlInput) -> f64;
    fn observation_jacobian(&self, x: &StateVector, u: &ControlInput) -> MeasurementRow;
}

/// How the radius states evolve between filter ticks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RadiusDynamics {
    /// Constant mean, drift absorbed by the process noise.
    RandomWalk,
    /// Reset to fixed hypothesised radii every step.
    Anchored { r_right: f64, r_left: f64 },
    /// Right radius anchored; left radius deflating at `rate` down to `floor`.
    RampLeft { r_right: f64, rate: f64, floor: f64 },
}

/// Euler-discretised robot kinematics with the radii carried as states.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotModel {
    pub half_track: f64,
    pub dt: f64,
    pub radii: RadiusDynamics,
}

impl RobotModel {
    pub fn new(dt: f64) -> Self {
        Self {
            half_track: NOMINAL_HALF_TRACK,
            dt,
            radii: RadiusDynamics::RandomWalk,
        }
    }

    pub fn with_radii(self, radii: RadiusDynamics) -> Self {
        Self { radii, ..self }
    }
}

impl Default for RobotModel {
    fn default() -> Self {
        Self::new(0.01)
    }
}

/// One Euler step of the augmented state; kinematics use the state's own radii.
pub fn process_model(mean: &StateVector, u: &ControlInput, model: &RobotModel) -> StateVector {
    model.propagate(mean, u)
}

/// Predicted speed `(r_right w_right + r_left w_left) / 2` from the state radii.
pub fn measurement_model(mean: &StateVector, u: &ControlInput) -> f64 {
    0.5 * (mean[idx::R_RIGHT] * u.omega_right + mean[idx::R_LEFT] * u.omega_left)
}

impl FilterModel for RobotModel {
    fn propagate(&self, x: &StateVector, u: &ControlInput) -> StateVector {
        let (rr, rl) = (x[idx::R_RIGHT], x[idx::R_LEFT]);
        let v = 0.5 * (rr * u.omega_right + rl * u.omega_left);
        let w = (rr * u.omega_right - rl * u.omega_left) / (2.0 * self.half_track);
        let (s, c) = x[idx::PSI].sin_cos();
        let (rr_next, rl_next) = match self.radii {
            RadiusDynamics::RandomWalk => (rr, rl),
            RadiusDynamics::Anchored { r_right, r_left } => (r_right, r_left),
            RadiusDynamics::RampLeft { r_right, rate, floor } => (r_right, (rl - rate * self.dt).max(floor)),
        };
        StateVector::new(
            x[idx::X] + self.dt * v * c,
            x[idx::Y] + self.dt * v * s,
            x[idx::PSI] + self.dt * w,
            rr_next,
            rl_next,
        )
    }

    fn process_jacobian(&self, x: &StateVector, u: &ControlInput) -> StateMatrix {
        let (rr, rl) = (x[idx::R_RIGHT], x[idx::R_LEFT]);
        let v = 0.5 * (rr * u.omega_right + rl * u.omega_left);
        let (s, c) = x[idx::PSI].sin_cos();
        let dt = self.dt;
        let mut f = StateMatrix::identity();
        f[(idx::X, idx::PSI)] = -dt * v * s;
        f[(idx::X, idx::R_RIGHT)] = dt * 0.5 * u.omega_right * c;
        f[(idx::X, idx::R_LEFT)] = dt * 0.5 * u.omega_left * c;
        f[(idx::Y, idx::PSI)] = dt * v * c;
        f[(idx::Y, idx::R_RIGHT)] = dt * 0.5 * u.omega_right * s;
        f[(idx::Y, idx::R_LEFT)] = dt * 0.5 * u.omega_left * s;
        f[(idx::PSI, idx::R_RIGHT)] = dt * u.omega_right / (2.0 * self.half_track);
        f[(idx::PSI, idx::R_LEFT)] = -dt * u.omega_left / (2.0 * self.half_track);
        match self.radii {
            RadiusDynamics::RandomWalk => {}
            RadiusDynamics::Anchored { .. } => {
                f[(idx::R_RIGHT, idx::R_RIGHT)] = 0.0;
                f[(idx::R_LEFT, idx::R_LEFT)] = 0.0;
            }
            RadiusDynamics::RampLeft { rate, floor, .. } => {
                f[(idx::R_RIGHT, idx::R_RIGHT)] = 0.0;
                if rl - rate * dt <= floor {
                    f[(idx::R_LEFT, idx::R_LEFT)] = 0.0;
                }
            }
        }
        f
    }

    fn observe(&self, x: &StateVector, u: &ControlInput) -> f64 {
        measurement_model(x, u)
    }

    fn observation_jacobian(&self, _x: &StateVector, u: &ControlInput) -> MeasurementRow {
        MeasurementRow::new(0.0, 0.0, 0.0, 0.5 * u.omega_right, 0.5 * u.omega_left)
    }
}

/// Radii from a belief, clamped to stay usable as controller parameters.
pub fn radii_as_params(belief: &GaussianBelief, floor: f64) -> RobotParams {
    let (rr, rl) = belief.radii();
    let fix = |r: f64| if r.is_finite() { r.max(floor) } else { NOMINAL_RADIUS };
    RobotParams::nominal().with_radii(fix(rr), fix(rl))
}

pub(crate) fn symmetrize(m: &StateMatrix) -> StateMatrix {
    (m + m.transpose()) * 0.5
}

pub(crate) fn check_psd(m: &StateMatrix) -> Result<()> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(FtcError::FilterDivergence("covariance has non-finite entries".into()));
    }
    let min = SymmetricEigen::new(*m).eigenvalues.min();
    if min < -PSD_TOL {
        return Err(FtcError::FilterDivergence(format!(
            "covariance lost positive semi-definiteness (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}
