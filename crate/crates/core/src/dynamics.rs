//! Kinematic truth model of the differential-drive robot.
//!
//! The robot is purely kinematic. Each wheel carries its own radius so that a
//! puncture on one side produces the asymmetric speed/turn-rate response the
//! fault filters have to identify:
//!
//! ```text
//! V       = (r_right * w_right + r_left * w_left) / 2
//! x_dot   = V cos(psi)
//! y_dot   = V sin(psi)
//! psi_dot = (r_right * w_right - r_left * w_left) / (2 b)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{FtcError, Result};

/// Wheel rate limit, 1000 deg/s.
pub const OMEGA_MAX: f64 = 1000.0 * std::f64::consts::PI / 180.0;

/// Nominal wheel radius (m).
pub const NOMINAL_RADIUS: f64 = 2.0;

/// Nominal half axle distance (m).
pub const NOMINAL_HALF_TRACK: f64 = 1.0;

/// Planar pose. `psi` is kept unwrapped.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl RobotState {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Self { x, y, psi }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.psi.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotParams {
    pub r_right: f64,
    pub r_left: f64,
    /// Half of the distance between the wheels.
    pub b: f64,
}

impl RobotParams {
    pub fn new(r_right: f64, r_left: f64, b: f64) -> Result<Self> {
        let p = Self { r_right, r_left, b };
        p.validate()?;
        Ok(p)
    }

    pub fn nominal() -> Self {
        Self {
            r_right: NOMINAL_RADIUS,
            r_left: NOMINAL_RADIUS,
            b: NOMINAL_HALF_TRACK,
        }
    }

    pub fn with_radii(self, r_right: f64, r_left: f64) -> Self {
        Self {
            r_right,
            r_left,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.r_right) && ok(self.r_left) && ok(self.b) {
            Ok(())
        } else {
            Err(FtcError::InvalidArgument(format!(
                "robot parameters must be positive and finite, got {self:?}"
            )))
        }
    }

    /// Forward speed produced by the wheel rates.
    #[inline]
    pub fn speed(&self, u: &ControlInput) -> f64 {
        0.5 * (self.r_right * u.omega_right + self.r_left * u.omega_left)
    }

    /// Heading rate produced by the wheel rates.
    #[inline]
    pub fn turn_rate(&self, u: &ControlInput) -> f64 {
        (self.r_right * u.omega_right - self.r_left * u.omega_left) / (2.0 * self.b)
    }

    /// Wheel rates that realise the requested speed and turn rate.
    pub fn inverse(&self, speed: f64, turn_rate: f64) -> ControlInput {
        ControlInput {
            omega_right: (speed + self.b * turn_rate) / self.r_right,
            omega_left: (speed - self.b * turn_rate) / self.r_left,
        }
    }
}

/// Wheel angular rates (rad/s).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ControlInput {
    pub omega_right: f64,
    pub omega_left: f64,
}

impl ControlInput {
    pub fn new(omega_right: f64, omega_left: f64) -> Self {
        Self {
            omega_right,
            omega_left,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.omega_right.is_finite() && self.omega_left.is_finite()
    }

    /// Clamp both wheel rates to `[-bound, bound]`.
    pub fn clamped(self, bound: f64) -> Self {
        Self {
            omega_right: self.omega_right.clamp(-bound, bound),
            omega_left: self.omega_left.clamp(-bound, bound),
        }
    }

    pub fn within(&self, bound: f64) -> bool {
        self.omega_right.abs() <= bound && self.omega_left.abs() <= bound
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateDerivative {
    pub x_dot: f64,
    pub y_dot: f64,
    pub psi_dot: f64,
}

/// Unchecked kinematics, shared by the integrators and the controller models.
#[inline]
pub(crate) fn kinematics(psi: f64, u: &ControlInput, params: &RobotParams) -> StateDerivative {
    let v = params.speed(u);
    let (s, c) = psi.sin_cos();
    StateDerivative {
        x_dot: v * c,
        y_dot: v * s,
        psi_dot: params.turn_rate(u),
    }
}

/// Time derivative of the pose under the generalized per-wheel kinematics.
pub fn derivatives(
    state: &RobotState,
    u: &ControlInput,
    params: &RobotParams,
) -> Result<StateDerivative> {
    if !state.is_finite() || !u.is_finite() {
        return Err(FtcError::InvalidArgument(format!(
            "non-finite state {state:?} or input {u:?}"
        )));
    }
    params.validate()?;
    Ok(kinematics(state.psi, u, params))
}

/// Advance the truth pose by one classical RK4 step with the input held.
pub fn step_truth(
    state: &RobotState,
    u: &ControlInput,
    params: &RobotParams,
    dt: f64,
) -> Result<RobotState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(FtcError::InvalidArgument(format!(
            "integration step must be positive, got {dt}"
        )));
    }
    let k1 = derivatives(state, u, params)?;
    let at = |k: &StateDerivative, h: f64| RobotState {
        x: state.x + h * k.x_dot,
        y: state.y + h * k.y_dot,
        psi: state.psi + h * k.psi_dot,
    };
    let k2 = kinematics(at(&k1, 0.5 * dt).psi, u, params);
    let k3 = kinematics(at(&k2, 0.5 * dt).psi, u, params);
    let k4 = kinematics(at(&k3, dt).psi, u, params);
    let w = dt / 6.0;
    Ok(RobotState {
        x: state.x + w * (k1.x_dot + 2.0 * k2.x_dot + 2.0 * k3.x_dot + k4.x_dot),
        y: state.y + w * (k1.y_dot + 2.0 * k2.y_dot + 2.0 * k3.y_dot + k4.y_dot),
        psi: state.psi + w * (k1.psi_dot + 2.0 * k2.psi_dot + 2.0 * k3.psi_dot + k4.psi_dot),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wheel {
    Left,
    Right,
}

/// Time origin for the ramp puncture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RampClock {
    /// `r = nominal - rate * (t - onset)`.
    #[default]
    OnsetRelative,
    /// `r = nominal - rate * t`, active from the onset on.
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FaultKind {
    None,
    /// Instantaneous deflation to `fraction` of the nominal radius.
    Step { fraction: f64 },
    /// Linear deflation at `rate` (m/s), clamped at `floor` (m).
    Ramp { rate: f64, floor: f64, clock: RampClock },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaultProfile {
    pub kind: FaultKind,
    pub wheel: Wheel,
    /// Fault onset time (s).
    pub onset: f64,
}

impl FaultProfile {
    pub fn none() -> Self {
        Self {
            kind: FaultKind::None,
            wheel: Wheel::Left,
            onset: 0.0,
        }
    }

    pub fn step(wheel: Wheel, onset: f64, fraction: f64) -> Self {
        Self {
            kind: FaultKind::Step { fraction },
            wheel,
            onset,
        }
    }

    pub fn ramp(wheel: Wheel, onset: f64, rate: f64, floor: f64) -> Self {
        Self {
            kind: FaultKind::Ramp {
                rate,
                floor,
                clock: RampClock::OnsetRelative,
            },
            wheel,
            onset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(FtcError::InvalidArgument(format!("{msg}: {self:?}")));
        if !(self.onset >= 0.0) {
            return bad("fault onset must be non-negative");
        }
        match self.kind {
            FaultKind::None => Ok(()),
            FaultKind::Step { fraction } if fraction > 0.0 && fraction <= 1.0 => Ok(()),
            FaultKind::Step { .. } => bad("step fraction must lie in (0, 1]"),
            FaultKind::Ramp { rate, floor, .. } if rate > 0.0 && floor > 0.0 => Ok(()),
            FaultKind::Ramp { .. } => bad("ramp rate and floor must be positive"),
        }
    }
}

/// Radii in effect at time `t` under a single fault profile.
pub fn fault_radius(profile: &FaultProfile, nominal: &RobotParams, t: f64) -> RobotParams {
    let base = match profile.wheel {
        Wheel::Left => nominal.r_left,
        Wheel::Right => nominal.r_right,
    };
    if t < profile.onset {
        return *nominal;
    }
    let radius = match profile.kind {
        FaultKind::None => base,
        FaultKind::Step { fraction } => fraction * base,
        FaultKind::Ramp { rate, floor, clock } => {
            let elapsed = match clock {
                RampClock::OnsetRelative => t - profile.onset,
                RampClock::Absolute => t,
            };
            (base - rate * elapsed).max(floor)
        }
    };
    match profile.wheel {
        Wheel::Left => nominal.with_radii(nominal.r_right, radius),
        Wheel::Right => nominal.with_radii(radius, nominal.r_left),
    }
}

/// Compose several single-wheel profiles (e.g. a left then a right puncture).
pub fn apply_faults(profiles: &[FaultProfile], nominal: &RobotParams, t: f64) -> RobotParams {
    profiles
        .iter()
        .fold(*nominal, |acc, p| fault_radius(p, &acc, t))
}

/// A noisy speed reading.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedMeasurement {
    pub z: f64,
    pub t: f64,
}

/// Seedable Gaussian noise source, one per scenario run.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

/// `z = V + w`, `w ~ N(0, sigma^2)`.
pub fn measure_speed(v: f64, sigma: f64, t: f64, noise: &mut NoiseStream) -> Result<SpeedMeasurement> {
    if !(sigma >= 0.0) || !v.is_finite() {
        return Err(FtcError::InvalidArgument(format!(
            "bad speed measurement inputs v={v}, sigma={sigma}"
        )));
    }
    let w = if sigma == 0.0 {
        0.0
    } else {
        sigma * noise.standard_normal()
    };
    Ok(SpeedMeasurement { z: v + w, t })
}
