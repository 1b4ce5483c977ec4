use std::fmt;
use std::str::FromStr;

use crate::dynamics::{FaultKind, FaultProfile, RampClock, Wheel};
use crate::error::{FtcError, Result};
use crate::estimators::FilterKind;
use crate::mpc::{build_reference_circle, MpcConfig, ReferenceSignal};

/// Puncture deflation rate of the ramp scenario (m/s).
pub const RAMP_RATE: f64 = 0.1;
/// Smallest radius the ramp deflates to (m).
pub const RAMP_FLOOR: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FilterChoice {
    Ekf,
    Ukf,
    ImmEkf,
    ImmUkf,
}

impl FilterChoice {
    pub const ALL: [FilterChoice; 4] = [FilterChoice::Ekf, FilterChoice::Ukf, FilterChoice::ImmEkf, FilterChoice::ImmUkf];

    pub fn kind(self) -> FilterKind {
        match self {
            FilterChoice::Ekf | FilterChoice::ImmEkf => FilterKind::Ekf,
            FilterChoice::Ukf | FilterChoice::ImmUkf => FilterKind::Ukf,
        }
    }

    pub fn is_imm(self) -> bool {
        matches!(self, FilterChoice::ImmEkf | FilterChoice::ImmUkf)
    }

    pub fn token(self) -> &'static str {
        match self {
            FilterChoice::Ekf => "ekf",
            FilterChoice::Ukf => "ukf",
            FilterChoice::ImmEkf => "imm-ekf",
            FilterChoice::ImmUkf => "imm-ukf",
        }
    }
}

impl fmt::Display for FilterChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for FilterChoice {
    type Err = FtcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "ekf" => Ok(FilterChoice::Ekf),
            "ukf" => Ok(FilterChoice::Ukf),
            "imm-ekf" => Ok(FilterChoice::ImmEkf),
            "imm-ukf" => Ok(FilterChoice::ImmUkf),
            _ => Err(FtcError::Parse(format!("unknown filter '{s}' (expected ekf, ukf, imm-ekf or imm-ukf)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ControllerKind {
    Nmpc,
    Lmpc,
}

impl ControllerKind {
    pub fn token(self) -> &'static str {
        match self {
            ControllerKind::Nmpc => "nmpc",
            ControllerKind::Lmpc => "lmpc",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for ControllerKind {
    type Err = FtcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nmpc" => Ok(ControllerKind::Nmpc),
            "lmpc" => Ok(ControllerKind::Lmpc),
            _ => Err(FtcError::Parse(format!("unknown controller '{s}' (expected nmpc or lmpc)"))),
        }
    }
}

/// Circular reference path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathConfig {
    pub radius: f64,
    pub speed: f64,
    pub center: (f64, f64),
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            radius: 50.0,
            speed: 10.0,
            center: (0.0, 0.0),
        }
    }
}

impl PathConfig {
    pub fn reference(&self) -> Result<ReferenceSignal> {
        build_reference_circle(self.radius, self.speed, self.center)
    }
}

/// Declarative description of one closed-loop run.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    /// Scenario 1 (no fault), 2 (left step), 3 (left then right step) or 4 (left ramp).
    pub scenario: u8,
    pub filter: FilterChoice,
    /// Mode count of the IMM bank (4 or 5); ignored by single filters.
    pub imm_modes: usize,
    /// Pass the filter's radius estimates to the controller model.
    pub feedback: bool,
    pub controller: ControllerKind,
    pub duration: f64,
    pub seed: u64,
    pub filter_hz: u32,
    pub controller_hz: u32,
    /// Polynomial degree of the collocation basis.
    pub n_nodes: usize,
    pub horizon: f64,
    pub path: PathConfig,
    pub ramp_clock: RampClock,
    pub max_sqp_iter: usize,
    /// Speed measurement standard deviation (m/s).
    pub measurement_sigma: f64,
}

impl ScenarioConfig {
    /// Defaults for a scenario: UKF with feedback and NMPC, 20 s (40 s for the ramp).
    pub fn scenario(id: u8) -> Self {
        Self {
            scenario: id,
            filter: FilterChoice::Ukf,
            imm_modes: 4,
            feedback: true,
            controller: ControllerKind::Nmpc,
            duration: default_duration(id),
            seed: 0,
            filter_hz: 100,
            controller_hz: 10,
            n_nodes: 16,
            horizon: 5.0,
            path: PathConfig::default(),
            ramp_clock: RampClock::OnsetRelative,
            max_sqp_iter: 50,
            measurement_sigma: 0.5,
        }
    }

    pub fn with_filter(mut self, filter: FilterChoice) -> Self {
        self.filter = filter;
        self
    }

    pub fn with_feedback(mut self, feedback: bool) -> Self {
        self.feedback = feedback;
        self
    }

    pub fn with_controller(mut self, controller: ControllerKind) -> Self {
        self.controller = controller;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_modes(mut self, modes: usize) -> Self {
        self.imm_modes = modes;
        self
    }

    pub fn with_duration(mut self, duration: f64) -> Self {
        self.duration = duration;
        self
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.filter_hz as f64
    }

    /// Filter ticks between controller updates.
    pub fn ticks_per_control(&self) -> usize {
        (self.filter_hz / self.controller_hz) as usize
    }

    pub fn n_ticks(&self) -> usize {
        (self.duration * self.filter_hz as f64).round() as usize
    }

    pub fn faults(&self) -> Vec<FaultProfile> {
        match self.scenario {
            2 => vec![FaultProfile::step(Wheel::Left, 10.0, 0.5)],
            3 => vec![FaultProfile::step(Wheel::Left, 5.0, 0.5), FaultProfile::step(Wheel::Right, 10.0, 0.5)],
            4 => vec![FaultProfile {
                kind: FaultKind::Ramp {
                    rate: RAMP_RATE,
                    floor: RAMP_FLOOR,
                    clock: self.ramp_clock,
                },
                wheel: Wheel::Left,
                onset: 10.0,
            }],
            _ => Vec::new(),
        }
    }

    /// Earliest fault onset, if the scenario has one.
    pub fn first_onset(&self) -> Option<f64> {
        self.faults().iter().map(|f| f.onset).reduce(f64::min)
    }

    pub fn mpc_config(&self) -> MpcConfig {
        let mut cfg = MpcConfig {
            degree: self.n_nodes,
            horizon: self.horizon,
            ..MpcConfig::default()
        };
        cfg.sqp.max_iter = self.max_sqp_iter;
        cfg.bounds.control_period = 1.0 / self.controller_hz as f64;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FtcError::InvalidArgument(msg));
        if !(1..=4).contains(&self.scenario) {
            return bad(format!("scenario must be 1-4, got {}", self.scenario));
        }
        if self.imm_modes != 4 && self.imm_modes != 5 {
            return bad(format!("IMM mode count must be 4 or 5, got {}", self.imm_modes));
        }
        if self.filter_hz == 0 || self.controller_hz == 0 || !self.filter_hz.is_multiple_of(self.controller_hz) {
            return bad(format!(
                "filter rate {} Hz must be a multiple of the controller rate {} Hz",
                self.filter_hz, self.controller_hz
            ));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be positive, got {}", self.duration));
        }
        if let Some(last) = self.faults().iter().map(|f| f.onset).reduce(f64::max) {
            if self.duration <= last {
                return bad(format!("duration {} s does not exceed the fault onset at {last} s", self.duration));
            }
        }
        if self.n_nodes < 2 {
            return bad(format!("collocation degree must be at least 2, got {}", self.n_nodes));
        }
        if !(self.horizon > 0.0) || !(self.measurement_sigma > 0.0) || self.max_sqp_iter == 0 {
            return bad("horizon, measurement noise and SQP iteration limit must be positive".into());
        }
        self.path.reference().map(|_| ())
    }

    /// Set one field from its `key=value` name, as used by config files and the CLI.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "scenario" => {
                let id = parse_num(key, v)?;
                let keep_duration = self.duration != default_duration(self.scenario);
                self.scenario = id;
                if !keep_duration {
                    self.duration = default_duration(id);
                }
            }
            "filter" => self.filter = v.parse()?,
            "modes" => self.imm_modes = parse_num(key, v)?,
            "feedback" => self.feedback = parse_switch(v)?,
            "controller" => self.controller = v.parse()?,
            "nodes" => self.n_nodes = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "duration" => self.duration = parse_num(key, v)?,
            "horizon" => self.horizon = parse_num(key, v)?,
            "filter_hz" => self.filter_hz = parse_num(key, v)?,
            "controller_hz" => self.controller_hz = parse_num(key, v)?,
            "radius" => self.path.radius = parse_num(key, v)?,
            "speed" => self.path.speed = parse_num(key, v)?,
            "center_x" => self.path.center.0 = parse_num(key, v)?,
            "center_y" => self.path.center.1 = parse_num(key, v)?,
            "max_iter" => self.max_sqp_iter = parse_num(key, v)?,
            "sigma" => self.measurement_sigma = parse_num(key, v)?,
            "ramp_clock" => {
                self.ramp_clock = match v {
                    "onset" => RampClock::OnsetRelative,
                    "absolute" => RampClock::Absolute,
                    _ => return Err(FtcError::Parse(format!("ramp_clock must be onset or absolute, got '{v}'"))),
                }
            }
            other => return Err(FtcError::Parse(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::scenario(1)
    }
}

fn default_duration(id: u8) -> f64 {
    if id == 4 {
        40.0
    } else {
        20.0
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| FtcError::Parse(format!("bad value '{v}' for '{key}'")))
}

fn parse_switch(v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(FtcError::Parse(format!("expected on or off, got '{v}'"))),
    }
}

/// Parse flat `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FtcError::Parse(format!("line {}: expected key=value, got '{line}'", lineno + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(FtcError::Parse(format!("line {}: empty key", lineno + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}
