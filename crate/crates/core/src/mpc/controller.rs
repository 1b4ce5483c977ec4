use std::sync::Arc;

use nalgebra::DVector;

use super::reference::ReferenceSignal;
use super::sqp::{solve_nlp, SolverStatus, SqpOptions};
use super::transcription::{transcribe, ModelForm, MpcBounds, OcpInstance, OcpWeights, Transcription};
use crate::dynamics::{ControlInput, RobotParams, RobotState};
use crate::error::Result;
use crate::pseudospectral::{cached_basis, CollocationBasis};

const CLAMP_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct MpcConfig {
    /// Polynomial degree `N` of the LGL basis (`N + 1` nodes).
    pub degree: usize,
    pub horizon: f64,
    pub weights: OcpWeights,
    pub bounds: MpcBounds,
    pub sqp: SqpOptions,
    /// Largest constraint violation of an iteration-limited solve that is still applied.
    pub accept_violation: f64,
    /// Consecutive failures tolerated before the controller reports a failure state.
    pub max_failures: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            degree: 16,
            horizon: 5.0,
            weights: OcpWeights::default(),
            bounds: MpcBounds::default(),
            sqp: SqpOptions {
                max_iter: 50,
                ..SqpOptions::default()
            },
            accept_violation: 1e-3,
            max_failures: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControllerStatus {
    Converged,
    MaxIter,
    /// Solve rejected; the previous control was re-applied.
    Failed,
    /// More than the tolerated number of consecutive failures.
    ControllerFailure,
    /// Linear MPC QP had no solution; the reference control was clamped to the bounds.
    Fallback,
}

impl ControllerStatus {
    pub fn token(self) -> &'static str {
        match self {
            ControllerStatus::Converged => "converged",
            ControllerStatus::MaxIter => "max_iter",
            ControllerStatus::Failed => "failed",
            ControllerStatus::ControllerFailure => "controller_failure",
            ControllerStatus::Fallback => "qp_fallback",
        }
    }
}

/// Optimal node trajectory of one solve.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    pub node_times: Vec<f64>,
    pub states: Vec<RobotState>,
    pub controls: Vec<ControlInput>,
    pub first_control: ControlInput,
    pub objective: f64,
    pub status: SolverStatus,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlStep {
    pub u: ControlInput,
    pub status: ControllerStatus,
    pub iterations: usize,
}

/// Shared receding-horizon bookkeeping for both controllers.
#[derive(Clone, Debug)]
struct Horizon {
    config: MpcConfig,
    basis: Arc<CollocationBasis>,
    reference: ReferenceSignal,
    previous: Option<(DVector<f64>, Vec<f64>)>,
    last_u: Option<ControlInput>,
    failures: usize,
    solution: Option<MpcSolution>,
}

impl Horizon {
    fn new(config: MpcConfig, reference: ReferenceSignal) -> Result<Self> {
        config.weights.validate()?;
        config.bounds.validate()?;
        let basis = cached_basis(config.degree)?;
        Ok(Self {
            config,
            basis,
            reference,
            previous: None,
            last_u: None,
            failures: 0,
            solution: None,
        })
    }

    fn transcribe(&self, x_now: &RobotState, params: &RobotParams, t: f64, form: ModelForm) -> Result<Transcription> {
        let instance = OcpInstance {
            t,
            x_now: *x_now,
            params: *params,
            u_prev: self.last_u,
        };
        transcribe(
            &self.basis,
            &self.config.weights,
            &self.config.bounds,
            self.config.horizon,
            &self.reference,
            &instance,
            form,
        )
    }

    fn guess(&self, problem: &Transcription) -> Result<DVector<f64>> {
        match &self.previous {
            Some((z, times)) => problem.shifted_guess(z, times),
            None => Ok(problem.reference_guess()),
        }
    }

    /// Solve and apply the first control, or re-apply the last one on failure.
    fn solve(&mut self, problem: &Transcription, fallback: ControlInput) -> Result<ControlStep> {
        let guess = self.guess(problem)?;
        let omega_max = self.config.bounds.omega_max;
        let outcome = solve_nlp(problem, &guess, &self.config.sqp).ok();
        let accepted = outcome.as_ref().filter(|s| match s.status {
            SolverStatus::Converged => true,
            SolverStatus::MaxIter => s.violation <= self.config.accept_violation,
            SolverStatus::Infeasible => false,
        });

        let step = if let Some(sol) = accepted {
            let (states, controls) = problem.unpack(&sol.z);
            let u = controls[0].clamped(omega_max);
            self.solution = Some(MpcSolution {
                node_times: problem.node_times.clone(),
                states,
                controls,
                first_control: u,
                objective: sol.objective,
                status: sol.status,
                iterations: sol.iterations,
            });
            self.previous = Some((sol.z.clone(), problem.node_times.clone()));
            self.failures = 0;
            let status = if sol.status == SolverStatus::Converged {
                ControllerStatus::Converged
            } else {
                ControllerStatus::MaxIter
            };
            ControlStep {
                u,
                status,
                iterations: sol.iterations,
            }
        } else {
            self.failures += 1;
            let status = if self.failures > self.config.max_failures {
                ControllerStatus::ControllerFailure
            } else {
                ControllerStatus::Failed
            };
            ControlStep {
                u: self.last_u.unwrap_or(fallback).clamped(omega_max),
                status,
                iterations: outcome.map_or(0, |s| s.iterations),
            }
        };
        assert!(step.u.within(omega_max + CLAMP_TOL), "applied control {:?} exceeds the wheel-rate bound", step.u);
        self.last_u = Some(step.u);
        Ok(step)
    }
}

/// Nonlinear pseudospectral MPC solved by SQP at every tick.
#[derive(Clone, Debug)]
pub struct NmpcController {
    inner: Horizon,
}

impl NmpcController {
    pub fn new(config: MpcConfig, reference: ReferenceSignal) -> Result<Self> {
        Ok(Self {
            inner: Horizon::new(config, reference)?,
        })
    }

    /// Transcribe at `t`, warm-start from the shifted previous optimum and apply the first control.
    pub fn step(&mut self, x_now: &RobotState, params_est: &RobotParams, t: f64) -> Result<ControlStep> {
        let problem = self.inner.transcribe(x_now, params_est, t, ModelForm::Nonlinear)?;
        let fallback = problem.reference_controls()[0];
        self.inner.solve(&problem, fallback)
    }

    pub fn problem(&self, x_now: &RobotState, params_est: &RobotParams, t: f64) -> Result<Transcription> {
        self.inner.transcribe(x_now, params_est, t, ModelForm::Nonlinear)
    }

    pub fn last_solution(&self) -> Option<&MpcSolution> {
        self.inner.solution.as_ref()
    }

    pub fn config(&self) -> &MpcConfig {
        &self.inner.config
    }

    pub fn consecutive_failures(&self) -> usize {
        self.inner.failures
    }
}

/// MPC over the kinematics linearised at the current pose and the reference wheel rates.
#[derive(Clone, Debug)]
pub struct LmpcController {
    inner: Horizon,
}

impl LmpcController {
    pub fn new(config: MpcConfig, reference: ReferenceSignal) -> Result<Self> {
        Ok(Self {
            inner: Horizon::new(config, reference)?,
        })
    }

    pub fn step(&mut self, x_now: &RobotState, params_est: &RobotParams, t: f64) -> Result<ControlStep> {
        let r = self.inner.reference.sample(t);
        let u_bar = params_est.inverse(r.v, r.psi_dot).clamped(self.inner.config.bounds.omega_max);
        let form = ModelForm::Linearized {
            state: *x_now,
            control: u_bar,
        };
        let problem = self.inner.transcribe(x_now, params_est, t, form)?;
        let mut step = self.inner.solve(&problem, u_bar)?;
        if matches!(step.status, ControllerStatus::Failed | ControllerStatus::ControllerFailure) {
            let bounds = &self.inner.config.bounds;
            let lo = problem.lower_bounds_first();
            let hi = problem.upper_bounds_first();
            step.u = ControlInput::new(
                u_bar.omega_right.max(lo.omega_right).min(hi.omega_right),
                u_bar.omega_left.max(lo.omega_left).min(hi.omega_left),
            )
            .clamped(bounds.omega_max);
            if step.status == ControllerStatus::Failed {
                step.status = ControllerStatus::Fallback;
            }
            self.inner.last_u = Some(step.u);
        }
        Ok(step)
    }

    pub fn last_solution(&self) -> Option<&MpcSolution> {
        self.inner.solution.as_ref()
    }
}
