//! Closed-loop scenario runs: truth, faults, filters and controllers at
//! their two rates, plus the statistics and CSV logs built on top.
//!
//! The loop runs at the filter rate. Every `filter_hz / controller_hz`
//! ticks the controller is solved from the true pose and either the
//! filter's radius estimates (feedback on) or the nominal radii
//! (feedback off); in between the last command is held.

mod config;
mod log;
mod stats;

pub use config::{parse_key_values, ControllerKind, FilterChoice, PathConfig, ScenarioConfig, RAMP_FLOOR, RAMP_RATE};
pub use log::{export_csv, format_sig, header, parse_csv, read_csv, LogRow, SimLog, DIVERGED_SUFFIX, HOLD_STATUS};
pub use stats::{
    compare_runs, consistency_stats, radius_error_series, run_label, saturation_duty, tracking_rms, wheel_settle_time,
    ComparisonRow, ComparisonTable, ConsistencyStats, Window, SETTLE_FRACTION, SETTLE_HOLD,
};

use crate::dynamics::{apply_faults, measure_speed, step_truth, ControlInput, NoiseStream, RobotParams, RobotState, SpeedMeasurement};
use crate::error::{FtcError, Result};
use crate::estimators::{
    ekf_predict, ekf_update, initial_covariance, radii_as_params, ukf_predict, ukf_update, FilterKind, GaussianBelief,
    InnovationRecord, NoiseConfig, RobotModel, DEFAULT_KAPPA,
};
use crate::imm::{imm_cycle, mixing_probabilities, ImmBank};
use crate::mpc::{ControlStep, ControllerStatus, LmpcController, NmpcController};

/// Smallest radius estimate handed to the controller model (m).
pub const PARAM_FLOOR: f64 = 0.05;

/// Result of one filter tick.
#[derive(Clone, Copy, Debug)]
struct TickOutcome {
    nu: f64,
    s: f64,
    diverged: bool,
}

/// The estimator of a run: a single EKF/UKF or an IMM bank.
#[derive(Clone, Debug)]
enum Estimator {
    Single {
        belief: GaussianBelief,
        kind: FilterKind,
        model: RobotModel,
    },
    Imm {
        bank: ImmBank,
        combined: GaussianBelief,
        kind: FilterKind,
        dt: f64,
        modes: usize,
    },
}

impl Estimator {
    fn new(cfg: &ScenarioConfig, pose: &RobotState) -> Result<Self> {
        let nominal = RobotParams::nominal();
        if cfg.filter.is_imm() {
            let bank = fresh_bank(cfg.imm_modes, pose)?;
            Ok(Estimator::Imm {
                combined: crate::imm::combine(&bank),
                bank,
                kind: cfg.filter.kind(),
                dt: cfg.dt(),
                modes: cfg.imm_modes,
            })
        } else {
            Ok(Estimator::Single {
                belief: GaussianBelief::initial(pose, nominal.r_right, nominal.r_left),
                kind: cfg.filter.kind(),
                model: RobotModel::new(cfg.dt()),
            })
        }
    }

    fn belief(&self) -> &GaussianBelief {
        match self {
            Estimator::Single { belief, .. } => belief,
            Estimator::Imm { combined, .. } => combined,
        }
    }

    fn mu(&self) -> Vec<f64> {
        match self {
            Estimator::Single { .. } => Vec::new(),
            Estimator::Imm { bank, .. } => bank.mu.clone(),
        }
    }

    fn labels(&self) -> Vec<String> {
        match self {
            Estimator::Single { .. } => Vec::new(),
            Estimator::Imm { bank, .. } => bank.modes.iter().map(|m| m.spec.label.clone()).collect(),
        }
    }

    fn tick(&mut self, z: &SpeedMeasurement, u: &ControlInput, noise: &NoiseConfig) -> Result<TickOutcome> {
        match self {
            Estimator::Single { belief, kind, model } => match single_step(belief, *kind, model, z, u, noise) {
                Ok((next, rec)) => {
                    *belief = next;
                    Ok(TickOutcome {
                        nu: rec.nu,
                        s: rec.s,
                        diverged: false,
                    })
                }
                Err(FtcError::FilterDivergence(_)) => {
                    // Restart from the last finite mean with the initial uncertainty.
                    *belief = GaussianBelief {
                        mean: belief.mean,
                        cov: initial_covariance(),
                    };
                    Ok(TickOutcome {
                        nu: f64::NAN,
                        s: f64::NAN,
                        diverged: true,
                    })
                }
                Err(e) => Err(e),
            },
            Estimator::Imm {
                bank,
                combined,
                kind,
                dt,
                modes,
            } => {
                let cbar = mixing_probabilities(bank)?.cbar;
                match imm_cycle(bank, z, u, noise, *dt, *kind) {
                    Ok(cycle) => {
                        let (nu, s) = mixture_innovation(&cycle.innovations, &cbar);
                        let diverged = !cycle.diverged.is_empty();
                        *bank = cycle.bank;
                        *combined = cycle.combined;
                        Ok(TickOutcome { nu, s, diverged })
                    }
                    Err(FtcError::FilterDivergence(_)) => {
                        *bank = fresh_bank(*modes, &combined.pose())?;
                        *combined = crate::imm::combine(bank);
                        Ok(TickOutcome {
                            nu: f64::NAN,
                            s: f64::NAN,
                            diverged: true,
                        })
                    }
                    Err(e) => Err(e),
                }
            }
        }
    }
}

fn fresh_bank(modes: usize, pose: &RobotState) -> Result<ImmBank> {
    if modes == 5 {
        ImmBank::five_mode(pose, initial_covariance(), RAMP_RATE, RAMP_FLOOR)
    } else {
        ImmBank::four_mode(pose, initial_covariance())
    }
}

fn single_step(
    belief: &GaussianBelief,
    kind: FilterKind,
    model: &RobotModel,
    z: &SpeedMeasurement,
    u: &ControlInput,
    noise: &NoiseConfig,
) -> Result<(GaussianBelief, InnovationRecord)> {
    match kind {
        FilterKind::Ekf => {
            let predicted = ekf_predict(belief, u, noise, model)?;
            ekf_update(&predicted, z, u, noise, model)
        }
        FilterKind::Ukf => {
            let (predicted, points) = ukf_predict(belief, u, noise, model, DEFAULT_KAPPA)?;
            ukf_update(&predicted, &points, z, u, noise, model)
        }
    }
}

/// Moments of the predicted measurement mixture `sum_j cbar_j N(nu_j, S_j)`.
fn mixture_innovation(innovations: &[InnovationRecord], cbar: &[f64]) -> (f64, f64) {
    let live: Vec<(f64, &InnovationRecord)> = cbar
        .iter()
        .copied()
        .zip(innovations)
        .filter(|(w, r)| *w > 0.0 && r.nu.is_finite() && r.s.is_finite())
        .collect();
    let total: f64 = live.iter().map(|(w, _)| w).sum();
    if !(total > 0.0) {
        return (f64::NAN, f64::NAN);
    }
    let nu = live.iter().map(|(w, r)| w * r.nu).sum::<f64>() / total;
    let s = live
        .iter()
        .map(|(w, r)| w * (r.s + (r.nu - nu) * (r.nu - nu)))
        .sum::<f64>()
        / total;
    (nu, s)
}

enum Controller {
    Nmpc(NmpcController),
    Lmpc(LmpcController),
}

impl Controller {
    fn step(&mut self, x: &RobotState, params: &RobotParams, t: f64) -> Result<ControlStep> {
        match self {
            Controller::Nmpc(c) => c.step(x, params, t),
            Controller::Lmpc(c) => c.step(x, params, t),
        }
    }
}

/// Parameters the controller was given at one controller tick.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControllerInput {
    pub t: f64,
    pub params: RobotParams,
}

/// Run one closed-loop scenario at the filter rate.
///
/// Filter divergence and controller failures are recorded in the status
/// column rather than aborting the run.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimLog> {
    Ok(run_scenario_traced(cfg)?.0)
}

/// [`run_scenario`] that also returns the parameters passed to the controller at each tick.
pub fn run_scenario_traced(cfg: &ScenarioConfig) -> Result<(SimLog, Vec<ControllerInput>)> {
    cfg.validate()?;
    let dt = cfg.dt();
    let nominal = RobotParams::nominal();
    let faults = cfg.faults();
    let reference = cfg.path.reference()?;
    let noise = NoiseConfig::standard(dt);
    let mut rng = NoiseStream::new(cfg.seed);

    let r0 = reference.sample(0.0);
    let mut truth = RobotState::new(r0.x, r0.y, r0.psi);
    let mut estimator = Estimator::new(cfg, &truth)?;
    let mut controller = match cfg.controller {
        ControllerKind::Nmpc => Controller::Nmpc(NmpcController::new(cfg.mpc_config(), reference.clone())?),
        ControllerKind::Lmpc => Controller::Lmpc(LmpcController::new(cfg.mpc_config(), reference.clone())?),
    };

    let n = cfg.n_ticks();
    let every = cfg.ticks_per_control();
    let mut rows = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n / every + 1);
    let mut u = ControlInput::default();

    for k in 0..=n {
        let t = k as f64 * dt;
        let mut outcome = TickOutcome {
            nu: f64::NAN,
            s: f64::NAN,
            diverged: false,
        };
        let mut z = f64::NAN;
        if k > 0 {
            let t_prev = (k - 1) as f64 * dt;
            truth = step_truth(&truth, &u, &apply_faults(&faults, &nominal, t_prev), dt)?;
            let params_now = apply_faults(&faults, &nominal, t);
            let meas = measure_speed(params_now.speed(&u), cfg.measurement_sigma, t, &mut rng)?;
            z = meas.z;
            outcome = estimator.tick(&meas, &u, &noise)?;
        }

        let mut status = HOLD_STATUS.to_string();
        if k % every == 0 {
            let params = if cfg.feedback {
                radii_as_params(estimator.belief(), PARAM_FLOOR)
            } else {
                nominal
            };
            inputs.push(ControllerInput { t, params });
            match controller.step(&truth, &params, t) {
                Ok(step) => {
                    u = step.u;
                    status = step.status.token().to_string();
                }
                Err(_) => status = ControllerStatus::Failed.token().to_string(),
            }
        }
        if outcome.diverged {
            status.push_str(DIVERGED_SUFFIX);
        }

        let belief = estimator.belief();
        let params_true = apply_faults(&faults, &nominal, t);
        let m = belief.mean;
        rows.push(LogRow {
            t,
            truth,
            r_true: (params_true.r_right, params_true.r_left),
            u,
            z,
            mean: [m[0], m[1], m[2], m[3], m[4]],
            cov_diag: belief.variances(),
            nu: outcome.nu,
            s: outcome.s,
            mu: estimator.mu(),
            status,
        });
    }

    Ok((
        SimLog {
            config: cfg.clone(),
            mode_labels: estimator.labels(),
            rows,
        },
        inputs,
    ))
}

/// Run several scenarios on parallel threads; results keep the input order.
pub fn run_many(configs: &[ScenarioConfig]) -> Vec<Result<SimLog>> {
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).max(1);
    let mut out = Vec::with_capacity(configs.len());
    for chunk in configs.chunks(workers) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|c| scope.spawn(move || run_scenario(c))).collect();
            for h in handles {
                out.push(h.join().unwrap_or_else(|_| {
                    Err(FtcError::InvalidArgument("scenario thread panicked".into()))
                }));
            }
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(id: u8, duration: f64) -> ScenarioConfig {
        ScenarioConfig::scenario(id).with_duration(duration)
    }

    #[test]
    fn row_count_and_monotone_time() {
        let log = run_scenario(&short(1, 2.0)).unwrap();
        assert_eq!(log.rows.len(), 201);
        assert!(log.rows.windows(2).all(|w| w[1].t > w[0].t));
        assert!(log.rows[0].z.is_nan() && log.rows[0].nu.is_nan());
        assert!(log.rows[1..].iter().all(|r| r.z.is_finite() && r.nu.is_finite()));
    }

    #[test]
    fn controller_runs_every_tenth_tick_with_held_control() {
        let log = run_scenario(&short(1, 2.0)).unwrap();
        for (k, r) in log.rows.iter().enumerate() {
            assert_eq!(r.controller_ran(), k % 10 == 0, "tick {k}: {}", r.status);
            if k % 10 != 0 {
                assert_eq!(r.u, log.rows[k - 1].u);
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_csv() {
        let cfg = short(2, 11.0).with_filter(FilterChoice::ImmUkf).with_seed(3);
        let a = run_scenario(&cfg).unwrap().to_csv_string();
        let b = run_scenario(&cfg).unwrap().to_csv_string();
        assert_eq!(a, b);
        let c = run_scenario(&cfg.clone().with_seed(4)).unwrap().to_csv_string();
        assert_ne!(a, c);
    }

    #[test]
    fn feedback_off_keeps_nominal_controller_params() {
        let cfg = short(2, 13.0).with_feedback(false);
        let (log, inputs) = run_scenario_traced(&cfg).unwrap();
        assert_eq!(inputs.len(), 131);
        assert!(inputs.iter().all(|i| i.params == RobotParams::nominal()));
        let last = log.rows.last().unwrap();
        assert!(last.r_hat().1 < 1.5, "left estimate should have moved: {}", last.r_hat().1);

        let (_, fed) = run_scenario_traced(&cfg.with_feedback(true)).unwrap();
        assert!(fed.last().unwrap().params.r_left < 1.5);
    }

    #[test]
    fn imm_logs_mode_probabilities() {
        let cfg = short(1, 1.0).with_filter(FilterChoice::ImmEkf).with_modes(5);
        let log = run_scenario(&cfg).unwrap();
        assert_eq!(log.mode_labels.len(), 5);
        assert_eq!(log.header().len(), 27);
        for r in &log.rows {
            assert_eq!(r.mu.len(), 5);
            assert!((r.mu.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        assert!(run_scenario(&short(2, 5.0)).is_err());
    }

    #[test]
    fn run_many_keeps_order() {
        let cfgs: Vec<_> = (0..3).map(|s| short(1, 0.5).with_seed(s)).collect();
        let logs = run_many(&cfgs);
        for (cfg, log) in cfgs.iter().zip(&logs) {
            assert_eq!(log.as_ref().unwrap().config.seed, cfg.seed);
        }
    }

    #[test]
    fn matched_model_coverage_is_near_ninety_five_percent() {
        use crate::dynamics::NoiseStream;
        use crate::estimators::{FilterModel, StateVector};
        // Truth drawn from the filter's own model and noise; no controller involved.
        let dt = 0.01;
        let noise = NoiseConfig::standard(dt);
        let model = RobotModel::new(dt);
        let mut rng = NoiseStream::new(11);
        let p0 = initial_covariance();
        let mut x = StateVector::new(50.0, 0.0, 1.5, 2.0, 2.0);
        for i in 0..5 {
            x[i] += p0[(i, i)].sqrt() * rng.standard_normal();
        }
        let mut belief = GaussianBelief::initial(&RobotState::new(50.0, 0.0, 1.5), 2.0, 2.0);
        let mut inside = 0;
        let steps = 5000;
        for k in 0..steps {
            let u = ControlInput::new(5.0 + (k as f64 * 0.01).sin(), 4.8);
            x = model.propagate(&x, &u);
            for i in 0..5 {
                x[i] += noise.q[(i, i)].sqrt() * rng.standard_normal();
            }
            let z = SpeedMeasurement {
                z: model.observe(&x, &u) + noise.r.sqrt() * rng.standard_normal(),
                t: k as f64 * dt,
            };
            let (next, rec) = single_step(&belief, FilterKind::Ukf, &model, &z, &u, &noise).unwrap();
            belief = next;
            if rec.nu.abs() <= 2.0 * rec.s.sqrt() {
                inside += 1;
            }
        }
        let frac = inside as f64 / steps as f64;
        assert!((0.93..=0.97).contains(&frac), "coverage {frac}");
    }
}
