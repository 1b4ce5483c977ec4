//! Interacting Multiple Model bank over EKF or UKF mode filters.
//!
//! One cycle runs, in order: mixing probabilities, mixed initial conditions,
//! mode-matched predict/update, mode probability update, and moment-matched
//! combination of the mode estimates.

use nalgebra::DMatrix;

use crate::dynamics::{ControlInput, RobotState, SpeedMeasurement, NOMINAL_RADIUS};
use crate::error::{FtcError, Result};
use crate::estimators::{
    ekf_predict, ekf_update, idx, ukf_predict, ukf_update, FilterKind, FilterModel, GaussianBelief,
    InnovationRecord, NoiseConfig, RadiusDynamics, RobotModel, StateMatrix, StateVector, DEFAULT_KAPPA,
};

/// Lower bound on a mode likelihood.
pub const LIKELIHOOD_FLOOR: f64 = 1e-300;

const PROB_TOL: f64 = 1e-12;

/// Process model a mode filter runs under.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProcessVariant {
    /// Radii follow the random walk of the single filters.
    RandomWalk,
    /// Radii are re-anchored to the mode's hypothesised radii (its initial mean) each step.
    Hypothesis,
    /// Right radius anchored to its hypothesis; the left radius deflates at
    /// `rate` (m/s) down to `floor` (m).
    RampLeft { rate: f64, floor: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeSpec {
    pub label: String,
    pub initial_mean: StateVector,
    pub process_variant: ProcessVariant,
}

impl ModeSpec {
    pub fn new(label: impl Into<String>, initial_mean: StateVector, process_variant: ProcessVariant) -> Result<Self> {
        if !(initial_mean[idx::R_RIGHT] > 0.0 && initial_mean[idx::R_LEFT] > 0.0) {
            return Err(FtcError::InvalidArgument(format!(
                "mode radii must be positive, got {:?}",
                (initial_mean[idx::R_RIGHT], initial_mean[idx::R_LEFT])
            )));
        }
        Ok(Self {
            label: label.into(),
            initial_mean,
            process_variant,
        })
    }

    /// Filter model for this mode at filter step `dt`.
    pub fn model(&self, dt: f64) -> RobotModel {
        let (r_right, r_left) = (self.initial_mean[idx::R_RIGHT], self.initial_mean[idx::R_LEFT]);
        let radii = match self.process_variant {
            ProcessVariant::RandomWalk => RadiusDynamics::RandomWalk,
            ProcessVariant::Hypothesis => RadiusDynamics::Anchored { r_right, r_left },
            ProcessVariant::RampLeft { rate, floor } => RadiusDynamics::RampLeft { r_right, rate, floor },
        };
        RobotModel::new(dt).with_radii(radii)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mode {
    pub spec: ModeSpec,
    pub belief: GaussianBelief,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImmBank {
    pub modes: Vec<Mode>,
    /// Mode probabilities.
    pub mu: Vec<f64>,
    /// Markov transition matrix, `p[(i, j)] = P(M_j now | M_i before)`.
    pub p: DMatrix<f64>,
}

impl ImmBank {
    pub fn new(modes: Vec<Mode>, mu: Vec<f64>, p: DMatrix<f64>) -> Result<Self> {
        let bank = Self { modes, mu, p };
        bank.validate()?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.modes.len();
        if r == 0 || self.mu.len() != r || self.p.nrows() != r || self.p.ncols() != r {
            return Err(FtcError::Dimension(format!(
                "bank with {r} modes, {} probabilities and a {}x{} transition matrix",
                self.mu.len(),
                self.p.nrows(),
                self.p.ncols()
            )));
        }
        if self.mu.iter().any(|m| !(*m >= 0.0)) || (self.mu.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
            return Err(FtcError::InvalidArgument(format!("mode probabilities {:?} are not a distribution", self.mu)));
        }
        for (i, row) in self.p.row_iter().enumerate() {
            if row.iter().any(|v| !(*v >= 0.0)) || (row.sum() - 1.0).abs() > PROB_TOL {
                return Err(FtcError::InvalidArgument(format!("transition row {i} is not a distribution")));
            }
        }
        Ok(())
    }

    /// Bank with uniform initial probabilities, `stay` on the diagonal of `p`
    /// and `switch` elsewhere.
    pub fn uniform(specs: Vec<ModeSpec>, stay: f64, switch: f64, initial_cov: StateMatrix) -> Result<Self> {
        let r = specs.len();
        if r == 0 {
            return Err(FtcError::Dimension("empty mode list".into()));
        }
        let p = DMatrix::from_fn(r, r, |i, j| if i == j { stay } else { switch });
        let modes = specs
            .into_iter()
            .map(|spec| Mode {
                belief: GaussianBelief {
                    mean: spec.initial_mean,
                    cov: initial_cov,
                },
                spec,
            })
            .collect();
        Self::new(modes, vec![1.0 / r as f64; r], p)
    }

    /// Four puncture hypotheses: no fault, right 50%, left 50%, both 50%.
    pub fn four_mode(pose: &RobotState, initial_cov: StateMatrix) -> Result<Self> {
        Self::uniform(puncture_hypotheses(pose)?, 0.97, 0.01, initial_cov)
    }

    /// The four puncture hypotheses plus a left-wheel ramp deflation mode.
    pub fn five_mode(pose: &RobotState, initial_cov: StateMatrix, rate: f64, floor: f64) -> Result<Self> {
        let mut specs = puncture_hypotheses(pose)?;
        specs.push(ModeSpec::new(
            "left ramp",
            StateVector::new(pose.x, pose.y, pose.psi, NOMINAL_RADIUS, NOMINAL_RADIUS),
            ProcessVariant::RampLeft { rate, floor },
        )?);
        Self::uniform(specs, 0.96, 0.01, initial_cov)
    }

    pub fn most_likely(&self) -> usize {
        self.mu
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &m)| if m > best.1 { (i, m) } else { best })
            .0
    }
}

fn puncture_hypotheses(pose: &RobotState) -> Result<Vec<ModeSpec>> {
    let half = 0.5 * NOMINAL_RADIUS;
    [
        ("no fault", NOMINAL_RADIUS, NOMINAL_RADIUS),
        ("right 50%", half, NOMINAL_RADIUS),
        ("left 50%", NOMINAL_RADIUS, half),
        ("both 50%", half, half),
    ]
    .into_iter()
    .map(|(label, rr, rl)| {
        ModeSpec::new(
            label,
            StateVector::new(pose.x, pose.y, pose.psi, rr, rl),
            ProcessVariant::Hypothesis,
        )
    })
    .collect()
}

/// Conditional mixing weights `mu_cond[(i, j)] = mu_{i|j}` and normalisers `cbar`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixResult {
    pub mu_cond: DMatrix<f64>,
    pub cbar: Vec<f64>,
}

/// `cbar_j = sum_i p_ij mu_i`, `mu_{i|j} = p_ij mu_i / cbar_j`.
///
/// A mode that cannot be reached this step (`cbar_j = 0`) keeps its own
/// estimate (`mu_{i|j} = delta_ij`); it receives zero probability in the
/// update. The bank is degenerate only if no mode is reachable.
pub fn mixing_probabilities(bank: &ImmBank) -> Result<MixResult> {
    let r = bank.len();
    let cbar: Vec<f64> = (0..r)
        .map(|j| (0..r).map(|i| bank.p[(i, j)] * bank.mu[i]).sum())
        .collect();
    if cbar.iter().any(|c| !c.is_finite()) || cbar.iter().all(|&c| c <= 0.0) {
        return Err(FtcError::DegenerateBank(format!("mixing normalisers {cbar:?}")));
    }
    let mu_cond = DMatrix::from_fn(r, r, |i, j| {
        if cbar[j] > 0.0 {
            bank.p[(i, j)] * bank.mu[i] / cbar[j]
        } else if i == j {
            1.0
        } else {
            0.0
        }
    });
    Ok(MixResult { mu_cond, cbar })
}

/// Mixed mean and covariance (including the spread of means) for each mode filter.
pub fn mix_initial_conditions(bank: &ImmBank, mix: &MixResult) -> Vec<GaussianBelief> {
    let r = bank.len();
    (0..r)
        .map(|j| {
            let weights = (0..r).map(|i| mix.mu_cond[(i, j)]);
            let beliefs = bank.modes.iter().map(|m| &m.belief);
            moment_match(weights.zip(beliefs))
        })
        .collect()
}

fn moment_match<'a>(terms: impl Iterator<Item = (f64, &'a GaussianBelief)> + Clone) -> GaussianBelief {
    let mean = terms
        .clone()
        .fold(StateVector::zeros(), |acc, (w, b)| acc + b.mean * w);
    let cov = terms.fold(StateMatrix::zeros(), |acc, (w, b)| {
        let d = b.mean - mean;
        acc + (b.cov + d * d.transpose()) * w
    });
    GaussianBelief {
        mean,
        cov: (cov + cov.transpose()) * 0.5,
    }
}

/// Gaussian density of the innovation, floored at [`LIKELIHOOD_FLOOR`].
pub fn mode_likelihood(rec: &InnovationRecord) -> f64 {
    let density = (-0.5 * rec.nu * rec.nu / rec.s).exp() / (2.0 * std::f64::consts::PI * rec.s).sqrt();
    if density.is_finite() {
        density.max(LIKELIHOOD_FLOOR)
    } else {
        LIKELIHOOD_FLOOR
    }
}

/// `mu_j = Lambda_j cbar_j / c`.
pub fn mode_probability_update(lambda: &[f64], cbar: &[f64]) -> Result<Vec<f64>> {
    if lambda.len() != cbar.len() {
        return Err(FtcError::Dimension(format!(
            "{} likelihoods for {} modes",
            lambda.len(),
            cbar.len()
        )));
    }
    let unnormalised: Vec<f64> = lambda.iter().zip(cbar).map(|(l, c)| l * c).collect();
    let c: f64 = unnormalised.iter().sum();
    if !(c > 0.0) || !c.is_finite() {
        return Err(FtcError::DegenerateBank(format!("likelihoods {lambda:?} give zero total probability")));
    }
    Ok(unnormalised.into_iter().map(|v| v / c).collect())
}

/// Moment-matched Gaussian of the mode estimates weighted by `mu`.
pub fn combine(bank: &ImmBank) -> GaussianBelief {
    moment_match(bank.mu.iter().copied().zip(bank.modes.iter().map(|m| &m.belief)))
}

#[derive(Clone, Debug)]
pub struct ImmCycle {
    pub bank: ImmBank,
    pub combined: GaussianBelief,
    pub innovations: Vec<InnovationRecord>,
    /// Modes whose filter diverged this cycle; they were re-seeded from the combined estimate.
    pub diverged: Vec<usize>,
}

/// One IMM cycle over the robot model, each mode using its process variant.
pub fn imm_cycle(
    bank: &ImmBank,
    z: &SpeedMeasurement,
    u: &ControlInput,
    noise: &NoiseConfig,
    dt: f64,
    kind: FilterKind,
) -> Result<ImmCycle> {
    let models: Vec<RobotModel> = bank.modes.iter().map(|m| m.spec.model(dt)).collect();
    imm_cycle_with(bank, &models, z, u, noise, kind, DEFAULT_KAPPA)
}

/// One IMM cycle with explicit per-mode models.
pub fn imm_cycle_with<M: FilterModel>(
    bank: &ImmBank,
    models: &[M],
    z: &SpeedMeasurement,
    u: &ControlInput,
    noise: &NoiseConfig,
    kind: FilterKind,
    kappa: f64,
) -> Result<ImmCycle> {
    if models.len() != bank.len() {
        return Err(FtcError::Dimension(format!("{} models for {} modes", models.len(), bank.len())));
    }
    let mix = mixing_probabilities(bank)?;
    let mixed = mix_initial_conditions(bank, &mix);

    let r = bank.len();
    let mut next = bank.clone();
    let mut lambda = vec![0.0; r];
    let mut innovations = Vec::with_capacity(r);
    let mut diverged = Vec::new();
    for (j, (prior, model)) in mixed.iter().zip(models).enumerate() {
        match mode_filter(prior, model, z, u, noise, kind, kappa) {
            Ok((belief, rec)) => {
                lambda[j] = mode_likelihood(&rec);
                next.modes[j].belief = belief;
                innovations.push(rec);
            }
            Err(FtcError::FilterDivergence(_)) => {
                diverged.push(j);
                innovations.push(InnovationRecord {
                    nu: f64::NAN,
                    s: f64::NAN,
                    t: z.t,
                });
            }
            Err(e) => return Err(e),
        }
    }
    if diverged.len() == r {
        return Err(FtcError::FilterDivergence("every IMM mode filter diverged".into()));
    }

    next.mu = mode_probability_update(&lambda, &mix.cbar)?;
    let combined = combine(&next);
    for &j in &diverged {
        next.modes[j].belief = combined.clone();
    }
    Ok(ImmCycle {
        bank: next,
        combined,
        innovations,
        diverged,
    })
}

fn mode_filter<M: FilterModel>(
    prior: &GaussianBelief,
    model: &M,
    z: &SpeedMeasurement,
    u: &ControlInput,
    noise: &NoiseConfig,
    kind: FilterKind,
    kappa: f64,
) -> Result<(GaussianBelief, InnovationRecord)> {
    match kind {
        FilterKind::Ekf => {
            let predicted = ekf_predict(prior, u, noise, model)?;
            ekf_update(&predicted, z, u, noise, model)
        }
        FilterKind::Ukf => {
            let (predicted, points) = ukf_predict(prior, u, noise, model, kappa)?;
            ukf_update(&predicted, &points, z, u, noise, model)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{initial_covariance, MeasurementRow};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn four() -> ImmBank {
        ImmBank::four_mode(&RobotState::default(), initial_covariance()).unwrap()
    }

    #[test]
    fn standard_bank_configuration() {
        let b = four();
        assert_eq!(b.mu, vec![0.25; 4]);
        assert_eq!(b.p[(0, 0)], 0.97);
        assert_eq!(b.p[(0, 1)], 0.01);
        let radii: Vec<_> = b.modes.iter().map(|m| m.belief.radii()).collect();
        assert_eq!(radii, vec![(2.0, 2.0), (1.0, 2.0), (2.0, 1.0), (1.0, 1.0)]);

        let b5 = ImmBank::five_mode(&RobotState::default(), initial_covariance(), 0.1, 0.1).unwrap();
        assert_eq!(b5.mu, vec![0.2; 5]);
        assert_abs_diff_eq!(b5.p[(4, 4)], 0.96, epsilon = 1e-15);
        assert_abs_diff_eq!(b5.p[(4, 0)], 0.01, epsilon = 1e-15);
        assert_eq!(b5.modes[4].belief.radii(), (2.0, 2.0));
    }

    #[test]
    fn invalid_banks_rejected() {
        let mut b = four();
        b.mu = vec![0.5, 0.5, 0.5, 0.0];
        assert!(b.validate().is_err());
        let mut b = four();
        b.p[(0, 0)] = 0.9;
        assert!(b.validate().is_err());
        assert!(ModeSpec::new("bad", StateVector::new(0.0, 0.0, 0.0, 0.0, 2.0), ProcessVariant::Hypothesis).is_err());
    }

    #[test]
    fn uniform_mixing() {
        let b = four();
        let mix = mixing_probabilities(&b).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(mix.cbar[j], 0.25, epsilon = 1e-15);
            for i in 0..4 {
                assert_abs_diff_eq!(mix.mu_cond[(i, j)], b.p[(i, j)], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn identity_transition_mixing() {
        let mut b = four();
        b.p = DMatrix::identity(4, 4);
        let mix = mixing_probabilities(&b).unwrap();
        assert_eq!(mix.mu_cond, DMatrix::identity(4, 4));
        assert_eq!(mix.cbar, b.mu);
    }

    #[test]
    fn certain_mode_mixing() {
        let mut b = four();
        b.mu = vec![1.0, 0.0, 0.0, 0.0];
        let mix = mixing_probabilities(&b).unwrap();
        assert_eq!(mix.cbar, vec![0.97, 0.01, 0.01, 0.01]);
        for j in 0..4 {
            let col: f64 = mix.mu_cond.column(j).sum();
            assert_abs_diff_eq!(col, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_modes_mix_to_themselves() {
        let mut b = four();
        let shared = b.modes[0].belief.clone();
        for m in &mut b.modes {
            m.belief = shared.clone();
        }
        let mix = mixing_probabilities(&b).unwrap();
        for mixed in mix_initial_conditions(&b, &mix) {
            assert!((mixed.mean - shared.mean).amax() < 1e-14);
            assert!((mixed.cov - shared.cov).amax() < 1e-14);
        }
    }

    fn two_mode_bank(m1: StateVector, m2: StateVector, cov: StateMatrix) -> ImmBank {
        let modes = [m1, m2]
            .into_iter()
            .map(|mean| Mode {
                spec: ModeSpec::new("m", StateVector::new(0.0, 0.0, 0.0, 1.0, 1.0), ProcessVariant::RandomWalk).unwrap(),
                belief: GaussianBelief { mean, cov },
            })
            .collect();
        ImmBank::new(modes, vec![0.5, 0.5], DMatrix::from_element(2, 2, 0.5)).unwrap()
    }

    #[test]
    fn two_mode_spread_terms() {
        let cov = initial_covariance();
        let m1 = StateVector::new(1.0, 2.0, 0.1, 2.0, 2.0);
        let m2 = StateVector::new(-1.0, 0.0, 0.3, 1.0, 2.0);
        let b = two_mode_bank(m1, m2, cov);
        let d = m1 - m2;
        let expected = cov + d * d.transpose() * 0.25;

        let mix = mixing_probabilities(&b).unwrap();
        for mixed in mix_initial_conditions(&b, &mix) {
            assert!((mixed.cov - expected).amax() < 1e-14);
        }
        let out = combine(&b);
        assert!((out.cov - expected).amax() < 1e-14);
        assert!((out.mean - (m1 + m2) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn likelihood_values() {
        let rec = |nu, s| InnovationRecord { nu, s, t: 0.0 };
        assert_abs_diff_eq!(mode_likelihood(&rec(0.0, 1.0)), 0.398_942_280_401_432_7, epsilon = 1e-12);
        assert_abs_diff_eq!(mode_likelihood(&rec(0.0, 0.25)), 0.797_884_560_802_865_4, epsilon = 1e-12);
        let mut prev = f64::INFINITY;
        for k in 0..100 {
            let l = mode_likelihood(&rec(k as f64 * 0.1, 0.3));
            assert!(l <= prev);
            prev = l;
        }
        assert_eq!(mode_likelihood(&rec(1e6, 0.25)), LIKELIHOOD_FLOOR);
    }

    #[test]
    fn probability_update_examples() {
        let mu = mode_probability_update(&[2.0, 1.0, 1.0, 1.0], &[0.25; 4]).unwrap();
        for (a, b) in mu.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let cbar = [0.1, 0.2, 0.3, 0.4];
        let mu = mode_probability_update(&[3.0; 4], &cbar).unwrap();
        for (a, b) in mu.iter().zip(cbar) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(mode_probability_update(&[1.0, 0.0, 0.0, 0.0], &[0.25; 4]).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert!(mode_probability_update(&[0.0; 4], &[0.25; 4]).is_err());
    }

    #[test]
    fn single_surviving_mode_combines_to_itself() {
        let mut b = four();
        b.mu = vec![1.0, 0.0, 0.0, 0.0];
        let out = combine(&b);
        assert_eq!(out.mean, b.modes[0].belief.mean);
        assert!((out.cov - b.modes[0].belief.cov).amax() < 1e-15);
    }

    #[test]
    fn combined_mean_in_convex_hull_and_mixing_inflates() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let mut b = four();
            let mut mu: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let total: f64 = mu.iter().sum();
            mu.iter_mut().for_each(|m| *m /= total);
            b.mu = mu;
            for m in &mut b.modes {
                m.belief.mean = StateVector::from_fn(|_, _| rng.random_range(-3.0..3.0));
                let a = StateMatrix::from_fn(|_, _| rng.random_range(-1.0..1.0));
                m.belief.cov = a * a.transpose();
            }
            let out = combine(&b);
            for c in 0..5 {
                let lo = b.modes.iter().map(|m| m.belief.mean[c]).fold(f64::INFINITY, f64::min);
                let hi = b.modes.iter().map(|m| m.belief.mean[c]).fold(f64::NEG_INFINITY, f64::max);
                assert!(out.mean[c] >= lo - 1e-12 && out.mean[c] <= hi + 1e-12);
            }
            let min_trace = b.modes.iter().map(|m| m.belief.cov.trace()).fold(f64::INFINITY, f64::min);
            let mix = mixing_probabilities(&b).unwrap();
            for mixed in mix_initial_conditions(&b, &mix) {
                assert!(mixed.cov.trace() >= min_trace - 1e-12);
            }
        }
    }

    #[test]
    fn identical_bank_reduces_to_single_filter() {
        let noise = NoiseConfig::standard(0.01);
        let pose = RobotState::new(0.0, 0.0, 0.3);
        let init = GaussianBelief::initial(&pose, 2.0, 2.0);
        let spec = ModeSpec::new("same", init.mean, ProcessVariant::RandomWalk).unwrap();
        let modes = vec![
            Mode {
                spec: spec.clone(),
                belief: init.clone()
            };
            3
        ];
        let mut bank = ImmBank::new(modes, vec![1.0 / 3.0; 3], DMatrix::from_fn(3, 3, |i, j| if i == j { 0.98 } else { 0.01 })).unwrap();
        let model = spec.model(0.01);
        for kind in [FilterKind::Ekf, FilterKind::Ukf] {
            let mut single = init.clone();
            let mut b = bank.clone();
            for k in 0..50 {
                let u = ControlInput::new(5.0 + 0.01 * k as f64, 4.8);
                let z = SpeedMeasurement { z: 9.0 + 0.1 * (k % 3) as f64, t: k as f64 * 0.01 };
                let cycle = imm_cycle(&b, &z, &u, &noise, 0.01, kind).unwrap();
                let (s, _) = mode_filter(&single, &model, &z, &u, &noise, kind, DEFAULT_KAPPA).unwrap();
                single = s;
                assert!((cycle.combined.mean - single.mean).amax() < 1e-9);
                assert!((cycle.combined.cov - single.cov).amax() < 1e-9);
                b = cycle.bank;
            }
        }
        bank.mu = vec![1.0, 0.0, 0.0];
        assert!(bank.validate().is_ok());
    }

    #[test]
    fn no_switching_bank_matches_single_filter() {
        let noise = NoiseConfig::standard(0.01);
        let pose = RobotState::default();
        let mut bank = four();
        for m in &mut bank.modes {
            m.spec.process_variant = ProcessVariant::RandomWalk;
        }
        bank.p = DMatrix::identity(4, 4);
        bank.mu = vec![0.0, 0.0, 1.0, 0.0];
        let mut single = bank.modes[2].belief.clone();
        let model = bank.modes[2].spec.model(0.01);
        let _ = pose;
        for k in 0..200 {
            let u = ControlInput::new(5.0, 5.2);
            let z = SpeedMeasurement { z: 7.5, t: k as f64 * 0.01 };
            let cycle = imm_cycle(&bank, &z, &u, &noise, 0.01, FilterKind::Ukf).unwrap();
            single = mode_filter(&single, &model, &z, &u, &noise, FilterKind::Ukf, DEFAULT_KAPPA).unwrap().0;
            assert_eq!(cycle.bank.mu, vec![0.0, 0.0, 1.0, 0.0]);
            assert!((cycle.combined.mean - single.mean).amax() < 1e-12);
            bank = cycle.bank;
        }
    }

    #[test]
    fn probabilities_stay_normalised() {
        let noise = NoiseConfig::standard(0.01);
        let mut bank = ImmBank::five_mode(&RobotState::default(), initial_covariance(), 0.1, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in 0..10_000 {
            let u = ControlInput::new(rng.random_range(0.0..17.0), rng.random_range(0.0..17.0));
            let z = SpeedMeasurement {
                z: rng.random_range(-20.0..40.0),
                t: k as f64 * 0.01,
            };
            bank = imm_cycle(&bank, &z, &u, &noise, 0.01, FilterKind::Ekf).unwrap().bank;
            assert!(bank.mu.iter().all(|m| *m >= 0.0));
            assert!((bank.mu.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    /// Scalar linear mode model embedded in the first state component.
    struct ScalarMode {
        a: f64,
    }

    impl FilterModel for ScalarMode {
        fn propagate(&self, x: &StateVector, _u: &ControlInput) -> StateVector {
            let mut out = *x;
            out[0] = self.a * x[0];
            out
        }
        fn process_jacobian(&self, _x: &StateVector, _u: &ControlInput) -> StateMatrix {
            let mut f = StateMatrix::identity();
            f[(0, 0)] = self.a;
            f
        }
        fn observe(&self, x: &StateVector, _u: &ControlInput) -> f64 {
            x[0]
        }
        fn observation_jacobian(&self, _x: &StateVector, _u: &ControlInput) -> MeasurementRow {
            MeasurementRow::new(1.0, 0.0, 0.0, 0.0, 0.0)
        }
    }

    #[test]
    fn scalar_bank_diverged_mode_is_reseeded() {
        struct Broken;
        impl FilterModel for Broken {
            fn propagate(&self, x: &StateVector, _u: &ControlInput) -> StateVector {
                *x
            }
            fn process_jacobian(&self, _x: &StateVector, _u: &ControlInput) -> StateMatrix {
                StateMatrix::identity() * f64::NAN
            }
            fn observe(&self, x: &StateVector, _u: &ControlInput) -> f64 {
                x[0]
            }
            fn observation_jacobian(&self, _x: &StateVector, _u: &ControlInput) -> MeasurementRow {
                MeasurementRow::new(1.0, 0.0, 0.0, 0.0, 0.0)
            }
        }
        enum Either {
            Good(ScalarMode),
            Bad(Broken),
        }
        impl FilterModel for Either {
            fn propagate(&self, x: &StateVector, u: &ControlInput) -> StateVector {
                match self {
                    Either::Good(m) => m.propagate(x, u),
                    Either::Bad(m) => m.propagate(x, u),
                }
            }
            fn process_jacobian(&self, x: &StateVector, u: &ControlInput) -> StateMatrix {
                match self {
                    Either::Good(m) => m.process_jacobian(x, u),
                    Either::Bad(m) => m.process_jacobian(x, u),
                }
            }
            fn observe(&self, x: &StateVector, u: &ControlInput) -> f64 {
                x[0] + 0.0 * u.omega_left
            }
            fn observation_jacobian(&self, _x: &StateVector, _u: &ControlInput) -> MeasurementRow {
                MeasurementRow::new(1.0, 0.0, 0.0, 0.0, 0.0)
            }
        }
        let mut cov = StateMatrix::zeros();
        cov[(0, 0)] = 1.0;
        let bank = two_mode_bank(StateVector::new(1.0, 0.0, 0.0, 1.0, 1.0), StateVector::new(2.0, 0.0, 0.0, 1.0, 1.0), cov);
        let models = [Either::Good(ScalarMode { a: 1.0 }), Either::Bad(Broken)];
        let noise = NoiseConfig { q: StateMatrix::zeros(), r: 1.0 };
        let z = SpeedMeasurement { z: 1.0, t: 0.0 };
        let out = imm_cycle_with(&bank, &models, &z, &ControlInput::default(), &noise, FilterKind::Ekf, DEFAULT_KAPPA).unwrap();
        assert_eq!(out.diverged, vec![1]);
        assert_eq!(out.bank.mu, vec![1.0, 0.0]);
        assert_eq!(out.bank.modes[1].belief, out.combined);
    }

    /// Straight-from-the-equations scalar IMM used as an independent oracle.
    fn scalar_oracle(
        a: &[f64; 2],
        p: &[[f64; 2]; 2],
        q: f64,
        r: f64,
        mut mu: [f64; 2],
        mut x: [f64; 2],
        mut var: [f64; 2],
        zs: &[f64],
    ) -> Vec<f64> {
        let mut out = Vec::new();
        for &z in zs {
            let mut cbar = [0.0; 2];
            for j in 0..2 {
                for i in 0..2 {
                    cbar[j] += p[i][j] * mu[i];
                }
            }
            let mut x0 = [0.0; 2];
            let mut p0 = [0.0; 2];
            for j in 0..2 {
                let w = [p[0][j] * mu[0] / cbar[j], p[1][j] * mu[1] / cbar[j]];
                x0[j] = w[0] * x[0] + w[1] * x[1];
                p0[j] = w[0] * (var[0] + (x[0] - x0[j]).powi(2)) + w[1] * (var[1] + (x[1] - x0[j]).powi(2));
            }
            let mut lam = [0.0; 2];
            for j in 0..2 {
                let xp = a[j] * x0[j];
                let pp = a[j] * p0[j] * a[j] + q;
                let s = pp + r;
                let nu = z - xp;
                let k = pp / s;
                x[j] = xp + k * nu;
                var[j] = (1.0 - k) * pp * (1.0 - k) + k * r * k;
                lam[j] = (-0.5 * nu * nu / s).exp() / (2.0 * std::f64::consts::PI * s).sqrt();
            }
            let c = lam[0] * cbar[0] + lam[1] * cbar[1];
            mu = [lam[0] * cbar[0] / c, lam[1] * cbar[1] / c];
            out.push(mu[0] * x[0] + mu[1] * x[1]);
        }
        out
    }

    #[test]
    fn scalar_bank_matches_independent_oracle() {
        let a = [0.99, 1.02];
        let p = [[0.95, 0.05], [0.1, 0.9]];
        let (q, r) = (0.04, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let zs: Vec<f64> = (0..100).map(|k| (k as f64 * 0.1).sin() * 3.0 + rng.random_range(-0.5..0.5)).collect();
        let expected = scalar_oracle(&a, &p, q, r, [0.6, 0.4], [0.5, -0.5], [1.0, 2.0], &zs);

        let mut noise_q = StateMatrix::zeros();
        noise_q[(0, 0)] = q;
        let noise = NoiseConfig { q: noise_q, r };
        let belief = |m: f64, v: f64| {
            let mut cov = StateMatrix::zeros();
            cov[(0, 0)] = v;
            GaussianBelief {
                mean: StateVector::new(m, 0.0, 0.0, 1.0, 1.0),
                cov,
            }
        };
        let spec = ModeSpec::new("s", StateVector::new(0.0, 0.0, 0.0, 1.0, 1.0), ProcessVariant::RandomWalk).unwrap();
        let mut bank = ImmBank::new(
            vec![
                Mode { spec: spec.clone(), belief: belief(0.5, 1.0) },
                Mode { spec, belief: belief(-0.5, 2.0) },
            ],
            vec![0.6, 0.4],
            DMatrix::from_row_slice(2, 2, &[0.95, 0.05, 0.1, 0.9]),
        )
        .unwrap();
        let models = [ScalarMode { a: a[0] }, ScalarMode { a: a[1] }];
        for (k, &z) in zs.iter().enumerate() {
            let meas = SpeedMeasurement { z, t: k as f64 };
            let cycle = imm_cycle_with(&bank, &models, &meas, &ControlInput::default(), &noise, FilterKind::Ekf, DEFAULT_KAPPA).unwrap();
            assert!((cycle.combined.mean[0] - expected[k]).abs() < 1e-12, "step {k}");
            bank = cycle.bank;
        }
    }
}
